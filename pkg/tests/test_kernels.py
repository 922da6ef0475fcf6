import os
import subprocess
import sys

import numpy as np
import pytest

from evkp import _accel, kernels

PROBE = """
import evkp, evkp.kernels as k
print(evkp.USE_NUMBA, k.voxel_accumulate.__name__, k.simulate.__name__,
      k.deform_conv.__name__, k.warp_gather.__name__)
"""


def probe(flag):
    env = dict(os.environ)
    env.pop("EVKP_DISABLE_NUMBA", None)
    if flag is not None:
        env["EVKP_DISABLE_NUMBA"] = flag
    res = subprocess.run([sys.executable, "-c", PROBE], env=env, capture_output=True, text=True,
                         check=True)
    return res.stdout.split()


@pytest.mark.parametrize("flag", ["1", "true", "YES", "on"])
def test_flag_selects_numpy(flag):
    assert probe(flag) == ["False", "voxel_accumulate_np", "simulate_np", "deform_conv_np",
                           "warp_gather_np"]


@pytest.mark.skipif(not _accel.HAS_NUMBA, reason="numba not installed")
@pytest.mark.parametrize("flag", [None, "", "0", "no"])
def test_default_uses_numba(flag):
    assert probe(flag) == ["True", "voxel_accumulate_nb", "simulate_nb", "deform_conv_nb",
                           "warp_gather_nb"]


def test_warp_gather_kernels_agree():
    rng = np.random.default_rng(0)
    img = rng.random((9, 11))
    # top-left corners that keep the 2x2 stencil inside the image
    ys, xs = rng.integers(0, 8, 50), rng.integers(0, 10, 50)
    idx = ys * 11 + xs
    w = rng.random((4, 50))
    a = kernels.warp_gather_nb(img, idx, w)
    b = kernels.warp_gather_np(img, idx, w)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)
