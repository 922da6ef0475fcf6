"""Self-checks for the loss suite, one ``name,value,tolerance,pass`` line each."""
from dataclasses import dataclass

import numpy as np

from . import losses
from .geometry import identity, partition_patches, translation

GRAD_TOL = 1e-4
EXACT_TOL = 1e-12
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool

    def line(self):
        return f"{self.name},{self.value:.6g},{self.tolerance:g},{'pass' if self.passed else 'fail'}"


def _at_most(name, value, tol):
    return CheckResult(name, float(value), tol, bool(value <= tol))


def gradient_check(h_n, h_prev, T, grid, metric="cosine", alpha=losses.ALPHA_INIT,
                   step=FD_STEP, corrupt=False):
    """Max relative error of :func:`losses.grad_total` against central differences.

    Pixels in near-tied patch maxima (closer than two steps) are skipped since
    the perturbation itself would move the argmax.
    """
    g_n, g_prev = losses.grad_total(h_n, h_prev, T, grid, metric, alpha)
    if corrupt:
        g_n = g_n * 1.01
    f_n, f_prev = losses.finite_difference_grad(h_n, h_prev, T, grid, metric, alpha, step=step)
    skip = losses.argmax_tie_pixels(h_n, grid, 2 * step)
    err_n = losses.relative_error(g_n, f_n)[~skip]
    err_prev = losses.relative_error(g_prev, f_prev)
    return float(max(err_n.max(initial=0.0), err_prev.max(initial=0.0)))


def run_losscheck(seed=0, size=64, patch=30, pairs=3, corrupt_gradient=False):
    rng = np.random.default_rng(seed)
    grid = partition_patches(size, size, patch)
    if len(grid) == 0:
        raise ValueError("patch size larger than the heatmap")
    results = []

    bounds_consist, bounds_peaky, bounds_cp = 0.0, 0.0, 0.0
    shuffle_err, total_err = 0.0, 0.0
    for _ in range(pairs):
        h_n = rng.uniform(0.0, 1.0, (size, size))
        h_prev = rng.uniform(0.0, 1.0, (size, size))
        T = translation(*rng.uniform(-3, 3, 2))
        rep = losses.total_loss(h_n, h_prev, T, grid, "cosine", 0.25)
        bounds_consist = max(bounds_consist, -rep.l_consist, rep.l_consist - 1)
        bounds_peaky = max(bounds_peaky, -rep.l_peaky, rep.l_peaky - 1)
        bounds_cp = max(bounds_cp, -rep.l_cp, rep.l_cp - 2)
        total_err = max(total_err, abs(rep.l_total - (rep.l_consist + 0.25 * rep.l_cp)))
        perm = rng.permutation(len(rep.grid))
        shuffled = rep.grid.subset(perm)
        shuffle_err = max(shuffle_err,
                          abs(losses.peaky_loss(h_n, shuffled) - rep.l_peaky),
                          abs(losses.cp_loss(h_n, rep.mask[perm], shuffled) - rep.l_cp))
    results.append(_at_most("consist_bounds", bounds_consist, 0.0))
    results.append(_at_most("peaky_bounds", bounds_peaky, 0.0))
    results.append(_at_most("cp_bounds", bounds_cp, 0.0))
    results.append(_at_most("total_definition", total_err, EXACT_TOL))
    results.append(_at_most("patch_shuffle_invariance", shuffle_err, EXACT_TOL))

    h = rng.uniform(0.0, 1.0, (size, size))
    ident = losses.cp_loss(h, np.ones(len(grid)), grid) - losses.peaky_loss(h, grid)
    results.append(_at_most("cp_equals_peaky_unit_mask", abs(ident), 0.0))
    l_self, _ = losses.consistency_loss(h, h, identity(), grid)
    results.append(_at_most("consist_self_zero", abs(l_self), EXACT_TOL))
    h2 = rng.uniform(0.0, 1.0, (size, size))
    rep0 = losses.total_loss(h, h2, identity(), grid, alpha=0.0)
    results.append(_at_most("alpha_zero_collapse", abs(rep0.l_total - rep0.l_consist), 0.0))
    results.append(_at_most("peaky_constant_one",
                            abs(losses.peaky_loss(np.full((size, size), 0.3), grid) - 1.0), 0.0))
    onehot = np.zeros((size, size))
    for x, y in grid.origins:
        onehot[y + patch // 2, x + patch // 2] = 1.0
    results.append(_at_most("peaky_onehot_inverse_area",
                            abs(losses.peaky_loss(onehot, grid) - 1.0 / patch ** 2), EXACT_TOL))

    h_n = rng.uniform(0.05, 0.95, (size, size))
    h_prev = rng.uniform(0.05, 0.95, (size, size))
    T = translation(*rng.uniform(-3, 3, 2))
    err = gradient_check(h_n, h_prev, T, grid, "cosine", 0.25, corrupt=corrupt_gradient)
    results.append(_at_most("grad_total_vs_central_diff", err, GRAD_TOL))
    return results
