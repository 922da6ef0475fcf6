"""Event-plus-frame keypoint detection and tracking toolkit.

Set ``EVKP_DISABLE_NUMBA=1`` before import to run the pure-numpy kernels.
"""
from ._accel import HAS_NUMBA, USE_NUMBA

__version__ = "0.1.0"
__all__ = ["HAS_NUMBA", "USE_NUMBA", "__version__"]
