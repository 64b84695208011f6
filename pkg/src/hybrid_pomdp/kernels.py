"""Hot numerical kernels.

The compiled Cython module is used when it was built; otherwise the numpy
implementation is loaded. Set ``HYBRID_POMDP_PURE_PYTHON=1`` to force the
fallback (used by the benchmark and the cross-check tests).
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("HYBRID_POMDP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _c2d(a):
    return np.ascontiguousarray(np.atleast_2d(np.asarray(a, dtype=np.float64)))


def multiquadric_matrix(a, b, shape):
    """Matrix of ``sqrt(|a_i - b_j|^2 + shape^2)``."""
    return _impl.multiquadric_matrix(_c2d(a), _c2d(b), float(shape))


def multiquadric_eval(points, centers, weights, shape):
    """Weighted multiquadric sum at each row of ``points``."""
    w = np.ascontiguousarray(np.asarray(weights, dtype=np.float64))
    return _impl.multiquadric_eval(_c2d(points), _c2d(centers), w, float(shape))


def min_cross_distance(a, b):
    """Smallest Euclidean distance between a row of ``a`` and a row of ``b``."""
    return float(_impl.min_cross_distance(_c2d(a), _c2d(b)))
