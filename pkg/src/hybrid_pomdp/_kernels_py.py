"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np

_CHUNK = 512


def multiquadric_matrix(a, b, shape):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.empty((a.shape[0], b.shape[0]))
    for start in range(0, a.shape[0], _CHUNK):
        block = a[start:start + _CHUNK]
        r2 = ((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        out[start:start + _CHUNK] = np.sqrt(r2 + shape * shape)
    return out


def multiquadric_eval(points, centers, weights, shape):
    return multiquadric_matrix(points, centers, shape) @ np.asarray(weights, dtype=float)


def min_cross_distance(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    best = np.inf
    for start in range(0, a.shape[0], _CHUNK):
        block = a[start:start + _CHUNK]
        r2 = ((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        best = min(best, float(r2.min()))
    return float(np.sqrt(best))
