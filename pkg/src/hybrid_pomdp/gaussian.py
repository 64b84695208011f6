"""Gaussian helpers: log densities, PSD checks and box truncation.

Truncation uses the sequential one-axis rule: the Gaussian is conditioned on
one bound pair at a time and refit by its first two moments. For diagonal
covariances and boxes this is exact; otherwise it is the usual
moment-matched approximation.
"""

import numpy as np
from scipy.special import erfcx, ndtr

_SQRT2 = np.sqrt(2.0)
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
_LOG2PI = np.log(2.0 * np.pi)
_TINY_MASS = 1e-300


def symmetrize(a):
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + a.T)


def is_psd(a, tol=1e-9):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or not np.all(np.isfinite(a)):
        return False
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > tol * scale:
        return False
    return bool(np.linalg.eigvalsh(symmetrize(a)).min() >= -tol * scale)


def logpdf(x, mean, cov):
    """Log density of ``N(mean, cov)`` at ``x``; raises LinAlgError if singular."""
    diff = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, diff)
    half_logdet = np.log(np.diag(chol)).sum()
    with np.errstate(over="ignore"):
        # Far outliers overflow to a log density of -inf, which is the right limit.
        quad = sol @ sol
    return float(-0.5 * quad - half_logdet - 0.5 * diff.size * _LOG2PI)


def _phi(t):
    return np.exp(-0.5 * t * t) / np.sqrt(2.0 * np.pi)


def _mills(a):
    """phi(a) / (1 - Phi(a)), stable for large ``a``."""
    return _SQRT_2_OVER_PI / erfcx(a / _SQRT2)


def std_truncated_moments(a, b):
    """Mass, mean and variance of a standard normal restricted to ``[a, b]``."""
    if a == -np.inf and b == np.inf:
        return 1.0, 0.0, 1.0
    if b == np.inf:
        lam = _mills(a)
        return float(ndtr(-a)), float(lam), float(max(1.0 + a * lam - lam * lam, 0.0))
    if a == -np.inf:
        lam = _mills(-b)
        return float(ndtr(b)), float(-lam), float(max(1.0 - b * lam - lam * lam, 0.0))
    if a >= 0.0:
        mass = ndtr(-a) - ndtr(-b)
    else:
        mass = ndtr(b) - ndtr(a)
    if mass < _TINY_MASS:
        return 0.0, 0.5 * (a + b), 0.0
    pa, pb = _phi(a), _phi(b)
    mean = (pa - pb) / mass
    var = 1.0 + (a * pa - b * pb) / mass - mean * mean
    return float(mass), float(mean), float(min(max(var, 0.0), 1.0))


def truncate_to_box(mean, cov, lo, hi):
    """Condition ``N(mean, cov)`` on the axis-aligned box ``[lo, hi]``.

    Returns ``(mass, mean, cov)``. ``mass`` is the Gaussian probability of
    the box; when it underflows the returned moments are ``None``.
    """
    mu = np.array(mean, dtype=float)
    sigma = np.array(cov, dtype=float)
    mass = 1.0
    for k in range(mu.size):
        if lo[k] == -np.inf and hi[k] == np.inf:
            continue
        var_k = sigma[k, k]
        if var_k <= 0.0:
            inside = lo[k] <= mu[k] <= hi[k]
            if not inside:
                return 0.0, None, None
            continue
        s = np.sqrt(var_k)
        z_mass, z_mean, z_var = std_truncated_moments((lo[k] - mu[k]) / s, (hi[k] - mu[k]) / s)
        mass *= z_mass
        if mass < _TINY_MASS:
            return 0.0, None, None
        col = sigma[:, k].copy()
        mu = mu + col * (z_mean / s)
        sigma = sigma - np.outer(col, col) * ((1.0 - z_var) / var_k)
    return float(mass), mu, symmetrize(sigma)


def box_mass(mean, cov, lo, hi):
    return truncate_to_box(mean, cov, lo, hi)[0]


def merge_moments(weights, means, covs):
    """Single Gaussian with the same first two moments as the mixture."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    mus = np.asarray(means, dtype=float)
    mean = (w[:, None] * mus).sum(axis=0) / total
    cov = np.zeros((mus.shape[1], mus.shape[1]))
    for wi, mi, ci in zip(w, mus, covs):
        d = mi - mean
        cov += wi * (np.asarray(ci) + np.outer(d, d))
    return total, mean, symmetrize(cov / total)


def psd_sqrt(cov):
    """Factor ``S`` with ``S @ S.T == cov`` (Cholesky, eigen fallback for singular input)."""
    cov = symmetrize(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_gaussian(rng, mean, cov, n):
    mean = np.asarray(mean, dtype=float)
    return mean + rng.standard_normal((n, mean.size)) @ psd_sqrt(cov).T
