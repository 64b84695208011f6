"""Hybrid Bayesian filter: mode-weighted prediction, guard-sampled
transition matrix, EKF-bank correction and mixture reduction."""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import (
    AllZeroLikelihoodWarning,
    DegenerateBelief,
    DimensionMismatch,
    NumericalFailure,
    SingularInnovationCovariance,
)
from .gaussian import is_psd, logpdf, merge_moments, symmetrize, truncate_to_box
from .hybrid_model import Box, Complement, GaussianComponent, HybridBelief, normalized

# Below this probability a region is treated as empty when conditioning.
MIN_REGION_MASS = 1e-12
# Modes whose discrete weight falls below this contribute nothing to the prior.
MIN_MODE_WEIGHT = 1e-15


@dataclass(frozen=True)
class FilterConfig:
    n_guard_samples: int = 2000
    epsilon_floor: float = 1e-6
    mixture_size: int = 1
    rng_seed: int = 0
    # "sample" draws n_guard_samples points; "analytic" integrates box guards
    # in closed form (falls back to sampling for predicate-only guards).
    transition_method: str = "sample"
    # Propagate each mode's share of the belief conditioned on its region.
    condition_on_guards: bool = True

    def __post_init__(self):
        if self.n_guard_samples < 100:
            raise ValueError("n_guard_samples must be at least 100")
        if not (0.0 < self.epsilon_floor <= 1e-3):
            raise ValueError("epsilon_floor must lie in (0, 1e-3]")
        if self.mixture_size < 1:
            raise ValueError("mixture_size must be at least 1")
        if self.transition_method not in ("sample", "analytic"):
            raise ValueError(f"unknown transition_method {self.transition_method!r}")


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Row-stochastic ``entries[i, j] = p(q_j at t+1 | q_i at t, prior)``."""

    entries: np.ndarray
    epsilon_floor: float

    def __post_init__(self):
        e = np.array(self.entries, dtype=float)
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)


# ---------------------------------------------------------------------------
# Region conditioning


def region_moments(region, mean, cov):
    """``(mass, mean, cov)`` of ``N(mean, cov)`` restricted to ``region``.

    Returns ``None`` when the region has no closed-form description.
    """
    if isinstance(region, Box):
        return truncate_to_box(mean, cov, region.lo, region.hi)
    if isinstance(region, Complement):
        parts = [truncate_to_box(mean, cov, b.lo, b.hi) for b in region.boxes]
        mass = 1.0 - sum(p[0] for p in parts)
        if mass < MIN_REGION_MASS:
            return 0.0, None, None
        first = np.array(mean, dtype=float)
        second = np.array(cov, dtype=float) + np.outer(mean, mean)
        for pm, pmu, pcov in parts:
            if pm > 0.0:
                first = first - pm * pmu
                second = second - pm * (pcov + np.outer(pmu, pmu))
        mu = first / mass
        sigma = symmetrize(second / mass - np.outer(mu, mu))
        if not is_psd(sigma, tol=1e-9):
            return mass, np.asarray(mean, dtype=float), np.asarray(cov, dtype=float)
        return mass, mu, sigma
    return None


def _condition(model, mode, component):
    region = model.region(mode).region
    if region is None:
        return component
    res = region_moments(region, component.mean, component.cov)
    if res is None or res[0] < MIN_REGION_MASS:
        return component
    return GaussianComponent._trusted(res[1], res[2], component.weight)


def region_probabilities(model, components):
    """Analytic probability of every mode region under a Gaussian mixture."""
    probs = np.zeros(model.n_modes)
    for q in range(model.n_modes):
        region = model.region(q).region
        if region is None:
            return None
        for c in components:
            res = region_moments(region, c.mean, c.cov)
            probs[q] += c.weight * res[0]
    return probs


# ---------------------------------------------------------------------------
# Prediction


def propagate_component(model, mode, component, u):
    """EKF prediction of one Gaussian component through mode ``mode``."""
    loc = model.locals[mode]
    mu = component.mean
    A = np.asarray(loc.dynamics_jac_x(mu, u), dtype=float)
    mean = np.asarray(loc.dynamics(mu, u), dtype=float)
    cov = symmetrize(A @ component.cov @ A.T + loc.process_noise_cov)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise NumericalFailure(f"non-finite prediction in mode {mode}")
    return GaussianComponent._trusted(mean, cov, component.weight)


def _default_rng(config, rng):
    return np.random.default_rng(config.rng_seed) if rng is None else rng


def estimate_transition_matrix(model, prior, config, rng=None):
    """Transition matrix from the guard occupancy of the continuous prior.

    ``prior`` is a :class:`HybridBelief` or a sequence of components.
    """
    comps = prior.continuous if isinstance(prior, HybridBelief) else tuple(prior)
    nq = model.n_modes
    edges = model.graph.edges
    fractions = None
    if config.transition_method == "analytic":
        fractions = _analytic_edge_fractions(model, comps)
    if fractions is None:
        fractions = _sampled_edge_fractions(model, comps, config, _default_rng(config, rng))
    raw = np.full((nq, nq), config.epsilon_floor)
    for (i, j), frac in fractions.items():
        raw[i, j] = frac
    rows = raw.sum(axis=1)
    for i in np.flatnonzero(rows <= 0.0):
        raw[i, i] = 1.0
    entries = raw / raw.sum(axis=1, keepdims=True)
    return TransitionMatrix(entries, config.epsilon_floor)


def _sampled_edge_fractions(model, comps, config, rng):
    w = np.array([c.weight for c in comps])
    for c in comps:
        if not is_psd(c.cov):
            raise DegenerateBelief("cannot sample a non-PSD covariance")
    belief = HybridBelief(tuple(GaussianComponent(c.mean, c.cov, c.weight / w.sum()) for c in comps),
                          np.ones(model.n_modes) / model.n_modes)
    pts = belief.sample(rng, config.n_guard_samples)
    cache = {}
    out = {}
    for edge, guard in model.graph.edges.items():
        key = id(guard)
        if key not in cache:
            cache[key] = float(np.mean(guard.contains(pts)))
        out[edge] = cache[key]
    return out


def _analytic_edge_fractions(model, comps):
    cache = {}
    out = {}
    for edge, guard in model.graph.edges.items():
        if guard.region is None:
            return None
        key = id(guard)
        if key not in cache:
            cache[key] = sum(c.weight * region_moments(guard.region, c.mean, c.cov)[0] for c in comps)
        out[edge] = cache[key]
    return out


def belief_prior(model, belief, u, config=FilterConfig(), rng=None):
    """Predicted hybrid belief after applying control ``u``."""
    u = np.asarray(u, dtype=float)
    if u.shape != (model.control_dim,):
        raise DimensionMismatch(f"control must be a {model.control_dim}-vector")
    parts = []
    for comp in belief.continuous:
        for q in range(model.n_modes):
            bq = belief.discrete[q]
            if bq <= MIN_MODE_WEIGHT:
                continue
            src = _condition(model, q, comp) if config.condition_on_guards else comp
            pred = propagate_component(model, q, src, u)
            parts.append(pred.with_weight(comp.weight * bq))
    total = sum(p.weight for p in parts)
    parts = [p.with_weight(p.weight / total) for p in parts]
    continuous = reduce_mixture(parts, config.mixture_size)
    pi = estimate_transition_matrix(model, continuous, config, rng)
    discrete = normalized(pi.entries.T @ belief.discrete)
    return HybridBelief._trusted(continuous, discrete)


# ---------------------------------------------------------------------------
# Correction


def posterior_update(model, prior, z, config=FilterConfig()):
    """EKF-bank correction of the continuous part and Bayes update of the modes."""
    z = np.asarray(z, dtype=float)
    if z.shape != (model.obs_dim,) or not np.all(np.isfinite(z)):
        raise DimensionMismatch(f"observation must be a finite {model.obs_dim}-vector")
    bq = prior.discrete
    active = [q for q in range(model.n_modes) if bq[q] > 0.0]
    n = model.state_dim
    eye = np.eye(n)
    new_comps = []
    log_mode_terms = np.full((model.n_modes, len(prior.continuous)), -np.inf)
    log_comp_lik = np.zeros(len(prior.continuous))
    for li, comp in enumerate(prior.continuous):
        mu, sigma = comp.mean, comp.cov
        mean_shift = np.zeros(n)
        cov = np.zeros((n, n))
        z_hat = np.zeros(model.obs_dim)
        s_bar = np.zeros((model.obs_dim, model.obs_dim))
        for q in active:
            loc = model.locals[q]
            C = np.asarray(loc.observation_jac(mu), dtype=float)
            h = np.asarray(loc.observation(mu), dtype=float)
            S = symmetrize(C @ sigma @ C.T + loc.observation_noise_cov)
            try:
                chol = np.linalg.cholesky(S)
            except np.linalg.LinAlgError as exc:
                raise SingularInnovationCovariance(f"mode {q}: innovation covariance is singular") from exc
            K = np.linalg.solve(chol.T, np.linalg.solve(chol, C @ sigma)).T
            innov = z - h
            mean_shift += bq[q] * (K @ innov)
            cov += bq[q] * ((eye - K @ C) @ sigma)
            z_hat += bq[q] * h
            s_bar += bq[q] * S
            log_mode_terms[q, li] = np.log(comp.weight) + logpdf(z, h, S) if comp.weight > 0 else -np.inf
        new_comps.append((mu + mean_shift, symmetrize(cov)))
        log_comp_lik[li] = logpdf(z, z_hat, s_bar)

    log_m = logsumexp(log_mode_terms, axis=1)
    log_post = np.where(bq > 0, np.log(np.where(bq > 0, bq, 1.0)) + log_m, -np.inf)
    if not np.any(np.isfinite(log_post)):
        warnings.warn("all mode likelihoods vanished; using a uniform discrete posterior",
                      AllZeroLikelihoodWarning)
        discrete = np.ones(model.n_modes) / model.n_modes
    else:
        discrete = np.exp(log_post - logsumexp(log_post))

    prior_w = np.array([c.weight for c in prior.continuous])
    log_w = np.where(prior_w > 0, np.log(np.where(prior_w > 0, prior_w, 1.0)) + log_comp_lik, -np.inf)
    weights = np.exp(log_w - logsumexp(log_w)) if np.any(np.isfinite(log_w)) else prior_w / prior_w.sum()
    comps = [GaussianComponent._trusted(m, c, w) for (m, c), w in zip(new_comps, weights)]
    comps = reduce_mixture(comps, config.mixture_size)
    return HybridBelief._trusted(comps, normalized(discrete))


def filter_step(model, belief, u, z, config=FilterConfig(), rng=None):
    return posterior_update(model, belief_prior(model, belief, u, config, rng), z, config)


# ---------------------------------------------------------------------------
# Mixture reduction


def _merge_pair(a, b):
    w, mean, cov = merge_moments([a.weight, b.weight], [a.mean, b.mean], [a.cov, b.cov])
    return GaussianComponent._trusted(mean, cov, w)


def _logdet(cov):
    sign, val = np.linalg.slogdet(cov)
    return val if sign > 0 else -np.inf


def _merge_cost(a, b):
    """Upper bound on the KL divergence introduced by merging ``a`` and ``b``."""
    merged = _merge_pair(a, b)
    ld_m, ld_a, ld_b = _logdet(merged.cov), _logdet(a.cov), _logdet(b.cov)
    if not (np.isfinite(ld_a) and np.isfinite(ld_b) and np.isfinite(ld_m)):
        d = a.mean - b.mean
        return a.weight * b.weight / max(merged.weight, 1e-300) * float(d @ d)
    return 0.5 * (merged.weight * ld_m - a.weight * ld_a - b.weight * ld_b)


def reduce_mixture(components, L):
    """Greedy pairwise moment-matching merge down to ``L`` components."""
    comps = list(components)
    if not comps:
        raise ValueError("reduce_mixture needs at least one component")
    if len(comps) <= L:
        return comps
    if L == 1:
        w, mean, cov = merge_moments([c.weight for c in comps], [c.mean for c in comps], [c.cov for c in comps])
        return [GaussianComponent._trusted(mean, cov, w)]
    while len(comps) > L:
        best = None
        for i in range(len(comps)):
            for j in range(i + 1, len(comps)):
                cost = _merge_cost(comps[i], comps[j])
                if best is None or cost < best[0]:
                    best = (cost, i, j)
        _, i, j = best
        merged = _merge_pair(comps[i], comps[j])
        comps = [c for k, c in enumerate(comps) if k not in (i, j)] + [merged]
    return comps
