"""Hybrid dynamics models and hybrid beliefs.

A hybrid model is a set of local continuous models, one per discrete mode,
tied together by a directed transition graph whose edges carry guard sets.
A mode's *region* is the guard of its self-loop. Beliefs pair a Gaussian
mixture over the continuous state with a categorical distribution over
modes.
"""

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidBelief,
    MissingMode,
    MissingSelfLoop,
    OutOfDomain,
    UncoveredDomain,
)
from .gaussian import is_psd, merge_moments, sample_gaussian, symmetrize

NORMALIZATION_TOL = 1e-9


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Regions


@dataclass(frozen=True, eq=False)
class Box:
    """Closed axis-aligned box; bounds may be infinite."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = _frozen(self.lo)
        hi = _frozen(self.hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionMismatch("box bounds must be 1-D arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("box has lo > hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return self.lo.size

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def is_finite(self):
        return bool(np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi)))

    def contains(self, points):
        pts = np.asarray(points, dtype=float)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)

    def interior_contains(self, points):
        pts = np.asarray(points, dtype=float)
        return np.all((pts > self.lo) & (pts < self.hi), axis=-1)

    def intersect(self, other):
        return Box(np.maximum(self.lo, other.lo), np.minimum(self.hi, other.hi))

    def clip(self, x):
        return np.clip(x, self.lo, self.hi)

    def sample(self, rng, n):
        if not self.is_finite:
            raise ValueError("cannot sample an unbounded box")
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.hi - self.lo))


@dataclass(frozen=True, eq=False)
class Complement:
    """Everything outside the interiors of ``boxes`` (which must not overlap)."""

    boxes: tuple

    def contains(self, points):
        pts = np.asarray(points, dtype=float)
        inside_any = np.zeros(pts.shape[:-1], dtype=bool)
        for box in self.boxes:
            inside_any |= box.interior_contains(pts)
        return ~inside_any


# ---------------------------------------------------------------------------
# Model types


@dataclass(frozen=True, eq=False)
class LocalModel:
    """Continuous dynamics and observation model of one discrete mode."""

    mode_id: int
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dynamics_jac_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dynamics_jac_u: Callable[[np.ndarray, np.ndarray], np.ndarray]
    observation: Callable[[np.ndarray], np.ndarray]
    observation_jac: Callable[[np.ndarray], np.ndarray]
    process_noise_cov: np.ndarray
    observation_noise_cov: np.ndarray
    name: str = ""

    def __post_init__(self):
        v = _frozen(self.process_noise_cov)
        r = _frozen(self.observation_noise_cov)
        if not is_psd(v):
            raise ValueError(f"mode {self.mode_id}: process noise covariance is not symmetric PSD")
        if not is_psd(r):
            raise ValueError(f"mode {self.mode_id}: observation noise covariance is not symmetric PSD")
        object.__setattr__(self, "process_noise_cov", v)
        object.__setattr__(self, "observation_noise_cov", r)

    @property
    def state_dim(self):
        return self.process_noise_cov.shape[0]

    @property
    def obs_dim(self):
        return self.observation_noise_cov.shape[0]

    @classmethod
    def affine(cls, mode_id, A, B, H, V, R, c=None, d=None, name=""):
        """``x' = A x + B u + c``, ``z = H x + d``."""
        A = _frozen(A)
        B = _frozen(B)
        H = _frozen(H)
        c = _frozen(np.zeros(A.shape[0]) if c is None else c)
        d = _frozen(np.zeros(H.shape[0]) if d is None else d)
        return cls(
            mode_id=mode_id,
            dynamics=lambda x, u: A @ x + B @ u + c,
            dynamics_jac_x=lambda x, u: A,
            dynamics_jac_u=lambda x, u: B,
            observation=lambda x: H @ x + d,
            observation_jac=lambda x: H,
            process_noise_cov=V,
            observation_noise_cov=R,
            name=name,
        )


@dataclass(frozen=True, eq=False)
class GuardSet:
    """Membership predicate plus a finite box used to sample the set.

    ``region`` is an optional exact description (``Box`` or ``Complement``)
    which enables closed-form Gaussian masses and conditioning.
    """

    membership: Callable[[np.ndarray], np.ndarray]
    bounding_region: Box
    region: object = None

    def contains(self, points):
        return np.asarray(self.membership(np.asarray(points, dtype=float)), dtype=bool)

    @classmethod
    def from_box(cls, box, domain_box):
        return cls(membership=box.contains, bounding_region=box.intersect(domain_box), region=box)

    @classmethod
    def from_complement(cls, boxes, domain_box):
        region = Complement(tuple(boxes))
        return cls(membership=region.contains, bounding_region=domain_box, region=region)


@dataclass(frozen=True, eq=False)
class TransitionGraph:
    modes: tuple
    edges: Mapping

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(int(q) for q in self.modes))
        object.__setattr__(self, "edges", dict(self.edges))

    def has_edge(self, q, q2):
        return (q, q2) in self.edges

    def guard(self, q, q2):
        return self.edges[(q, q2)]

    def successors(self, q):
        return [b for (a, b) in self.edges if a == q]


@dataclass(frozen=True, eq=False)
class HybridDynamicsModel:
    locals: tuple
    graph: TransitionGraph
    domain_box: Box
    control_bounds: Box
    state_dim: int
    control_dim: int
    obs_dim: int
    mode_names: tuple = ()

    @property
    def n_modes(self):
        return len(self.locals)

    def region(self, q):
        """Self-loop guard of mode ``q``."""
        return self.graph.guard(q, q)

    def name(self, q):
        return self.mode_names[q] if self.mode_names else str(q)

    def membership_matrix(self, points):
        """Boolean ``(N, |Q|)`` self-loop guard memberships."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.stack([self.region(q).contains(pts) for q in range(self.n_modes)], axis=1)

    def true_mode(self, x):
        """Mode that governs the point ``x``: lowest id among containing guards."""
        return int(np.argmax(mode_membership(self, x)))


def build_model(locals, graph, domain_box, bounds, *, mode_names=(), n_cover_samples=4000, seed=0):
    """Validate and assemble a :class:`HybridDynamicsModel`."""
    locals = tuple(locals)
    if not locals:
        raise DimensionMismatch("a hybrid model needs at least one local model")
    n = locals[0].state_dim
    l = locals[0].obs_dim
    m = bounds.dim
    if domain_box.dim != n:
        raise DimensionMismatch(f"domain box has dimension {domain_box.dim}, state has {n}")
    if not domain_box.is_finite:
        raise DimensionMismatch("domain box must be finite")
    for q, loc in enumerate(locals):
        if loc.mode_id != q:
            raise MissingMode(f"local model at index {q} has mode_id {loc.mode_id}")
        if loc.state_dim != n or loc.obs_dim != l:
            raise DimensionMismatch(f"mode {q} has inconsistent state/observation dimension")
        x0 = domain_box.center
        u0 = bounds.clip(np.zeros(m))
        if np.shape(loc.dynamics(x0, u0)) != (n,):
            raise DimensionMismatch(f"mode {q} dynamics do not return an {n}-vector")
        if np.shape(loc.dynamics_jac_x(x0, u0)) != (n, n) or np.shape(loc.dynamics_jac_u(x0, u0)) != (n, m):
            raise DimensionMismatch(f"mode {q} dynamics jacobians have wrong shape")
        if np.shape(loc.observation(x0)) != (l,) or np.shape(loc.observation_jac(x0)) != (l, n):
            raise DimensionMismatch(f"mode {q} observation model has wrong shape")
    modes = set(range(len(locals)))
    if set(graph.modes) != modes:
        raise MissingMode(f"graph modes {sorted(graph.modes)} do not match local models {sorted(modes)}")
    for (a, b) in graph.edges:
        if a not in modes or b not in modes:
            raise MissingMode(f"edge ({a}, {b}) references an unknown mode")
    for q in modes:
        if not graph.has_edge(q, q):
            raise MissingSelfLoop(f"mode {q} has no self-loop")
    model = HybridDynamicsModel(
        locals=locals,
        graph=graph,
        domain_box=domain_box,
        control_bounds=bounds,
        state_dim=n,
        control_dim=m,
        obs_dim=l,
        mode_names=tuple(mode_names),
    )
    rng = np.random.default_rng(seed)
    corners = np.array(np.meshgrid(*zip(domain_box.lo, domain_box.hi))).reshape(n, -1).T
    pts = np.vstack([domain_box.sample(rng, n_cover_samples), corners, domain_box.center[None]])
    covered = model.membership_matrix(pts).any(axis=1)
    if not covered.all():
        bad = pts[np.argmin(covered)]
        raise UncoveredDomain(f"point {bad} lies in no mode's self-loop guard")
    return model


def mode_membership(model, x):
    """Normalized self-loop guard indicators at the point ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.state_dim,):
        raise DimensionMismatch(f"expected a {model.state_dim}-vector")
    if not model.domain_box.contains(x):
        raise OutOfDomain(f"{x} is outside the domain box")
    ind = model.membership_matrix(x[None])[0].astype(float)
    total = ind.sum()
    if total == 0:
        raise UncoveredDomain(f"{x} lies in no mode's self-loop guard")
    return ind / total


# ---------------------------------------------------------------------------
# Beliefs


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    mean: np.ndarray
    cov: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        mean = _frozen(self.mean)
        cov = _frozen(self.cov)
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatch("covariance shape does not match the mean")
        if not np.all(np.isfinite(mean)):
            raise InvalidBelief("component mean is not finite")
        if not is_psd(cov):
            raise InvalidBelief("component covariance is not symmetric PSD")
        if not (self.weight >= 0.0) or not np.isfinite(self.weight):
            raise InvalidBelief("component weight must be finite and nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "weight", float(self.weight))

    @classmethod
    def _trusted(cls, mean, cov, weight):
        """Build without validation; for internally produced moments only."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "mean", mean)
        object.__setattr__(obj, "cov", cov)
        object.__setattr__(obj, "weight", float(weight))
        return obj

    def with_weight(self, weight):
        return GaussianComponent._trusted(self.mean, self.cov, weight)


@dataclass(frozen=True, eq=False)
class HybridBelief:
    continuous: tuple
    discrete: np.ndarray

    def __post_init__(self):
        comps = tuple(self.continuous)
        if not comps:
            raise InvalidBelief("belief needs at least one Gaussian component")
        w = np.array([c.weight for c in comps])
        if abs(w.sum() - 1.0) > NORMALIZATION_TOL:
            raise InvalidBelief(f"mixture weights sum to {w.sum()!r}")
        disc = _frozen(self.discrete)
        if disc.ndim != 1 or np.any(disc < 0) or not np.all(np.isfinite(disc)):
            raise InvalidBelief("discrete belief must be a nonnegative vector")
        if abs(disc.sum() - 1.0) > NORMALIZATION_TOL:
            raise InvalidBelief(f"discrete belief sums to {disc.sum()!r}")
        object.__setattr__(self, "continuous", comps)
        object.__setattr__(self, "discrete", disc)

    @classmethod
    def _trusted(cls, continuous, discrete):
        obj = object.__new__(cls)
        object.__setattr__(obj, "continuous", tuple(continuous))
        object.__setattr__(obj, "discrete", discrete)
        return obj

    @classmethod
    def gaussian(cls, mean, cov, discrete):
        return cls((GaussianComponent(mean, symmetrize(cov), 1.0),), discrete)

    @property
    def weights(self):
        return np.array([c.weight for c in self.continuous])

    @property
    def mean(self):
        return merge_moments(self.weights, [c.mean for c in self.continuous], [c.cov for c in self.continuous])[1]

    @property
    def cov(self):
        return merge_moments(self.weights, [c.mean for c in self.continuous], [c.cov for c in self.continuous])[2]

    @property
    def mle(self):
        """Mean of the component with the highest peak density."""
        if len(self.continuous) == 1:
            return self.continuous[0].mean
        peaks = [c.weight / np.sqrt(max(np.linalg.det(c.cov), 1e-300)) for c in self.continuous]
        return self.continuous[int(np.argmax(peaks))].mean

    def max_uncertainty(self):
        """Largest eigenvalue of the mixture covariance."""
        return float(np.linalg.eigvalsh(self.cov).max())

    def sample(self, rng, n):
        counts = rng.multinomial(n, self.weights / self.weights.sum())
        parts = [sample_gaussian(rng, c.mean, c.cov, k) for c, k in zip(self.continuous, counts)]
        return np.vstack(parts)


def normalized(p):
    p = np.clip(np.asarray(p, dtype=float), 0.0, None)
    return p / p.sum()


def most_likely_mode(belief):
    """Argmax of the discrete belief; ties go to the lowest mode id."""
    return int(np.argmax(belief.discrete))


@dataclass(frozen=True, eq=False)
class GoalRegion:
    """Ball of radius ``radius`` around the task goal ``center``."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("goal radius must be positive")
        object.__setattr__(self, "center", _frozen(self.center))

    def contains(self, points):
        pts = np.asarray(points, dtype=float)
        return np.linalg.norm(pts - self.center, axis=-1) <= self.radius
