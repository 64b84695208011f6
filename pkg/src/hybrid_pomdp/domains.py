"""Built-in benchmark domains and their ground-truth simulators."""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .config import CostWeights, DirectConfig, HierarchicalConfig
from .gaussian import sample_gaussian
from .hybrid_filter import FilterConfig, region_probabilities
from .hybrid_model import (
    Box,
    GaussianComponent,
    GoalRegion,
    GuardSet,
    HybridBelief,
    LocalModel,
    TransitionGraph,
    build_model,
)

INF = np.inf
# Temperature of the softplus that lets a released axis leave its wall.
RELEASE_SMOOTHING = 0.05


@dataclass(frozen=True, eq=False)
class DomainSpec:
    name: str
    model: object
    start_true_state: np.ndarray
    start_belief: HybridBelief
    goal_region: GoalRegion
    termination_cov_bound: float
    horizon: int
    costs: CostWeights
    filter: FilterConfig
    direct: DirectConfig
    hierarchical: HierarchicalConfig
    process_noise: np.ndarray
    obs_noise: np.ndarray
    max_steps: int = 80


class Simulator:
    """Hidden true state evolved with the model's exact mode and sampled noise.

    The true noise covariances may differ from the ones the model assumes.
    """

    def __init__(self, model, true_state, process_noise, obs_noise, seed=0):
        self.model = model
        self.true_state = model.domain_box.clip(np.asarray(true_state, dtype=float))
        self.process_noise = np.asarray(process_noise, dtype=float)
        self.obs_noise = np.asarray(obs_noise, dtype=float)
        self.rng = np.random.default_rng(seed)
        self.mode = model.true_mode(self.true_state)

    def observe(self):
        loc = self.model.locals[self.model.true_mode(self.true_state)]
        w = sample_gaussian(self.rng, np.zeros(self.model.obs_dim), self.obs_noise, 1)[0]
        return loc.observation(self.true_state) + w


def simulate_step(sim, u):
    """Advance the true state one step under ``u``; return the new observation."""
    model = sim.model
    u = model.control_bounds.clip(np.asarray(u, dtype=float))
    mode = model.true_mode(sim.true_state)
    loc = model.locals[mode]
    v = sample_gaussian(sim.rng, np.zeros(model.state_dim), sim.process_noise, 1)[0]
    sim.true_state = model.domain_box.clip(loc.dynamics(sim.true_state, u) + v)
    sim.mode = model.true_mode(sim.true_state)
    return sim.observe()


def _masked_local(mode_id, mask, release, V, R, name, smoothing=RELEASE_SMOOTHING):
    """``x' = x + g(u)`` where blocked axes only pass control pointing along ``release``.

    ``mask[i] == 0`` blocks axis ``i``. ``release[i]`` in {-1, 0, +1} is the
    direction in which the blocked axis still moves (0 keeps it blocked).
    The one-sided pass-through is a softplus with temperature ``smoothing``
    so that the belief dynamics stay differentiable at ``u = 0``.
    """
    mask = np.asarray(mask, dtype=float)
    release = np.asarray(release, dtype=float)
    opened = (mask == 0) & (release != 0)
    tau = float(smoothing)

    def effective(u):
        u = np.asarray(u, dtype=float)
        out = mask * u
        if opened.any():
            v = release[opened] * u[opened]
            out[opened] = release[opened] * tau * np.logaddexp(0.0, v / tau)
        return out

    def slope(u):
        u = np.asarray(u, dtype=float)
        g = mask.copy()
        if opened.any():
            g[opened] = expit(release[opened] * u[opened] / tau)
        return np.diag(g)

    n = mask.size
    return LocalModel(
        mode_id=mode_id,
        dynamics=lambda x, u: np.asarray(x, dtype=float) + effective(u),
        dynamics_jac_x=lambda x, u: np.eye(n),
        dynamics_jac_u=lambda x, u: slope(u),
        observation=lambda x: np.asarray(x, dtype=float).copy(),
        observation_jac=lambda x: np.eye(n),
        process_noise_cov=V,
        observation_noise_cov=R,
        name=name,
    )


def _full_graph(regions, domain_box):
    guards = [GuardSet.from_box(r, domain_box) if isinstance(r, Box) else r for r in regions]
    modes = range(len(guards))
    return TransitionGraph(tuple(modes), {(i, j): guards[j] for i in modes for j in modes})


def _start_belief(model, mean, cov):
    comp = GaussianComponent(mean, cov, 1.0)
    probs = region_probabilities(model, [comp])
    return HybridBelief((comp,), probs / probs.sum())


def walled_domain(*, contact="release", obs_noise_is_variance=True, obs_noise=15.0):
    """Navigation with two perpendicular walls (free, wallX at x<=-2, wallY at y<=-2).

    ``contact="sticky"`` is the literal wall model in which the blocked
    coordinate can never change; ``"release"`` lets the robot pull away
    from a wall.
    """
    if contact not in ("release", "sticky"):
        raise ValueError(f"unknown contact model {contact!r}")
    rel = 1.0 if contact == "release" else 0.0
    obs_var = obs_noise if obs_noise_is_variance else obs_noise ** 2
    V = np.zeros((2, 2))
    R = obs_var * np.eye(2)
    domain = Box([-6.0, -6.0], [15.0, 15.0])
    regions = [
        Box([-2.0, -2.0], [INF, INF]),
        Box([-INF, -INF], [-2.0, INF]),
        Box([-2.0, -INF], [INF, -2.0]),
    ]
    locals_ = [
        _masked_local(0, [1, 1], [0, 0], V, R, "free"),
        _masked_local(1, [0, 1], [rel, 0], V, R, "wallX"),
        _masked_local(2, [1, 0], [0, rel], V, R, "wallY"),
    ]
    model = build_model(locals_, _full_graph(regions, domain), domain, Box([-3.0, -3.0], [3.0, 3.0]),
                        mode_names=("free", "wallX", "wallY"))
    return DomainSpec(
        name="walled",
        model=model,
        start_true_state=np.array([3.5, 2.0]),
        start_belief=_start_belief(model, [5.0, 5.0], np.diag([11.5, 11.5])),
        goal_region=GoalRegion([0.0, 0.0], 0.2),
        termination_cov_bound=1.0,
        horizon=20,
        costs=CostWeights(Q=np.diag([0.5, 0.5]), R=np.diag([10.0, 10.0]), Q_T=1e4, Lambda=1e7),
        filter=FilterConfig(mixture_size=1),
        direct=DirectConfig(n_segments=5),
        hierarchical=HierarchicalConfig(),
        process_noise=V,
        obs_noise=R,
        max_steps=80,
    )


def assembly_domain():
    """Planar peg-to-hole sub-problem next to a wing corner (units: cm)."""
    V = np.eye(2)
    R = 2.0 * np.eye(2)
    domain = Box([0.0, -18.0], [10.0, -8.0])
    edge_y = Box([4.0, -13.5], [4.5, INF])
    edge_x = Box([-INF, -14.0], [4.0, -13.0])
    corner = Box([4.0, -14.0], [4.5, -13.5])
    free = GuardSet.from_complement([edge_y, edge_x, corner], domain)
    regions = [free, edge_y, edge_x, corner]
    locals_ = [
        _masked_local(0, [1, 1], [0, 0], V, R, "free"),
        _masked_local(1, [0, 1], [0, 0], V, R, "edgeY"),
        _masked_local(2, [1, 0], [0, 0], V, R, "edgeX"),
        _masked_local(3, [0, 0], [0, 0], V, R, "corner"),
    ]
    model = build_model(locals_, _full_graph(regions, domain), domain, Box([-2.0, -2.0], [2.0, 2.0]),
                        mode_names=("free", "edgeY", "edgeX", "corner"))
    return DomainSpec(
        name="assembly",
        model=model,
        start_true_state=np.array([6.0, -11.0]),
        start_belief=_start_belief(model, [7.0, -10.0], np.diag([4.0, 4.0])),
        goal_region=GoalRegion([4.25, -13.75], 0.2),
        termination_cov_bound=0.5,
        horizon=20,
        costs=CostWeights(Q=np.diag([0.5, 0.5]), R=np.diag([0.1, 0.1]), Q_T=5000.0, Lambda=1e7),
        filter=FilterConfig(mixture_size=1),
        direct=DirectConfig(n_segments=5),
        # Four modes give 65 orderings; plans visit at most one mode before the goal.
        hierarchical=HierarchicalConfig(max_plan_length=1),
        process_noise=V,
        obs_noise=R,
        max_steps=60,
    )


DOMAINS = {"walled": walled_domain, "assembly": assembly_domain}


def get_domain(name, **kwargs):
    try:
        factory = DOMAINS[name]
    except KeyError:
        raise KeyError(f"unknown domain {name!r}; choose from {sorted(DOMAINS)}") from None
    return factory(**kwargs)


def make_simulator(spec, seed):
    return Simulator(spec.model, spec.start_true_state, spec.process_noise, spec.obs_noise, seed=seed)
