"""Two-level planning over mode sequences.

The upper level enumerates orderings of the discrete modes, turns each
ordering into continuous subgoals and scores the resulting final belief by
how confidently it sits inside the goal neighbourhood. The lower level is
the direct planner, run once per subgoal with beliefs chained from one
subgoal to the next.

Subgoals come from per-mode cost maps. Each sample point of the domain gets
a confidence vector (the fraction of a small neighbourhood lying in each
mode), its Hellinger distance to full confidence in the target mode is
interpolated with radial basis functions, and the interpolant is minimized
by differential evolution.
"""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import differential_evolution

from . import kernels
from .config import DirectConfig, HierarchicalConfig
from .direct_planner import (
    BeliefTrajectory,
    NlpReport,
    TranscriptionProblem,
    rollout_trajectory,
    solve_nlp,
)
from .errors import DimensionMismatch, EmptyGuardRegion, HybridPlanningError, NoFeasiblePlan
from .hybrid_model import GoalRegion  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

_REGION_SAMPLE_BUDGET = 200


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class HighLevelPlan:
    """Mode sequence ending in the goal pseudo-mode ``goal_mode``."""

    sequence: tuple
    goal_mode: int
    divergence_cost: float = float("nan")
    path_length_penalty: float = 0.0

    @property
    def modes(self):
        return self.sequence[:-1]

    @property
    def cost(self):
        return self.divergence_cost + self.path_length_penalty

    def describe(self, model=None):
        names = [model.name(q) if model is not None else str(q) for q in self.modes]
        return " -> ".join(names + ["G"])


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    """Sampled confidences and costs of one mode plus their RBF interpolant."""

    mode: int
    samples: np.ndarray
    confidences: np.ndarray
    costs: np.ndarray
    weights: np.ndarray
    offset: float
    shape: float
    domain_box: object

    def __call__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return kernels.multiquadric_eval(pts, self.samples, self.weights, 1.0 / self.shape) + self.offset


# ---------------------------------------------------------------------------
# Metrics and enumeration


def hellinger(p, q):
    """Hellinger distance ``||sqrt(p) - sqrt(q)|| / sqrt(2)`` in ``[0, 1]``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise DimensionMismatch("hellinger needs two probability vectors of equal length")
    d = np.sqrt(np.clip(p, 0.0, None)) - np.sqrt(np.clip(q, 0.0, None))
    return float(min(1.0, np.sqrt(0.5 * float(d @ d))))


def sample_region(model, q, n, rng, budget=_REGION_SAMPLE_BUDGET):
    """``n`` uniform samples from mode ``q``'s region by rejection."""
    guard = model.region(q)
    box = guard.bounding_region.intersect(model.domain_box)
    found = []
    total = 0
    for _ in range(budget):
        pts = box.sample(rng, max(n, 256))
        pts = pts[guard.contains(pts)]
        found.append(pts)
        total += len(pts)
        if total >= n:
            return np.vstack(found)[:n]
    raise EmptyGuardRegion(f"no samples of mode {q} found in its bounding box")


def feasible_transition(model, q, q2, config=HierarchicalConfig(), rng=None):
    """True unless the regions of ``q`` and ``q2`` are positively separated."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    a = sample_region(model, q, config.sep_samples, rng)
    b = sample_region(model, q2, config.sep_samples, rng)
    touch = config.touch_frac * model.domain_box.diagonal
    return kernels.min_cross_distance(a, b) <= touch


def enumerate_plans(model, goal_mode=None, config=HierarchicalConfig(), feasible=None):
    """All repetition-free mode orderings, each followed by the goal pseudo-mode.

    ``feasible(q, q2)`` decides consecutive pairs; by default the sampled
    separation test. ``config.max_plan_length`` (if positive) caps the number
    of non-goal modes.
    """
    goal_mode = model.n_modes if goal_mode is None else goal_mode
    modes = [q for q in range(model.n_modes) if q != goal_mode]
    if feasible is None:
        cache = {}

        def feasible(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                cache[key] = feasible_transition(model, a, b, config)
            return cache[key]

    limit = len(modes) if config.max_plan_length <= 0 else min(len(modes), config.max_plan_length)
    plans = []
    for k in range(limit + 1):
        for seq in itertools.permutations(modes, k):
            if all(feasible(a, b) for a, b in zip(seq, seq[1:])):
                plans.append(HighLevelPlan(tuple(seq) + (goal_mode,), goal_mode))
    return plans


# ---------------------------------------------------------------------------
# Confidence maps


def _ball_offsets(rng, n, dim, radius):
    d = rng.standard_normal((n, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / dim)
    return d * r


def confidence_vectors(model, points, config=HierarchicalConfig(), rng=None):
    """Fraction of each point's neighbourhood belonging to each mode."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    points = np.atleast_2d(np.asarray(points, dtype=float))
    radius = config.conf_radius_frac * model.domain_box.diagonal
    offsets = _ball_offsets(rng, config.n_inner_samples, model.state_dim, radius)
    inner = (points[:, None, :] + offsets[None, :, :]).reshape(-1, model.state_dim)
    member = model.membership_matrix(inner).astype(float)
    # Neighbours outside the domain do not count.
    member[~model.domain_box.contains(inner)] = 0.0
    counts = member.sum(axis=1, keepdims=True)
    member = member / np.where(counts > 0, counts, 1.0)
    conf = member.reshape(len(points), config.n_inner_samples, model.n_modes).sum(axis=1)
    totals = conf.sum(axis=1, keepdims=True)
    return conf / np.where(totals > 0, totals, 1.0)


def _fit_rbf(points, values, shape=None):
    """Multiquadric ``sqrt(1 + (shape * r)^2)`` interpolant plus a constant.

    ``shape`` defaults to the median pairwise sample distance. Up to a factor
    absorbed in the weights the kernel is ``sqrt(r^2 + c^2)`` with
    ``c = 1 / shape``, which is what the compiled kernel evaluates.
    """
    n = len(points)
    if shape is None:
        diff = points[:, None, :] - points[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=-1))
        shape = float(np.median(dist[np.triu_indices(n, 1)])) if n > 1 else 1.0
    c = 1.0 / shape
    system = np.zeros((n + 1, n + 1))
    system[:n, :n] = kernels.multiquadric_matrix(points, points, c)
    system[:n, n] = 1.0
    system[n, :n] = 1.0
    rhs = np.concatenate([values, [0.0]])
    sol = np.linalg.solve(system, rhs)
    return sol[:n], float(sol[n]), shape


def build_confidence_map(model, mode_k, config=HierarchicalConfig(), rng=None):
    """Sample the domain, score each point against full confidence in ``mode_k``
    and interpolate the costs."""
    if not 0 <= mode_k < model.n_modes:
        raise ValueError(f"unknown mode {mode_k}")
    rng = np.random.default_rng([config.seed, mode_k]) if rng is None else rng
    pts = model.domain_box.sample(rng, config.n_map_samples)
    conf = confidence_vectors(model, pts, config, rng)
    target = np.zeros(model.n_modes)
    target[mode_k] = 1.0
    costs = np.array([hellinger(w, target) for w in conf])
    weights, offset, shape = _fit_rbf(pts, costs)
    return ConfidenceMap(mode_k, pts, conf, costs, weights, offset, shape, model.domain_box)


def best_representative_point(cmap, config=HierarchicalConfig(), anchor=None, anchor_weight=None):
    """Differential-evolution minimizer of the interpolated cost map.

    With ``anchor`` the objective adds ``anchor_weight * |x - anchor| / diag``,
    which picks the nearest of several equally good points.
    """
    box = cmap.domain_box
    diag = box.diagonal
    w = config.anchor_weight if anchor_weight is None else anchor_weight
    anchor = None if anchor is None else np.asarray(anchor, dtype=float)

    def cost(x):
        pts = np.atleast_2d(np.asarray(x).T)
        val = cmap(pts)
        if anchor is not None and w > 0:
            val = val + w * np.linalg.norm(pts - anchor, axis=1) / diag
        return val

    state = {"best": np.inf, "since": 0}

    def stagnation(intermediate_result):
        fun = float(intermediate_result.fun)
        if fun < state["best"] - 1e-12:
            state["best"], state["since"] = fun, 0
        else:
            state["since"] += 1
        return state["since"] >= config.de_stagnation

    res = differential_evolution(
        cost,
        bounds=list(zip(box.lo, box.hi)),
        strategy="rand1bin",
        popsize=config.de_population_factor,
        mutation=config.de_F,
        recombination=config.de_CR,
        maxiter=config.de_generations,
        tol=0.0,
        atol=0.0,
        polish=False,
        init="latinhypercube",
        rng=np.random.default_rng([config.seed, cmap.mode, 7]),
        updating="deferred",
        vectorized=True,
        callback=stagnation,
    )
    return np.asarray(res.x, dtype=float)


class _MapCache:
    """Per-mode confidence maps and anchored subgoals, built on first use."""

    def __init__(self, model, config):
        self.model = model
        self.config = config
        self.maps = {}
        self.points = {}

    def map(self, q):
        if q not in self.maps:
            self.maps[q] = build_confidence_map(self.model, q, self.config)
        return self.maps[q]

    def subgoal(self, q, anchor):
        key = (q, None if anchor is None else tuple(np.round(anchor, 9)))
        if key not in self.points:
            self.points[key] = best_representative_point(self.map(q), self.config, anchor=anchor)
        return self.points[key]


def plan_to_goals(model, plan, goal_region, config=HierarchicalConfig(), start=None, cache=None):
    """Continuous subgoals for each non-goal mode of ``plan``, then the goal center.

    ``start`` (the start belief mean) anchors the first subgoal; later
    subgoals are anchored at their predecessor.
    """
    cache = _MapCache(model, config) if cache is None else cache
    goals = []
    anchor = None if start is None else np.asarray(start, dtype=float)
    for q in plan.modes:
        point = cache.subgoal(q, anchor)
        goals.append(point)
        anchor = point
    goals.append(np.asarray(goal_region.center, dtype=float))
    return goals


# ---------------------------------------------------------------------------
# Ranking


def final_confidence(model, belief, goal_region, n_samples, rng):
    """Sampled distribution over modes plus the goal pseudo-mode (last entry)."""
    pts = belief.sample(rng, n_samples)
    in_goal = goal_region.contains(pts)
    member = model.membership_matrix(model.domain_box.clip(pts)).astype(float)
    counts = member.sum(axis=1, keepdims=True)
    member = member / np.where(counts > 0, counts, 1.0)
    p = np.zeros(model.n_modes + 1)
    p[:-1] = member[~in_goal].sum(axis=0)
    p[-1] = in_goal.sum()
    return p / n_samples


def plan_cost(model, plan, belief, goal_region, config=HierarchicalConfig()):
    """``(divergence, penalty)`` of a plan whose lower level ends in ``belief``."""
    rng = np.random.default_rng([config.seed, 11])
    p = final_confidence(model, belief, goal_region, config.n_final_samples, rng)
    target = np.zeros(model.n_modes + 1)
    target[-1] = 1.0
    return hellinger(p, target), config.path_penalty * len(plan.modes)


def _n_segments(h, target_delta):
    """Divisor of ``h`` whose segment length is closest to ``target_delta``."""
    divisors = [m for m in range(1, h + 1) if h % m == 0]
    return min(divisors, key=lambda m: (abs(h / m - target_delta), m))


@dataclass
class _Candidate:
    plan: HighLevelPlan
    subgoals: list
    trajectory: BeliefTrajectory = None
    parts: list = field(default_factory=list)
    solves: int = 0
    failed: bool = False


def _stitch(parts):
    knots = []
    dense = [parts[0].dense_beliefs[0]]
    controls = []
    for part in parts:
        knots.extend(part.knots[:-1])
        dense.extend(part.dense_beliefs[1:])
        controls.append(part.dense_controls)
    knots.append(parts[-1].knots[-1])
    reports = [p.report for p in parts if p.report is not None]
    report = None
    if reports:
        report = NlpReport(
            converged=all(r.converged for r in reports),
            iterations=sum(r.iterations for r in reports),
            kkt_norm=max(r.kkt_norm for r in reports),
            constraint_residual=max(r.constraint_residual for r in reports),
            status="converged" if all(r.converged for r in reports) else "partial",
        )
    return BeliefTrajectory(
        tuple(knots),
        tuple(dense),
        np.vstack(controls),
        float(sum(p.objective_value for p in parts)),
        report,
        parts[-1].problem,
    )


def _run_candidate(model, cand, start_belief, horizon, costs, config, direct, solve):
    """Chain lower-level problems through the candidate's subgoals."""
    n = len(cand.subgoals)
    h = max(config.min_segment_steps, horizon // n)
    target_delta = max(1.0, horizon / direct.n_segments)
    belief = start_belief
    parts = []
    for i, goal in enumerate(cand.subgoals):
        problem = TranscriptionProblem(
            model=model,
            start_belief=belief,
            goal_state=goal,
            horizon=h,
            n_segments=_n_segments(h, target_delta),
            costs=costs,
            filter=direct.filter,
            terminal_constraint=i == n - 1,
        )
        if solve:
            traj, _ = solve_nlp(problem, None, direct)
            cand.solves += 1
        else:
            traj = rollout_trajectory(problem)
        parts.append(traj)
        belief = traj.final_belief
    return parts


def rank_and_plan(model, start_belief, goal_region, horizon, costs, config=HierarchicalConfig(),
                  direct=DirectConfig(), plans=None, cache=None):
    """Pick the best high-level plan and return its stitched trajectory.

    Every candidate is solved and scored by the divergence of its final
    belief. With an integer ``config.screen_top_k`` the candidates are first
    ranked by rollouts of their warm starts and only the best k are solved.
    Ties break on the lexicographic mode sequence.
    """
    cache = _MapCache(model, config) if cache is None else cache
    if plans is None:
        plans = enumerate_plans(model, config=config)
    if not plans:
        raise NoFeasiblePlan("no candidate high-level plans")
    start_mean = start_belief.mean

    scored = []
    for plan in plans:
        cand = _Candidate(plan, plan_to_goals(model, plan, goal_region, config, start_mean, cache))
        screen_cost = float("nan")
        if config.screen_top_k is not None:
            parts = _run_candidate(model, cand, start_belief, horizon, costs, config, direct, solve=False)
            div, pen = plan_cost(model, plan, parts[-1].final_belief, goal_region, config)
            screen_cost = div + pen
        scored.append(((screen_cost, plan.sequence), cand))
    top = scored
    if config.screen_top_k is not None:
        scored.sort(key=lambda item: item[0])
        top = scored[: max(1, int(config.screen_top_k))]

    best = None
    for (screen_cost, _), cand in top:
        try:
            parts = _run_candidate(model, cand, start_belief, horizon, costs, config, direct, solve=True)
        except HybridPlanningError as exc:
            log.info("plan %s failed: %s", cand.plan.describe(model), exc)
            cand.failed = True
            continue
        div, pen = plan_cost(model, cand.plan, parts[-1].final_belief, goal_region, config)
        plan = HighLevelPlan(cand.plan.sequence, cand.plan.goal_mode, div, pen)
        traj = _stitch(parts)
        log.debug("plan %s screened %.4f solved %.4f", plan.describe(model), screen_cost, plan.cost)
        key = (plan.cost, plan.sequence)
        if best is None or key < best[0]:
            best = (key, traj, plan)
    if best is None:
        raise NoFeasiblePlan("every candidate's lower-level solve failed")
    return best[1], best[2]
