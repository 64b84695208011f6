"""Belief-space LQR tracking of a nominal plan and the closed execution loop.

The controller regulates the belief mean towards the nominal means with a
finite-horizon Riccati recursion on the dynamics of the most likely mode at
each nominal point. Covariance errors get zero gain. The loop replans when
the belief strays too far from the plan or when the plan runs out.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .domains import simulate_step
from .errors import HybridPlanningError, SingularRiccati
from .gaussian import symmetrize
from .hierarchical_planner import hellinger
from .hybrid_filter import FilterConfig, filter_step
from .hybrid_model import most_likely_mode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReplanPolicy:
    """Replan when Hellinger(discrete) + Mahalanobis(mean) exceeds ``delta_threshold``."""

    delta_threshold: float = 3.0

    def __post_init__(self):
        if not self.delta_threshold > 0:
            raise ValueError("delta_threshold must be positive")


@dataclass(frozen=True, eq=False)
class BlqrController:
    """Time-varying mean-feedback gains around a nominal belief trajectory.

    ``gains[t]`` maps the mean error at step ``t`` to a control correction;
    ``values[t]`` are the Riccati cost-to-go matrices (``values[horizon]`` is
    the terminal one).
    """

    nominal: object
    gains: tuple
    values: tuple
    Q_track: np.ndarray
    R_track: np.ndarray

    def __post_init__(self):
        if len(self.gains) != self.horizon:
            raise ValueError("one gain per nominal step is required")
        if not all(np.all(np.isfinite(K)) for K in self.gains):
            raise SingularRiccati("non-finite feedback gains")

    @property
    def horizon(self):
        return len(self.nominal.dense_controls)


def riccati_gains(A_seq, B_seq, Q, R, Q_final=None):
    """Backward pass for ``x' = A_t x + B_t u`` with stage cost ``x'Qx + u'Ru``.

    Returns ``(gains, values)`` where ``u_t = -gains[t] x_t`` and
    ``values`` has one more entry than ``gains``.
    """
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    P = Q.copy() if Q_final is None else np.asarray(Q_final, dtype=float)
    values = [P]
    gains = []
    for A, B in zip(reversed(A_seq), reversed(B_seq)):
        S = R + B.T @ P @ B
        if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e12:
            raise SingularRiccati("control Hessian of the Riccati step is singular")
        K = np.linalg.solve(S, B.T @ P @ A)
        P = symmetrize(Q + A.T @ P @ (A - B @ K))
        gains.append(K)
        values.append(P)
    return gains[::-1], values[::-1]


def build_blqr(model, nominal, Q_track, R_track):
    """Linearize the most likely mode along ``nominal`` and solve for the gains."""
    beliefs = nominal.dense_beliefs
    controls = nominal.dense_controls
    A_seq, B_seq = [], []
    for b, u in zip(beliefs[:-1], controls):
        loc = model.locals[most_likely_mode(b)]
        A_seq.append(np.asarray(loc.dynamics_jac_x(b.mean, u), dtype=float))
        B_seq.append(np.asarray(loc.dynamics_jac_u(b.mean, u), dtype=float))
    gains, values = riccati_gains(A_seq, B_seq, Q_track, R_track)
    return BlqrController(nominal, tuple(gains), tuple(values), np.asarray(Q_track, float),
                          np.asarray(R_track, float))


def control(controller, actual_belief, t, bounds=None):
    """``u_nom(t) - K(t) (mu - mu_nom(t))``, clipped to ``bounds`` when given."""
    if not 0 <= t < controller.horizon:
        raise IndexError(f"step {t} outside the controller horizon {controller.horizon}")
    nominal = controller.nominal
    err = actual_belief.mean - nominal.dense_beliefs[t].mean
    u = nominal.dense_controls[t] - controller.gains[t] @ err
    return u if bounds is None else bounds.clip(u)


def belief_deviation(planned, actual):
    """Hellinger distance of the discrete parts plus the Mahalanobis distance
    of the actual mean under the planned Gaussian."""
    diff = actual.mean - planned.mean
    cov = planned.cov
    try:
        maha = float(np.sqrt(max(diff @ np.linalg.solve(cov, diff), 0.0)))
    except np.linalg.LinAlgError:
        maha = np.inf
    return hellinger(planned.discrete, actual.discrete) + maha


def check_replan(policy, planned_belief, actual_belief):
    return belief_deviation(planned_belief, actual_belief) > policy.delta_threshold


@dataclass
class ExperimentRecord:
    """Everything observed during one closed-loop run.

    Row ``t`` of the belief and state arrays is the situation after ``t``
    controls; ``controls[t]`` and ``observations[t]`` produced row ``t+1``.
    """

    goal: np.ndarray
    true_states: list = field(default_factory=list)
    means: list = field(default_factory=list)
    covs: list = field(default_factory=list)
    discretes: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    replan_steps: list = field(default_factory=list)
    plans: list = field(default_factory=list)
    planning_time: float = 0.0
    final_mle: np.ndarray = None
    success: bool = False
    failure: str = None
    seed: int = None

    def log_belief(self, true_state, belief):
        self.true_states.append(np.array(true_state, dtype=float))
        self.means.append(np.array(belief.mean))
        self.covs.append(np.array(belief.cov))
        self.discretes.append(np.array(belief.discrete))
        self.final_mle = np.array(belief.mle)

    @property
    def steps(self):
        return len(self.controls)

    @property
    def final_error(self):
        return self.final_mle - self.goal

    @property
    def final_max_cov(self):
        return float(np.linalg.eigvalsh(self.covs[-1]).max())

    @property
    def n_replans(self):
        return len(self.replan_steps)


def execute(model, simulator, planner, policy, start_belief, goal_region, max_steps,
            cov_bound=1.0, Q_track=None, R_track=None, filter_config=FilterConfig(), rng=None):
    """Run the closed loop until the goal test passes or ``max_steps`` run out.

    ``planner(belief)`` returns a nominal trajectory and, optionally, a
    description of the plan as ``(trajectory, label)``. Only the time spent
    inside ``planner`` is counted as planning time. Planner errors end the
    run and are stored in ``record.failure``.
    """
    n, m = model.state_dim, model.control_dim
    Q_track = np.eye(n) if Q_track is None else Q_track
    R_track = np.eye(m) if R_track is None else R_track
    rng = np.random.default_rng(0) if rng is None else rng
    record = ExperimentRecord(goal=np.array(goal_region.center))
    belief = start_belief
    record.log_belief(simulator.true_state, belief)

    def done(b):
        return bool(goal_region.contains(b.mle)) and b.max_uncertainty() <= cov_bound

    def replan(b):
        t0 = time.perf_counter()
        out = planner(b)
        record.planning_time += time.perf_counter() - t0
        traj, label = out if isinstance(out, tuple) else (out, "")
        record.plans.append(label)
        return build_blqr(model, traj, Q_track, R_track)

    try:
        ctrl = replan(belief)
        k = 0
        while not done(belief):
            if record.steps >= max_steps:
                record.failure = "max_steps"
                break
            if k >= ctrl.horizon:
                record.replan_steps.append(record.steps)
                ctrl, k = replan(belief), 0
            u = control(ctrl, belief, k, model.control_bounds)
            z = simulate_step(simulator, u)
            belief = filter_step(model, belief, u, z, filter_config, rng)
            record.controls.append(u)
            record.observations.append(z)
            record.log_belief(simulator.true_state, belief)
            k += 1
            if done(belief):
                break
            if check_replan(policy, ctrl.nominal.dense_beliefs[k], belief):
                log.debug("step %d: belief left the plan, replanning", record.steps)
                record.replan_steps.append(record.steps)
                ctrl, k = replan(belief), 0
    except HybridPlanningError as exc:
        record.failure = f"planner: {exc}"
    record.success = record.failure is None and done(belief)
    return record
