import numpy as np
import pytest

from hybrid_pomdp.config import CostWeights, DirectConfig
from hybrid_pomdp.direct_planner import TranscriptionProblem, plan_direct, rollout_trajectory
from hybrid_pomdp.domains import Simulator
from hybrid_pomdp.errors import NoFeasiblePlan, SingularRiccati
from hybrid_pomdp.hybrid_model import GoalRegion, HybridBelief
from hybrid_pomdp.stabilizer import (
    ReplanPolicy,
    belief_deviation,
    build_blqr,
    check_replan,
    control,
    execute,
    riccati_gains,
)

from helpers import linear_model

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _scalar(T):
    return [np.eye(1)] * T, [np.eye(1)] * T


def _stationary_gain(q=1.0, r=1.0, iters=10_000):
    """Fixed-point iteration of the scalar Riccati map for x' = x + u."""
    p = q
    for _ in range(iters):
        p = q + p - p * p / (r + p)
    return p / (r + p)


def _nominal(n=2, T=6, x0=(0.0, 0.0), goal=(3.0, -1.5)):
    model = linear_model(n=n, V=0.0, R=0.5, bounds=1.0)
    start = HybridBelief.gaussian(np.array(x0, dtype=float), np.eye(n), np.array([1.0]))
    costs = CostWeights(Q=np.eye(n), R=np.eye(n), Q_T=10.0, Lambda=0.0)
    problem = TranscriptionProblem(model, start, np.array(goal, dtype=float), T, T, costs)
    return model, rollout_trajectory(problem)


# ---------------------------------------------------------------------------
# Riccati


def test_stationary_gain_is_golden_ratio():
    gains, _ = riccati_gains(*_scalar(200), np.eye(1), np.eye(1))
    assert _stationary_gain() == pytest.approx(GOLDEN, abs=1e-12)
    assert gains[0][0, 0] == pytest.approx(GOLDEN, abs=1e-3)


def test_zero_state_cost_gives_zero_gains():
    gains, _ = riccati_gains(*_scalar(20), np.zeros((1, 1)), np.eye(1))
    assert all(np.all(K == 0.0) for K in gains)


def test_gains_converge_backwards_in_time():
    T = 120
    gains, _ = riccati_gains(*_scalar(T), np.eye(1), np.eye(1))
    k = np.array([K[0, 0] for K in gains])[::-1]  # k[j]: j steps before the end
    diff = np.abs(k - _stationary_gain())
    assert np.all(np.diff(diff) <= 0.0)
    assert diff[50] < 1e-6


def test_value_matrices_are_symmetric_psd():
    rng = np.random.default_rng(2)
    A = [np.eye(3) + 0.1 * rng.standard_normal((3, 3)) for _ in range(30)]
    B = [rng.standard_normal((3, 2)) for _ in range(30)]
    _, values = riccati_gains(A, B, np.diag([1.0, 0.5, 2.0]), 0.1 * np.eye(2))
    assert len(values) == 31
    for P in values:
        np.testing.assert_allclose(P, P.T, atol=1e-12)
        assert np.linalg.eigvalsh(P).min() >= -1e-10


def test_singular_control_hessian_raises():
    with pytest.raises(SingularRiccati):
        riccati_gains([np.eye(1)], [np.zeros((1, 1))], np.eye(1), np.zeros((1, 1)))


def test_blqr_has_one_gain_per_step():
    model, nominal = _nominal()
    ctrl = build_blqr(model, nominal, np.eye(2), np.eye(2))
    assert ctrl.horizon == len(ctrl.gains) == nominal.horizon
    assert all(np.all(np.isfinite(K)) for K in ctrl.gains)


# ---------------------------------------------------------------------------
# control


def test_control_zero_error_returns_nominal():
    model, nominal = _nominal()
    ctrl = build_blqr(model, nominal, np.eye(2), np.eye(2))
    for t in range(ctrl.horizon):
        np.testing.assert_array_equal(control(ctrl, nominal.dense_beliefs[t], t), nominal.dense_controls[t])


def test_control_is_linear_feedback():
    model, nominal = _nominal()
    ctrl = build_blqr(model, nominal, np.eye(2), np.eye(2))
    t, e = 2, 0.1
    b = nominal.dense_beliefs[t]
    shifted = HybridBelief.gaussian(b.mean + [e, 0.0], b.cov, b.discrete)
    k = ctrl.gains[t][0, 0]
    assert ctrl.gains[t][1, 0] == pytest.approx(0.0, abs=1e-12)
    u = control(ctrl, shifted, t)
    np.testing.assert_allclose(u, nominal.dense_controls[t] - [k * e, 0.0], atol=1e-12)


def test_control_is_clamped_to_bounds():
    model, nominal = _nominal()
    ctrl = build_blqr(model, nominal, 100.0 * np.eye(2), np.eye(2))
    b = nominal.dense_beliefs[0]
    far = HybridBelief.gaussian(b.mean + [50.0, -50.0], b.cov, b.discrete)
    u = control(ctrl, far, 0, model.control_bounds)
    np.testing.assert_array_equal(u, [-1.0, 1.0])
    rng = np.random.default_rng(0)
    for _ in range(50):
        off = rng.normal(scale=20.0, size=2)
        u = control(ctrl, HybridBelief.gaussian(b.mean + off, b.cov, b.discrete), 0, model.control_bounds)
        assert np.all(np.abs(u) <= 1.0)


def test_control_outside_horizon_raises():
    model, nominal = _nominal()
    ctrl = build_blqr(model, nominal, np.eye(2), np.eye(2))
    with pytest.raises(IndexError):
        control(ctrl, nominal.dense_beliefs[0], ctrl.horizon)


# ---------------------------------------------------------------------------
# Replanning trigger


def test_identical_beliefs_do_not_replan():
    b = HybridBelief.gaussian(np.zeros(2), np.eye(2), np.array([0.3, 0.7]))
    assert belief_deviation(b, b) == 0.0
    assert not check_replan(ReplanPolicy(0.1), b, b)


def test_disjoint_discrete_parts_replan():
    a = HybridBelief.gaussian(np.zeros(2), np.eye(2), np.array([1.0, 0.0]))
    b = HybridBelief.gaussian(np.zeros(2), np.eye(2), np.array([0.0, 1.0]))
    assert belief_deviation(a, b) == pytest.approx(1.0)
    assert check_replan(ReplanPolicy(0.99), a, b)


def test_deviation_exactly_delta_does_not_replan():
    planned = HybridBelief.gaussian(np.zeros(2), 4.0 * np.eye(2), np.array([1.0]))
    actual = HybridBelief.gaussian(np.array([6.0, 0.0]), np.eye(2), np.array([1.0]))
    assert belief_deviation(planned, actual) == 3.0
    assert not check_replan(ReplanPolicy(3.0), planned, actual)
    assert check_replan(ReplanPolicy(2.999), planned, actual)


def test_policy_requires_positive_delta():
    with pytest.raises(ValueError):
        ReplanPolicy(0.0)


# ---------------------------------------------------------------------------
# Closed loop


def _direct_planner(model, goal, T=10):
    costs = CostWeights(Q=np.eye(model.state_dim), R=np.eye(model.control_dim), Q_T=100.0, Lambda=10.0)
    cfg = DirectConfig(n_segments=5)
    plans = []

    def planner(belief):
        traj = plan_direct(model, belief, goal, T, costs, cfg)
        plans.append(traj)
        return traj, "G"

    return planner, plans


def test_noiseless_run_reproduces_nominal_and_stops_at_first_in_ball_step():
    model = linear_model(n=2, V=0.0, R=0.5, bounds=1.0)
    goal = GoalRegion([3.0, -2.0], 0.2)
    start = HybridBelief.gaussian(np.zeros(2), 0.5 * np.eye(2), np.array([1.0]))
    sim = Simulator(model, np.zeros(2), np.zeros((2, 2)), np.zeros((2, 2)))
    planner, plans = _direct_planner(model, goal)
    rec = execute(model, sim, planner, ReplanPolicy(), start, goal, 30, cov_bound=1.0)
    assert rec.success and rec.n_replans == 0
    nominal = plans[0]
    for t in range(len(rec.means)):
        np.testing.assert_allclose(rec.means[t], nominal.dense_beliefs[t].mean, atol=1e-9, rtol=0)
        np.testing.assert_allclose(rec.covs[t], nominal.dense_beliefs[t].cov, atol=1e-9, rtol=0)
    np.testing.assert_allclose(np.array(rec.controls), nominal.dense_controls[: rec.steps], atol=1e-9, rtol=0)
    inside = [bool(goal.contains(m)) and np.linalg.eigvalsh(c).max() <= 1.0 for m, c in zip(rec.means, rec.covs)]
    assert inside.index(True) == rec.steps


def test_dynamics_mismatch_triggers_replan():
    model = linear_model(n=2, V=0.0, R=0.01, bounds=1.0)
    # The true robot is pinned against a wall at its start position.
    stuck = linear_model(n=2, V=0.0, R=0.01, B=np.zeros((2, 2)), bounds=1.0)
    goal = GoalRegion([4.0, 0.0], 0.2)
    start = HybridBelief.gaussian(np.zeros(2), 0.01 * np.eye(2), np.array([1.0]))
    sim = Simulator(stuck, np.zeros(2), np.zeros((2, 2)), np.zeros((2, 2)))
    planner, _ = _direct_planner(model, goal)
    rec = execute(model, sim, planner, ReplanPolicy(3.0), start, goal, 6)
    assert rec.n_replans >= 1
    assert rec.replan_steps[0] < 10
    assert rec.failure == "max_steps" and not rec.success


def test_planner_errors_end_the_run():
    model = linear_model(n=1)
    start = HybridBelief.gaussian([0.0], [[1.0]], np.array([1.0]))
    sim = Simulator(model, [0.0], np.zeros((1, 1)), np.eye(1))

    def planner(belief):
        raise NoFeasiblePlan("nothing to do")

    rec = execute(model, sim, planner, ReplanPolicy(), start, GoalRegion([5.0], 0.1), 5)
    assert rec.failure.startswith("planner") and not rec.success
    assert rec.steps == 0
