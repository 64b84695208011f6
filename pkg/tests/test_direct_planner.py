import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_pomdp.config import CostWeights, DirectConfig
from hybrid_pomdp.direct_planner import (
    BeliefTrajectory,
    TranscriptionProblem,
    box_qp,
    covariance_vector,
    mlo_rollout,
    mlo_step,
    objective,
    objective_gradient,
    plan_direct,
    rollout_trajectory,
    segment_integrate_belief,
    segment_integrate_state,
    solve_nlp,
)
from hybrid_pomdp.domains import walled_domain
from hybrid_pomdp.hybrid_model import Box, HybridBelief

from helpers import linear_model

_WALLED = walled_domain()


def _lqr_problem(q_t=1e6, terminal=False, bounds=None, R=1.0, x0=4.0):
    """x' = x + u from x0 to 0 in 4 single-step segments, cost sum R u^2 + q_t x_T^2."""
    model = linear_model(n=1, R=1.0)
    start = HybridBelief.gaussian([x0], [[1.0]], np.array([1.0]))
    costs = CostWeights(Q=np.zeros((1, 1)), R=R * np.eye(1), Q_T=q_t, Lambda=0.0)
    return TranscriptionProblem(model, start, np.zeros(1), 4, 4, costs, control_bounds=bounds,
                                terminal_constraint=terminal)


def _lqr_oracle(x0, q_t, T, R=1.0):
    """Backward Riccati recursion for x' = x + u, stage cost R u^2, final cost q_t x^2."""
    P = q_t
    gains = []
    for _ in range(T):
        k = P / (R + P)
        gains.append(k)
        P = P - P * P / (R + P)
    x, us = x0, []
    for k in reversed(gains):
        u = -k * x
        us.append(u)
        x = x + u
    return np.array(us), x


# ---------------------------------------------------------------------------
# MLO rollouts


def test_mlo_means_follow_deterministic_rollout():
    model = linear_model(n=2, R=2.0)
    rng = np.random.default_rng(0)
    controls = rng.uniform(-1, 1, (6, 2))
    beliefs = mlo_rollout(model, HybridBelief.gaussian([1.0, -1.0], np.eye(2), np.array([1.0])), controls)
    x = np.array([1.0, -1.0])
    for b, u in zip(beliefs[1:], controls):
        x = x + u
        np.testing.assert_allclose(b.mean, x, atol=1e-12)


def test_mlo_covariance_is_riccati_recursion():
    model = linear_model(n=1, R=3.0)
    beliefs = mlo_rollout(model, HybridBelief.gaussian([0.0], [[5.0]], np.array([1.0])), np.zeros((8, 1)))
    p = 5.0
    for b in beliefs[1:]:
        p = p - p * p / (p + 3.0)
        assert b.cov[0, 0] == pytest.approx(p, rel=1e-12)


def test_mlo_wall_push_shrinks_constrained_axis():
    spec = walled_domain(contact="sticky")
    b = HybridBelief.gaussian([-3.0, 5.0], 4.0 * np.eye(2), np.array([0.0, 1.0, 0.0]))
    beliefs = mlo_rollout(spec.model, b, np.tile([-1.0, 1.0], (5, 1)))
    var_x = [bb.cov[0, 0] for bb in beliefs]
    assert all(b2 <= b1 + 1e-12 for b1, b2 in zip(var_x, var_x[1:]))
    assert var_x[-1] < var_x[0]
    # The mean slides along the wall.
    assert beliefs[-1].mean[1] > beliefs[0].mean[1] + 3.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 20.0))
def test_mlo_never_loses_information_without_process_noise(seed, r):
    model = linear_model(n=2, R=r)
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 2))
    b = HybridBelief.gaussian(rng.normal(0, 3, 2), a @ a.T + 0.1 * np.eye(2), np.array([1.0]))
    dets = [np.linalg.det(bb.cov) for bb in mlo_rollout(model, b, rng.uniform(-5, 5, (10, 2)))]
    assert all(d2 <= d1 * (1 + 1e-12) for d1, d2 in zip(dets, dets[1:]))


# ---------------------------------------------------------------------------
# Segment integration


def test_segment_integrate_state_examples():
    add = lambda x, u: x + u
    assert segment_integrate_state(add, np.array([0.0]), np.array([1.0]), 4)[0] == 4.0
    assert segment_integrate_state(add, np.array([2.0]), np.array([3.0]), 1)[0] == 5.0
    assert segment_integrate_state(lambda x, u: 2 * x, np.array([1.0]), None, 3)[0] == 8.0
    with pytest.raises(ValueError):
        segment_integrate_state(add, np.array([0.0]), np.array([1.0]), 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(-3, 3), st.floats(-1, 1))
def test_segment_integrate_state_composes(d1, d2, x0, u):
    f = lambda x, u: 0.9 * x + np.sin(x) * u
    x = np.array([x0])
    u = np.array([u])
    both = segment_integrate_state(f, x, u, d1 + d2)
    chained = segment_integrate_state(f, segment_integrate_state(f, x, u, d1), u, d2)
    np.testing.assert_array_equal(both, chained)


def test_segment_integrate_belief():
    model = linear_model(n=1, R=2.0)
    b = HybridBelief.gaussian([1.0], [[4.0]], np.array([1.0]))
    u = np.array([0.5])
    one = segment_integrate_belief(model, b, u, 1)
    ref = mlo_step(model, b, u)
    np.testing.assert_array_equal(one.mean, ref.mean)
    np.testing.assert_array_equal(one.cov, ref.cov)
    five = segment_integrate_belief(model, b, u, 5)
    p = 4.0
    for _ in range(5):
        p = p * 2.0 / (p + 2.0)
    assert five.cov[0, 0] == pytest.approx(p, rel=1e-12)
    assert five.mean[0] == pytest.approx(3.5)


def test_segment_integrate_belief_keeps_normalization():
    b = HybridBelief.gaussian([-1.5, 3.0], 2.0 * np.eye(2), np.array([0.6, 0.4, 0.0]))
    out = segment_integrate_belief(_WALLED.model, b, np.array([-0.5, -0.5]), 10)
    assert abs(out.discrete.sum() - 1.0) <= 1e-9
    assert abs(out.weights.sum() - 1.0) <= 1e-9


# ---------------------------------------------------------------------------
# Objective


def test_objective_zero_trajectory():
    model = linear_model(n=2)
    zero = HybridBelief.gaussian(np.zeros(2), np.zeros((2, 2)), np.array([1.0]))
    costs = CostWeights(Q=np.eye(2), R=np.eye(2), Q_T=10.0, Lambda=10.0)
    problem = TranscriptionProblem(model, zero, np.zeros(2), 2, 2, costs)
    assert objective([(zero, np.zeros(2)), (zero, np.zeros(2)), (zero, None)], problem) == 0.0


def test_objective_single_knot():
    model = linear_model(n=2)
    start = HybridBelief.gaussian(np.zeros(2), np.zeros((2, 2)), np.array([1.0]))
    knot = HybridBelief.gaussian([1.0, 0.0], np.zeros((2, 2)), np.array([1.0]))
    costs = CostWeights(Q=np.diag([0.5, 0.5]), R=np.diag([10.0, 10.0]))
    problem = TranscriptionProblem(model, start, np.zeros(2), 1, 1, costs)
    assert objective([(start, np.zeros(2)), (knot, None)], problem) == pytest.approx(0.5)


def test_objective_final_terms_use_column_stacked_covariance():
    model = linear_model(n=2)
    start = HybridBelief.gaussian(np.zeros(2), np.eye(2), np.array([1.0]))
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    final = HybridBelief.gaussian([0.0, 1.0], cov, np.array([1.0]))
    costs = CostWeights(Q=np.zeros((2, 2)), R=np.zeros((2, 2)), Q_T=3.0, Lambda=2.0)
    problem = TranscriptionProblem(model, start, np.zeros(2), 1, 1, costs)
    s = covariance_vector(cov)
    np.testing.assert_array_equal(s, [2.0, 0.5, 0.5, 1.0])
    assert objective([(start, np.zeros(2)), (final, None)], problem) == pytest.approx(3.0 + 2.0 * s @ s)


def test_walled_cost_constants():
    c = _WALLED.costs
    np.testing.assert_array_equal(c.Q, np.diag([0.5, 0.5]))
    np.testing.assert_array_equal(c.R, np.diag([10.0, 10.0]))
    assert c.Q_T == 1e4 and c.Lambda == 1e7


def test_objective_gradient_matches_finite_differences():
    spec = _WALLED
    problem = TranscriptionProblem(spec.model, spec.start_belief, spec.goal_region.center, 20, 5, spec.costs)
    rng = np.random.default_rng(2)
    for _ in range(3):
        controls = rng.uniform(-2.0, 2.0, (5, 2))
        _, grad = objective_gradient(problem, controls)
        fd = np.zeros_like(controls)
        for idx in np.ndindex(*controls.shape):
            h = 1e-5
            up, dn = controls.copy(), controls.copy()
            up[idx] += h
            dn[idx] -= h
            fd[idx] = (rollout_trajectory(problem, up).objective_value
                       - rollout_trajectory(problem, dn).objective_value) / (2 * h)
        assert np.max(np.abs(grad - fd)) <= 1e-4 * np.max(np.abs(fd))


# ---------------------------------------------------------------------------
# Solver


def test_box_qp_matches_projected_newton_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.normal(size=(4, 4))
        A = a @ a.T + 0.5 * np.eye(4)
        b = rng.normal(size=4) * 3
        lo, hi = -np.ones(4), np.ones(4)
        x = box_qp(A, b, lo, hi)
        g = A @ x + b
        assert np.all(x >= lo - 1e-12) and np.all(x <= hi + 1e-12)
        # KKT of the box QP.
        free = (x > lo + 1e-9) & (x < hi - 1e-9)
        assert np.all(np.abs(g[free]) <= 1e-8)
        assert np.all(g[x <= lo + 1e-9] >= -1e-8)
        assert np.all(g[x >= hi - 1e-9] <= 1e-8)


def test_sqp_matches_lqr_oracle():
    problem = _lqr_problem()
    traj, report = solve_nlp(problem)
    us, x_final = _lqr_oracle(4.0, 1e6, 4)
    assert report.converged
    np.testing.assert_allclose(traj.knot_controls[:, 0], us, atol=1e-5)
    np.testing.assert_allclose(us, -1.0, atol=1e-5)
    assert abs(traj.final_belief.mean[0]) <= 1e-4
    assert abs(x_final) <= 1e-4


def test_sqp_terminal_constraint_is_exact():
    traj, report = solve_nlp(_lqr_problem(q_t=0.0, terminal=True))
    assert report.converged
    assert abs(traj.final_belief.mean[0]) <= 1e-6
    np.testing.assert_allclose(traj.knot_controls[:, 0], -1.0, atol=1e-5)


def test_sqp_from_optimum_stops_quickly():
    problem = _lqr_problem()
    us, _ = _lqr_oracle(4.0, 1e6, 4)
    guess = rollout_trajectory(problem, us[:, None])
    traj, report = solve_nlp(problem, us[:, None])
    assert report.converged
    assert report.iterations <= 2
    assert traj.objective_value == pytest.approx(guess.objective_value, rel=1e-9)


def test_sqp_unreachable_goal_reports_failure():
    problem = _lqr_problem(terminal=True, bounds=Box([0.0], [0.0]))
    traj, report = solve_nlp(problem)
    assert not report.converged
    assert report.terminal_residual == pytest.approx(4.0)
    np.testing.assert_array_equal(traj.knot_controls, 0.0)


def test_converged_reports_meet_tolerances():
    for problem in (_lqr_problem(), _lqr_problem(q_t=1.0), _lqr_problem(terminal=True, R=5.0)):
        _, report = solve_nlp(problem)
        assert report.converged
        assert report.kkt_norm <= 1e-4
        assert report.constraint_residual <= 1e-6


def test_solver_rejects_unknown_hessian():
    with pytest.raises(ValueError):
        solve_nlp(_lqr_problem(), config=DirectConfig(hessian="newton"))


def test_plan_direct_linear_matches_oracle():
    problem = _lqr_problem()
    model = problem.model
    cfg = DirectConfig(n_segments=4)
    traj = plan_direct(model, problem.start_belief, np.zeros(1), 4, problem.costs, cfg, terminal_constraint=False)
    us, _ = _lqr_oracle(4.0, 1e6, 4)
    np.testing.assert_allclose(traj.dense_controls[:, 0], us, atol=1e-5)


def test_plan_direct_at_goal_keeps_still():
    model = linear_model(n=2)
    start = HybridBelief.gaussian([1.0, 2.0], 1e-9 * np.eye(2), np.array([1.0]))
    costs = CostWeights(Q=np.eye(2), R=np.eye(2), Q_T=100.0, Lambda=1.0)
    traj = plan_direct(model, start, np.array([1.0, 2.0]), 8, costs, DirectConfig(n_segments=4))
    assert np.max(np.abs(traj.dense_controls)) <= 1e-6


def test_plan_direct_walled_reaches_goal():
    spec = _WALLED
    traj = plan_direct(spec.model, spec.start_belief, spec.goal_region, spec.horizon, spec.costs, spec.direct)
    assert isinstance(traj, BeliefTrajectory)
    assert traj.report.converged
    assert np.all(np.abs(traj.final_belief.mle - spec.goal_region.center) <= 0.3)
    assert len(traj.dense_beliefs) == spec.horizon + 1
    assert traj.dense_controls.shape == (spec.horizon, 2)
    # Dense beliefs satisfy the segment dynamics.
    M, d = spec.direct.n_segments, spec.horizon // spec.direct.n_segments
    for k in range(M):
        start = traj.knots[k][0]
        end = segment_integrate_belief(spec.model, start, traj.knots[k][1], d, spec.direct.filter)
        assert np.max(np.abs(end.mean - traj.knots[k + 1][0].mean)) <= 1e-6
        assert np.max(np.abs(end.cov - traj.knots[k + 1][0].cov)) <= 1e-6


def test_problem_validation():
    model = linear_model(n=1)
    b = HybridBelief.gaussian([0.0], [[1.0]], np.array([1.0]))
    costs = CostWeights(Q=np.eye(1), R=np.eye(1))
    with pytest.raises(ValueError):
        TranscriptionProblem(model, b, np.zeros(1), 10, 3, costs)
    with pytest.raises(ValueError):
        CostWeights(Q=-np.eye(1), R=np.eye(1))
    with pytest.raises(ValueError):
        CostWeights(Q=np.eye(1), R=np.eye(1), Lambda=-1.0)
