import numpy as np
import pytest

from hybrid_pomdp.domains import (
    RELEASE_SMOOTHING,
    Simulator,
    get_domain,
    make_simulator,
    simulate_step,
    walled_domain,
)
from hybrid_pomdp.hybrid_model import mode_membership


def _step(spec, x, u):
    model = spec.model
    return model.locals[model.true_mode(np.asarray(x, float))].dynamics(np.asarray(x, float), np.asarray(u, float))


# ---------------------------------------------------------------------------
# Constants


def test_walled_constants(walled):
    np.testing.assert_array_equal(walled.start_true_state, [3.5, 2.0])
    np.testing.assert_array_equal(walled.start_belief.mean, [5.0, 5.0])
    np.testing.assert_array_equal(walled.start_belief.cov, np.diag([11.5, 11.5]))
    np.testing.assert_array_equal(walled.goal_region.center, [0.0, 0.0])
    assert walled.goal_region.radius == 0.2
    assert walled.termination_cov_bound == 1.0
    assert walled.horizon == 20
    np.testing.assert_array_equal(walled.costs.Q, np.diag([0.5, 0.5]))
    np.testing.assert_array_equal(walled.costs.R, np.diag([10.0, 10.0]))
    assert float(np.max(walled.costs.Q_T)) == 1e4 and float(np.max(walled.costs.Lambda)) == 1e7
    assert walled.filter.mixture_size == 1
    np.testing.assert_array_equal(walled.obs_noise, 15.0 * np.eye(2))
    np.testing.assert_array_equal(walled.process_noise, np.zeros((2, 2)))


def test_walled_noise_can_be_read_as_std():
    spec = walled_domain(obs_noise_is_variance=False)
    np.testing.assert_array_equal(spec.obs_noise, 225.0 * np.eye(2))


def test_assembly_constants(assembly):
    np.testing.assert_array_equal(assembly.obs_noise, 2.0 * np.eye(2))
    np.testing.assert_array_equal(assembly.process_noise, np.eye(2))
    for loc in assembly.model.locals:
        np.testing.assert_array_equal(loc.observation_noise_cov, 2.0 * np.eye(2))
        np.testing.assert_array_equal(loc.process_noise_cov, np.eye(2))
    np.testing.assert_array_equal(assembly.goal_region.center, [4.25, -13.75])
    assert assembly.goal_region.radius == 0.2
    assert assembly.model.true_mode(assembly.goal_region.center) == 3
    np.testing.assert_array_equal(assembly.costs.R, np.diag([0.1, 0.1]))
    assert float(np.max(assembly.costs.Q_T)) == 5000.0


def test_unknown_domain_and_contact_rejected():
    with pytest.raises(KeyError):
        get_domain("kitchen")
    with pytest.raises(ValueError):
        walled_domain(contact="glue")


# ---------------------------------------------------------------------------
# Dynamics examples


def test_walled_free_motion(walled):
    np.testing.assert_array_equal(_step(walled, [0.0, 0.0], [1.0, 1.0]), [1.0, 1.0])


def test_sticky_wall_blocks_x(walled_sticky):
    np.testing.assert_array_equal(_step(walled_sticky, [-3.0, 5.0], [1.0, 1.0]), [-3.0, 6.0])


def test_release_wall_lets_robot_pull_away(walled):
    out = _step(walled, [-3.0, 5.0], [1.0, 1.0])
    assert out[1] == 6.0
    assert out[0] == pytest.approx(-2.0, abs=1e-8)
    inward = _step(walled, [-3.0, 5.0], [-1.0, 1.0])
    assert inward[0] == pytest.approx(-3.0, abs=RELEASE_SMOOTHING * 1e-8)


def test_assembly_edge_motion(assembly):
    np.testing.assert_array_equal(_step(assembly, [4.2, -10.0], [1.0, 1.0]), [4.2, -9.0])


def test_assembly_corner_does_not_move(assembly):
    rng = np.random.default_rng(0)
    x = np.array([4.25, -13.75])
    for u in rng.uniform(-2, 2, size=(20, 2)):
        np.testing.assert_array_equal(_step(assembly, x, u), x)


# ---------------------------------------------------------------------------
# Properties


@pytest.mark.parametrize("name", ["walled", "assembly"])
def test_regions_partition_the_domain(name, request):
    model = request.getfixturevalue(name).model
    pts = model.domain_box.sample(np.random.default_rng(1), 20_000)
    np.testing.assert_array_equal(model.membership_matrix(pts).sum(axis=1), 1)


@pytest.mark.parametrize("name", ["walled_sticky", "assembly"])
def test_masked_axes_never_move(name, request):
    model = request.getfixturevalue(name).model
    rng = np.random.default_rng(2)
    ulo, uhi = model.control_bounds.lo, model.control_bounds.hi
    pts = model.domain_box.sample(rng, 4000)
    for x in pts:
        q = model.true_mode(x)
        jac = model.locals[q].dynamics_jac_u(x, np.zeros(2))
        masked = np.flatnonzero(np.diag(jac) == 0.0)
        u = rng.uniform(ulo, uhi)
        out = model.locals[q].dynamics(x, u)
        np.testing.assert_array_equal(out[masked], x[masked])


# ---------------------------------------------------------------------------
# Simulator


def test_zero_noise_observation_is_dynamics_output(walled):
    sim = Simulator(walled.model, [3.5, 2.0], np.zeros((2, 2)), np.zeros((2, 2)))
    z = simulate_step(sim, [1.0, -1.0])
    np.testing.assert_array_equal(z, [4.5, 1.0])
    np.testing.assert_array_equal(sim.true_state, [4.5, 1.0])


@pytest.mark.parametrize("name", ["walled", "assembly"])
def test_simulator_is_deterministic(name, request):
    spec = request.getfixturevalue(name)
    rng = np.random.default_rng(5)
    controls = rng.uniform(-1, 1, size=(100, 2))

    def trace():
        sim = make_simulator(spec, 7)
        return np.array([np.concatenate([simulate_step(sim, u), sim.true_state]) for u in controls])

    np.testing.assert_array_equal(trace(), trace())


def test_observation_noise_covariance(assembly):
    sim = Simulator(assembly.model, [7.0, -10.0], np.zeros((2, 2)), assembly.obs_noise, seed=0)
    w = np.array([simulate_step(sim, [0.0, 0.0]) - sim.true_state for _ in range(10_000)])
    np.testing.assert_allclose(np.cov(w.T), assembly.obs_noise, atol=0.05 * 2.0)


def test_true_state_stays_in_domain_and_mode_agrees(assembly):
    sim = make_simulator(assembly, 3)
    model = assembly.model
    rng = np.random.default_rng(4)
    for u in rng.uniform(-2, 2, size=(300, 2)):
        simulate_step(sim, u)
        assert model.domain_box.contains(sim.true_state[None])[0]
        assert sim.mode == model.true_mode(sim.true_state)
        assert mode_membership(model, sim.true_state)[sim.mode] > 0
