"""Belief-space trajectory optimization by direct transcription.

Beliefs are rolled out under the maximum-likely-observation (MLO)
assumption: each step applies the prior and then corrects with the
observation the prior itself predicts. The horizon is cut into ``M``
segments of ``delta`` steps. The decision variables are the knot beliefs
(mean and the upper triangle of the covariance) and one constant control per
segment, tied together by the equality constraints
``b'_{k+1} = Phi(b'_k, u'_k)``.

The nonlinear program is solved by a trust-region sequential quadratic
programming method. Each iteration condenses the knot variables out of the
linearized constraints and solves a bounded QP in the controls, with the
optional terminal-mean constraint kept elastic. Steps are judged on an l1
merit function, with a second-order correction when the dynamics bend away
from their linearization. Curvature comes from a damped BFGS approximation
seeded with the exact (quadratic) objective Hessian.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import CostWeights, DirectConfig
from .errors import DimensionMismatch, NumericalFailure
from .gaussian import symmetrize
from .hybrid_filter import FilterConfig, belief_prior, posterior_update, region_probabilities
from .hybrid_model import Box, GaussianComponent, GoalRegion, HybridBelief, normalized

log = logging.getLogger(__name__)

_ACCEPT = 0.1
_GROW = 0.75
_MIN_STEP = 1e-8
_PSD_FLOOR = 1e-10


# ---------------------------------------------------------------------------
# Problem and result types


@dataclass(frozen=True, eq=False)
class TranscriptionProblem:
    model: object
    start_belief: HybridBelief
    goal_state: np.ndarray
    horizon: int
    n_segments: int
    costs: CostWeights
    filter: FilterConfig = FilterConfig(transition_method="analytic")
    control_bounds: Box = None
    # Require the final mean to equal the goal, on top of the Q_T cost.
    terminal_constraint: bool = False

    def __post_init__(self):
        if self.horizon < 1 or self.n_segments < 1:
            raise ValueError("horizon and n_segments must be positive")
        if self.horizon % self.n_segments:
            raise ValueError(f"horizon {self.horizon} is not divisible by {self.n_segments} segments")
        goal = np.array(self.goal_state, dtype=float)
        if goal.shape != (self.model.state_dim,):
            raise DimensionMismatch(f"goal must be a {self.model.state_dim}-vector")
        goal.setflags(write=False)
        object.__setattr__(self, "goal_state", goal)
        if self.control_bounds is None:
            object.__setattr__(self, "control_bounds", self.model.control_bounds)

    @property
    def segment_length(self):
        return self.horizon // self.n_segments

    @property
    def state_dim(self):
        return self.model.state_dim

    @property
    def control_dim(self):
        return self.model.control_dim


@dataclass(frozen=True)
class NlpReport:
    converged: bool
    iterations: int
    kkt_norm: float
    constraint_residual: float
    status: str = "converged"
    objective_scale: float = 1.0
    terminal_residual: float = 0.0


@dataclass(frozen=True, eq=False)
class BeliefTrajectory:
    """Solved knot beliefs and controls plus the per-step belief sequence.

    ``knots[k] = (b'_k, u'_k)`` for ``k < M`` and ``(b'_M, None)`` last.
    ``dense_beliefs`` has ``T + 1`` entries; ``dense_controls`` is ``(T, m)``.
    """

    knots: tuple
    dense_beliefs: tuple
    dense_controls: np.ndarray
    objective_value: float
    report: NlpReport = None
    problem: TranscriptionProblem = field(default=None, repr=False)

    @property
    def knot_controls(self):
        return np.array([u for _, u in self.knots[:-1]])

    @property
    def final_belief(self):
        return self.knots[-1][0]

    @property
    def horizon(self):
        return len(self.dense_controls)


# ---------------------------------------------------------------------------
# Belief propagation


def mlo_step(model, belief, u, config=FilterConfig(transition_method="analytic"), rng=None):
    """One filter step driven by the observation the prior predicts."""
    prior = belief_prior(model, belief, u, config, rng)
    mean = prior.mean
    z_hat = np.zeros(model.obs_dim)
    for q in range(model.n_modes):
        if prior.discrete[q] > 0.0:
            z_hat += prior.discrete[q] * np.asarray(model.locals[q].observation(mean), dtype=float)
    return posterior_update(model, prior, z_hat, config)


def mlo_rollout(model, start_belief, controls, config=FilterConfig(transition_method="analytic")):
    """Beliefs ``b_0 .. b_T`` under MLO for the control sequence ``controls``."""
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    if controls.size == 0:
        return [start_belief]
    if controls.shape[1] != model.control_dim:
        raise DimensionMismatch(f"controls must have {model.control_dim} columns")
    out = [start_belief]
    for u in controls:
        out.append(mlo_step(model, out[-1], u, config))
    return out


def segment_integrate_state(model_fn, x_start, u, delta):
    """Apply the discrete dynamics ``model_fn(x, u)`` ``delta`` times."""
    if delta < 1:
        raise ValueError("delta must be at least 1")
    x = np.asarray(x_start, dtype=float)
    for _ in range(delta):
        x = np.asarray(model_fn(x, u), dtype=float)
        if not np.all(np.isfinite(x)):
            raise NumericalFailure("state integration produced non-finite values")
    return x


def segment_integrate_belief(model, b_start, u, delta, config=FilterConfig(transition_method="analytic")):
    """Belief after ``delta`` MLO steps with constant control ``u``."""
    if delta < 1:
        raise ValueError("delta must be at least 1")
    b = b_start
    for _ in range(delta):
        b = mlo_step(model, b, u, config)
    return b


# ---------------------------------------------------------------------------
# Knot packing


def covariance_vector(cov):
    """Column-stacked covariance ``s = vec(Sigma)``."""
    return np.asarray(cov, dtype=float).flatten(order="F")


def _vech_index(n):
    return np.triu_indices(n)


def pack_belief(belief):
    """Knot vector ``(mu, upper triangle of Sigma)`` of a belief's moments."""
    n = belief.continuous[0].mean.size
    iu = _vech_index(n)
    return np.concatenate([belief.mean, belief.cov[iu]])


def unpack_cov(vec, n):
    iu = _vech_index(n)
    cov = np.zeros((n, n))
    cov[iu] = vec
    cov = cov + np.triu(cov, 1).T
    return cov


def knot_belief(model, packed, fallback_discrete=None):
    """Gaussian belief for a knot vector; modes follow the region masses.

    Predicate-only regions have no closed-form mass, so ``fallback_discrete``
    is used instead.
    """
    n = model.state_dim
    mean = np.array(packed[:n], dtype=float)
    cov = unpack_cov(packed[n:], n)
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < _PSD_FLOOR:
        cov = symmetrize((vecs * np.clip(vals, _PSD_FLOOR, None)) @ vecs.T)
    comp = GaussianComponent._trusted(mean, cov, 1.0)
    probs = region_probabilities(model, [comp])
    if probs is None or probs.sum() <= 0.0:
        if fallback_discrete is None:
            raise ValueError("knot modes need a fallback discrete belief")
        probs = fallback_discrete
    return HybridBelief._trusted((comp,), normalized(probs))


# ---------------------------------------------------------------------------
# Objective


def _final_cov_weight(costs, n):
    """Matrix ``W`` with ``vec(S)^T Lambda vec(S) = vech(S)^T W vech(S)``."""
    iu = _vech_index(n)
    k = len(iu[0])
    dup = np.zeros((n * n, k))
    for j, (r, c) in enumerate(zip(*iu)):
        dup[r + c * n, j] = 1.0
        dup[c + r * n, j] = 1.0
    return dup.T @ costs.covariance_matrix(n) @ dup


def objective(trajectory, problem):
    """Transcription cost of a trajectory's knots.

    Sums the state error cost over knots ``1..M``, the control cost over
    knots ``0..M-1``, the final state error cost and the final covariance
    cost on the column-stacked covariance.
    """
    knots = trajectory.knots if isinstance(trajectory, BeliefTrajectory) else trajectory
    c = problem.costs
    n = problem.state_dim
    goal = problem.goal_state
    Q = np.asarray(c.Q, dtype=float)
    R = np.asarray(c.R, dtype=float)
    QT = c.final_state_matrix(n)
    lam = c.covariance_matrix(n)
    total = 0.0
    for k, (b, u) in enumerate(knots):
        if k > 0:
            e = b.mean - goal
            total += float(e @ Q @ e)
        if u is not None:
            u = np.asarray(u, dtype=float)
            total += float(u @ R @ u)
    final = knots[-1][0]
    e = final.mean - goal
    s = covariance_vector(final.cov)
    total += float(e @ QT @ e) + float(s @ lam @ s)
    return total


class _Layout:
    """Index map of the decision vector ``[X_1 .. X_M, U_0 .. U_{M-1}]``."""

    def __init__(self, n, m, M):
        self.n, self.m, self.M = n, m, M
        self.p = n + n * (n + 1) // 2
        self.nx = M * self.p
        self.size = self.nx + M * m

    def x(self, k):
        """Slice of knot ``k`` in ``1..M``."""
        return slice((k - 1) * self.p, k * self.p)

    def u(self, k):
        """Slice of segment control ``k`` in ``0..M-1``."""
        return slice(self.nx + k * self.m, self.nx + (k + 1) * self.m)

    def controls(self, z):
        return z[self.nx:].reshape(self.M, self.m)

    def knots(self, z):
        return z[: self.nx].reshape(self.M, self.p)


def _quadratic_objective(problem, lay):
    """``(H, h, c)`` with ``f(z) = 0.5 z^T H z + h^T z + c``."""
    costs = problem.costs
    n = lay.n
    goal = problem.goal_state
    Q = np.asarray(costs.Q, dtype=float)
    R = np.asarray(costs.R, dtype=float)
    QT = costs.final_state_matrix(n)
    W = _final_cov_weight(costs, n)
    H = np.zeros((lay.size, lay.size))
    h = np.zeros(lay.size)
    const = 0.0
    for k in range(1, lay.M + 1):
        sl = lay.x(k)
        Qk = Q + (QT if k == lay.M else 0.0)
        mu = slice(sl.start, sl.start + n)
        H[mu, mu] += 2.0 * Qk
        h[mu] += -2.0 * Qk @ goal
        const += float(goal @ Qk @ goal)
    last = lay.x(lay.M)
    cv = slice(last.start + n, last.stop)
    H[cv, cv] += 2.0 * W
    for k in range(lay.M):
        sl = lay.u(k)
        H[sl, sl] += 2.0 * R
    return H, h, const


# ---------------------------------------------------------------------------
# Constraints


class _Constraints:
    """Segment maps ``Phi`` and their finite-difference Jacobian blocks."""

    def __init__(self, problem, lay, fd_step):
        self.problem = problem
        self.lay = lay
        self.fd_step = fd_step

    def _segment(self, start, u):
        pr = self.problem
        return segment_integrate_belief(pr.model, start, u, pr.segment_length, pr.filter)

    def _knot(self, z, k, carried):
        if k == 0:
            return self.problem.start_belief
        return knot_belief(self.problem.model, z[self.lay.x(k)], carried)

    def evaluate(self, z, jacobian=False):
        """Return ``(c, G, E)``; ``G[k]``/``E[k]`` are blocks of constraint ``k+1``."""
        lay = self.lay
        c = np.zeros(lay.nx)
        G, E = [], []
        carried = self.problem.start_belief.discrete
        for k in range(lay.M):
            start = self._knot(z, k, carried)
            u = z[lay.u(k)]
            end = self._segment(start, u)
            c[lay.x(k + 1)] = pack_belief(end) - z[lay.x(k + 1)]
            if jacobian:
                G.append(None if k == 0 else self._jac_knot(z, k, carried, u))
                E.append(self._jac_control(start, u))
            carried = end.discrete
        if not np.all(np.isfinite(c)):
            raise NumericalFailure("non-finite constraint values")
        return c, G, E

    def _step(self, v):
        return self.fd_step * max(1.0, abs(v))

    def _jac_control(self, start, u):
        lay = self.lay
        lo, hi = self.problem.control_bounds.lo, self.problem.control_bounds.hi
        J = np.zeros((lay.p, lay.m))
        for j in range(lay.m):
            h = self._step(u[j])
            up, dn = u.copy(), u.copy()
            up[j] += h
            dn[j] -= h
            # Stay inside the bounds so dynamics are never queried outside them.
            if up[j] > hi[j]:
                up[j] = u[j]
            if dn[j] < lo[j]:
                dn[j] = u[j]
            width = up[j] - dn[j]
            if width <= 0.0:
                # Fixed control (lo == hi): it cannot move.
                continue
            J[:, j] = (pack_belief(self._segment(start, up)) - pack_belief(self._segment(start, dn))) / width
        return J

    def _jac_knot(self, z, k, carried, u):
        lay = self.lay
        x = z[lay.x(k)]
        J = np.zeros((lay.p, lay.p))
        model = self.problem.model
        for j in range(lay.p):
            h = self._step(x[j])
            up, dn = x.copy(), x.copy()
            up[j] += h
            dn[j] -= h
            fp = pack_belief(self._segment(knot_belief(model, up, carried), u))
            fm = pack_belief(self._segment(knot_belief(model, dn, carried), u))
            J[:, j] = (fp - fm) / (2.0 * h)
        return J


def _condense(lay, c, G, E):
    """Write the linearized knots as ``dX = r + P dU``."""
    p, m, M = lay.p, lay.m, lay.M
    r = np.zeros(lay.nx)
    P = np.zeros((lay.nx, M * m))
    for k in range(M):
        row = slice(k * p, (k + 1) * p)
        r[row] = c[row]
        P[row, k * m:(k + 1) * m] = E[k]
        if k > 0:
            prev = slice((k - 1) * p, k * p)
            r[row] += G[k] @ r[prev]
            P[row] += G[k] @ P[prev]
    return r, P


def _multipliers(lay, gx, G):
    """Equality multipliers that zero the Lagrangian gradient in the knots."""
    p, M = lay.p, lay.M
    lam = np.zeros(lay.nx)
    nxt = None
    for k in range(M - 1, -1, -1):
        row = slice(k * p, (k + 1) * p)
        lam[row] = gx[row]
        if nxt is not None:
            lam[row] += G[k + 1].T @ nxt
        nxt = lam[row]
    return lam


def _jac_transpose(lay, lam, G, E):
    p, m, M = lay.p, lay.m, lay.M
    out = np.zeros(lay.size)
    for k in range(M):
        lk = lam[k * p:(k + 1) * p]
        out[k * p:(k + 1) * p] -= lk
        if k > 0:
            out[(k - 1) * p:k * p] += G[k].T @ lk
        out[lay.u(k)] += E[k].T @ lk
    return out


def _projected(grad_u, u, lo, hi, tol=1e-12):
    g = grad_u.copy()
    g[(u <= lo + tol) & (g > 0)] = 0.0
    g[(u >= hi - tol) & (g < 0)] = 0.0
    return g


def box_qp(A, b, lo, hi, max_iter=200):
    """Minimize ``0.5 x^T A x + b^T x`` on ``lo <= x <= hi`` (``A`` positive definite).

    Primal active-set method started from the feasible point nearest 0.
    """
    return _active_set_qp(A, b, lo, hi, np.clip(np.zeros(b.size), lo, hi), None, max_iter)[0]


def _active_set_qp(A, b, lo, hi, x0, C=None, max_iter=200):
    """Primal active set for ``0.5 x^T A x + b^T x`` under ``lo <= x <= hi``
    and ``C x = C x0``; ``x0`` must satisfy the bounds.

    Returns ``(x, nu)`` with ``nu`` the equality multipliers, so that
    ``A x + b + C^T nu`` vanishes on the free variables.
    """
    n = b.size
    C = np.zeros((0, n)) if C is None else C
    ne = C.shape[0]
    x = x0.astype(float).copy()
    nu = np.zeros(ne)
    active = (x <= lo) | (x >= hi)
    for _ in range(max_iter):
        free = ~active
        grad = A @ x + b
        step = np.zeros(n)
        nf = int(free.sum())
        if nf:
            K = np.zeros((nf + ne, nf + ne))
            K[:nf, :nf] = A[np.ix_(free, free)]
            K[:nf, nf:] = C[:, free].T
            K[nf:, :nf] = C[:, free]
            rhs = np.concatenate([-grad[free], np.zeros(ne)])
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            step[free] = sol[:nf]
            nu = sol[nf:]
        elif ne:
            nu = np.linalg.lstsq(C.T, -grad, rcond=None)[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            to_hi = np.where(step > 0, (hi - x) / step, np.inf)
            to_lo = np.where(step < 0, (lo - x) / step, np.inf)
        ratio = np.minimum(to_hi, to_lo)
        ratio[active] = np.inf
        alpha = min(1.0, float(ratio.min())) if nf else 1.0
        x = x + alpha * step
        if alpha < 1.0:
            j = int(np.argmin(ratio))
            x[j] = hi[j] if step[j] > 0 else lo[j]
            active[j] = True
            continue
        grad = A @ x + b + C.T @ nu
        wrong = np.zeros(n)
        at_lo = active & (x <= lo)
        at_hi = active & (x >= hi) & ~at_lo
        wrong[at_lo] = np.clip(-grad[at_lo], 0.0, None)
        wrong[at_hi] = np.clip(grad[at_hi], 0.0, None)
        # A fixed variable (lo == hi) can never be released.
        wrong[active & (lo >= hi)] = 0.0
        if wrong.max(initial=0.0) <= 1e-12 * max(1.0, np.abs(grad).max(initial=0.0)):
            return x, nu
        active[int(np.argmax(wrong))] = False
    return x, nu


# ---------------------------------------------------------------------------
# Solver


def _initial_vector(problem, lay, initial_guess, cons):
    if isinstance(initial_guess, BeliefTrajectory):
        z = np.zeros(lay.size)
        for k in range(1, lay.M + 1):
            z[lay.x(k)] = pack_belief(initial_guess.knots[k][0])
        for k in range(lay.M):
            z[lay.u(k)] = initial_guess.knots[k][1]
        return z
    controls = np.asarray(initial_guess, dtype=float).reshape(lay.M, lay.m)
    z = np.zeros(lay.size)
    z[lay.nx:] = controls.ravel()
    # Fill the knots by rolling out, so the guess is feasible.
    carried = problem.start_belief.discrete
    for k in range(lay.M):
        start = cons._knot(z, k, carried)
        end = cons._segment(start, controls[k])
        carried = end.discrete
        z[lay.x(k + 1)] = pack_belief(end)
    return z


def straight_line_controls(problem):
    """Constant controls that would carry the mean straight to the goal."""
    u = (problem.goal_state - problem.start_belief.mean) / problem.horizon
    u = problem.control_bounds.clip(u)
    return np.tile(u, (problem.n_segments, 1))


def solve_nlp(problem, initial_guess=None, config=DirectConfig()):
    """Solve the transcription problem; return ``(BeliefTrajectory, NlpReport)``.

    ``initial_guess`` is either an ``(M, m)`` array of segment controls (the
    knots are filled by a rollout) or a previous :class:`BeliefTrajectory`.
    The objective is divided by its value at the initial guess, so the KKT
    tolerance is relative to that.
    """
    lay = _Layout(problem.state_dim, problem.control_dim, problem.n_segments)
    cons = _Constraints(problem, lay, config.fd_step)
    if initial_guess is None:
        initial_guess = straight_line_controls(problem)
    z = _initial_vector(problem, lay, initial_guess, cons)
    lo = np.tile(problem.control_bounds.lo, lay.M)
    hi = np.tile(problem.control_bounds.hi, lay.M)
    z[lay.nx:] = np.clip(z[lay.nx:], lo, hi)
    nu_dim = lay.M * lay.m

    H, h, const = _quadratic_objective(problem, lay)
    scale = 1.0 / max(1.0, abs(float(0.5 * z @ H @ z + h @ z + const)))
    H, h, const = scale * H, scale * h, scale * const
    f = lambda v: float(0.5 * v @ H @ v + h @ v + const)
    grad = lambda v: H @ v + h
    if config.hessian not in ("gauss_newton", "bfgs"):
        raise ValueError(f"unknown hessian option {config.hessian!r}")
    B = H + 1e-8 * np.eye(lay.size)

    # The final mean must reach the goal. The constraint is linear in the
    # knots; the QP treats it elastically with an exact l1 penalty.
    fm = np.arange(lay.x(lay.M).start, lay.x(lay.M).start + lay.n)
    if not problem.terminal_constraint:
        fm = fm[:0]
    terminal = lambda v: v[fm] - problem.goal_state[: fm.size]

    def with_terminal(gx, nu):
        out = gx.copy()
        out[fm] += nu
        return out

    rho = 0.0
    radius = 0.25 * float(np.max(problem.control_bounds.hi - problem.control_bounds.lo))
    c, G, E = cons.evaluate(z, jacobian=True)
    status = "max_iterations"
    kkt = feas = term = np.inf
    it = 0
    fresh = True
    for it in range(config.max_iter + 1):
        g = grad(z)
        cT = terminal(z)
        if fresh:
            r, P = _condense(lay, c, G, E)
            u = z[lay.nx:]
            lam0 = _multipliers(lay, g[: lay.nx], G)
            gr = (g + _jac_transpose(lay, lam0, G, E))[lay.nx:]
            nu = np.zeros(fm.size)
            inside = (u > lo + 1e-12) & (u < hi - 1e-12)
            if fm.size and inside.any():
                # Terminal multipliers that best zero the reduced gradient.
                nu = np.linalg.lstsq(P[fm][:, inside].T, -gr[inside], rcond=None)[0]
            kkt = float(np.abs(_projected(gr + P[fm].T @ nu, u, lo, hi)).max(initial=0.0))
            feas = float(np.abs(c).max(initial=0.0))
            term = float(np.abs(cT).max(initial=0.0))
            log.debug("sqp it=%d f=%.6g kkt=%.3g feas=%.3g term=%.3g radius=%.3g",
                      it, f(z), kkt, feas, term, radius)
            if kkt <= config.kkt_tol and max(feas, term) <= config.feas_tol:
                status = "converged"
                break
        if it == config.max_iter:
            break

        # Condensed QP in the controls, restricted to the trust region, with
        # slacks s+ and s- on the linearized terminal constraint.
        Z = np.vstack([P, np.eye(nu_dim)])
        A = symmetrize(Z.T @ B @ Z)
        A = A + 1e-12 * max(1.0, np.trace(A)) * np.eye(nu_dim)
        u = z[lay.nx:]
        ns = fm.size
        elastic = max(config.elastic_weight, 10.0 * rho)
        Aq = np.zeros((nu_dim + 2 * ns, nu_dim + 2 * ns))
        Aq[:nu_dim, :nu_dim] = A
        Aq[nu_dim:, nu_dim:] = 1e-10 * max(1.0, np.trace(A) / nu_dim) * np.eye(2 * ns)
        Cq = np.hstack([P[fm], -np.eye(ns), np.eye(ns)])
        qlo = np.concatenate([np.maximum(lo - u, -radius), np.zeros(2 * ns)])
        qhi = np.concatenate([np.minimum(hi - u, radius), np.full(2 * ns, np.inf)])

        def qp_step(cvec):
            # Knot steps follow dX = r + P dU for the constraint values cvec.
            r = _condense(lay, cvec, G, E)[0]
            d0 = np.concatenate([r, np.zeros(nu_dim)])
            bq = np.concatenate([Z.T @ (g + B @ d0), np.full(2 * ns, elastic)])
            e = -(cT + r[fm])
            y0 = np.concatenate([np.zeros(nu_dim), np.maximum(-e, 0.0), np.maximum(e, 0.0)])
            y, nu_qp = _active_set_qp(Aq, bq, qlo, qhi, y0, Cq)
            du = y[:nu_dim]
            return d0 + Z @ du, du, float(np.abs(y[nu_dim:]).sum()), nu_qp

        d, du, slack, nu_qp = qp_step(c)
        lam_qp = _multipliers(lay, with_terminal((g + B @ d)[: lay.nx], nu_qp), G)
        bound = max(np.abs(lam_qp).max(initial=0.0), np.abs(nu_qp).max(initial=0.0))
        rho = max(rho, 1.1 * float(bound) + 1e-8)

        viol = np.abs(c).sum() + np.abs(cT).sum()
        phi0 = f(z) + rho * viol
        pred = -(float(g @ d) + 0.5 * float(d @ B @ d)) + rho * (viol - slack)
        if pred <= 1e-15 * max(1.0, abs(phi0)):
            # The model sees no further decrease at this point.
            status = "stalled"
            break
        merit = lambda v, cv: f(v) + rho * (np.abs(cv).sum() + np.abs(terminal(v)).sum())

        def attempt(step):
            v = z + step
            v[lay.nx:] = np.clip(v[lay.nx:], lo, hi)
            cv = cons.evaluate(v)[0]
            return v, cv, (phi0 - merit(v, cv)) / pred

        trial, c_trial, ratio = attempt(d)
        if ratio < _GROW:
            # Second-order correction: re-solve with the new violation folded
            # into the linearized dynamics.
            d_soc, du_soc = qp_step(c + c_trial)[:2]
            soc = attempt(d_soc)
            if soc[2] > ratio:
                (trial, c_trial, ratio), du = soc, du_soc
        step = float(np.abs(du).max(initial=0.0))
        log.debug("  ratio=%.3g |du|=%.3g rho=%.3g slack=%.3g", ratio, step, rho, slack)
        if ratio < _ACCEPT:
            radius = 0.25 * step
            fresh = False
            if radius < _MIN_STEP:
                status = "line_search_failure"
                break
            continue
        if ratio > _GROW and step >= 0.99 * radius:
            radius = 2.0 * radius
        elif ratio < 0.25:
            radius = 0.5 * radius

        c_new, G_new, E_new = cons.evaluate(trial, jacobian=True)
        if config.hessian == "bfgs":
            s = trial - z
            y = (grad(trial) + _jac_transpose(lay, lam_qp, G_new, E_new)) - (g + _jac_transpose(lay, lam_qp, G, E))
            B = _damped_bfgs(B, s, y)
        z, c, G, E = trial, c_new, G_new, E_new
        fresh = True

    report = NlpReport(
        converged=status == "converged",
        iterations=it,
        kkt_norm=kkt,
        constraint_residual=feas,
        status=status,
        terminal_residual=term,
        objective_scale=scale,
    )
    return _trajectory(problem, lay, cons, z, report), report


def _damped_bfgs(B, s, y):
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 1e-300:
        return B
    sy = float(s @ y)
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        y = theta * y + (1.0 - theta) * Bs
        sy = float(s @ y)
    return symmetrize(B + np.outer(y, y) / sy - np.outer(Bs, Bs) / sBs)


def _trajectory(problem, lay, cons, z, report, fill_knots=False):
    model = problem.model
    controls = lay.controls(z)
    knots = []
    dense = [problem.start_belief]
    carried = problem.start_belief.discrete
    for k in range(lay.M):
        start = cons._knot(z, k, carried)
        knots.append((start, controls[k].copy()))
        b = start
        for _ in range(problem.segment_length):
            b = mlo_step(model, b, controls[k], problem.filter)
            dense.append(b)
        carried = b.discrete
        if fill_knots:
            z[lay.x(k + 1)] = pack_belief(b)
        # The knot, not the rollout end, starts the next segment.
        dense[-1] = cons._knot(z, k + 1, carried)
    knots.append((dense[-1], None))
    dense_controls = np.repeat(controls, problem.segment_length, axis=0)
    traj = BeliefTrajectory(tuple(knots), tuple(dense), dense_controls, 0.0, report, problem)
    object.__setattr__(traj, "objective_value", objective(traj, problem))
    return traj


def rollout_trajectory(problem, controls=None):
    """Feasible but unoptimized trajectory for constant segment controls.

    Defaults to :func:`straight_line_controls`.
    """
    lay = _Layout(problem.state_dim, problem.control_dim, problem.n_segments)
    cons = _Constraints(problem, lay, DirectConfig().fd_step)
    if controls is None:
        controls = straight_line_controls(problem)
    controls = problem.control_bounds.clip(np.asarray(controls, dtype=float).reshape(lay.M, lay.m))
    z = np.zeros(lay.size)
    z[lay.nx:] = controls.ravel()
    return _trajectory(problem, lay, cons, z, None, fill_knots=True)


def objective_gradient(problem, controls, config=DirectConfig()):
    """Objective of the rolled-out trajectory and its gradient in the segment controls.

    The gradient is propagated backwards through the segment Jacobians, the
    same way the solver sees it. Returns ``(value, gradient)`` with the
    gradient shaped like ``controls``.
    """
    lay = _Layout(problem.state_dim, problem.control_dim, problem.n_segments)
    cons = _Constraints(problem, lay, config.fd_step)
    traj = rollout_trajectory(problem, controls)
    z = np.zeros(lay.size)
    for k in range(1, lay.M + 1):
        z[lay.x(k)] = pack_belief(traj.knots[k][0])
    z[lay.nx:] = traj.knot_controls.ravel()
    H, h, _ = _quadratic_objective(problem, lay)
    g = H @ z + h
    c, G, E = cons.evaluate(z, jacobian=True)
    _, P = _condense(lay, c, G, E)
    grad = g[lay.nx:] + P.T @ g[: lay.nx]
    return traj.objective_value, grad.reshape(lay.M, lay.m)


def plan_direct(model, start_belief, goal, horizon, costs, config=DirectConfig(), initial_guess=None,
                terminal_constraint=True):
    """Plan over the full horizon with ``config.n_segments`` knots.

    The final mean is held to the goal unless ``terminal_constraint`` is off.
    """
    center = goal.center if isinstance(goal, GoalRegion) else goal
    problem = TranscriptionProblem(
        model=model,
        start_belief=start_belief,
        goal_state=center,
        horizon=horizon,
        n_segments=config.n_segments,
        costs=costs,
        filter=config.filter,
        terminal_constraint=terminal_constraint,
    )
    traj, _ = solve_nlp(problem, initial_guess, config)
    return traj
