"""Planner configuration records shared by the planners, domains and CLI."""

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .hybrid_filter import FilterConfig


@dataclass(frozen=True, eq=False)
class CostWeights:
    """Quadratic costs: state error ``Q``, control ``R``, final error ``Q_T``,
    final covariance ``Lambda`` (scalars are expanded to multiples of I)."""

    Q: np.ndarray
    R: np.ndarray
    Q_T: object = 0.0
    Lambda: object = 0.0

    def __post_init__(self):
        for name in ("Q", "R"):
            a = np.array(getattr(self, name), dtype=float)
            if a.ndim != 2 or np.linalg.eigvalsh(0.5 * (a + a.T)).min() < -1e-12:
                raise ValueError(f"{name} must be a symmetric PSD matrix")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if np.any(np.asarray(self.Lambda) < 0):
            raise ValueError("Lambda must be nonnegative")

    def final_state_matrix(self, n):
        qt = np.asarray(self.Q_T, dtype=float)
        return qt * np.eye(n) if qt.ndim == 0 else qt

    def covariance_matrix(self, n):
        """Weight on the flattened covariance vector (length n*n)."""
        lam = np.asarray(self.Lambda, dtype=float)
        return lam * np.eye(n * n) if lam.ndim == 0 else lam


@dataclass(frozen=True)
class DirectConfig:
    n_segments: int = 5
    max_iter: int = 100
    kkt_tol: float = 1e-4
    feas_tol: float = 1e-6
    fd_step: float = 1e-6
    # l1 weight on the elastic terminal-goal constraint inside the QP,
    # relative to the normalized objective.
    elastic_weight: float = 1e3
    # "bfgs" adds damped quasi-Newton updates of the Lagrangian curvature to
    # the exact objective Hessian; "gauss_newton" keeps the objective part only.
    hessian: str = "bfgs"
    # MLO rollouts inside the optimizer use closed-form guard masses so the
    # belief dynamics are smooth in the decision variables.
    filter: FilterConfig = FilterConfig(transition_method="analytic")


@dataclass(frozen=True)
class HierarchicalConfig:
    n_map_samples: int = 400
    n_inner_samples: int = 64
    conf_radius_frac: float = 0.05
    de_population_factor: int = 15
    de_F: float = 0.8
    de_CR: float = 0.9
    de_generations: int = 300
    de_stagnation: int = 50
    path_penalty: float = 0.05
    max_plan_length: int = 0  # 0 = no pruning; else max number of non-goal modes
    min_segment_steps: int = 5
    sep_samples: int = 2000
    touch_frac: float = 0.01
    n_final_samples: int = 2000
    # Weight of the distance-to-previous-subgoal tie breaker (per domain diagonal).
    anchor_weight: float = 0.02
    # None solves every candidate. An integer k first ranks candidates by
    # rollouts of their warm starts and solves only the best k (faster, but
    # can pick a different winner).
    screen_top_k: object = None
    seed: int = 0


def with_overrides(obj, **kwargs):
    names = {f.name for f in fields(obj)}
    unknown = set(kwargs) - names
    if unknown:
        raise KeyError(f"unknown fields {sorted(unknown)}")
    return replace(obj, **kwargs)
