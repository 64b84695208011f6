"""Small models shared by the test modules."""

import numpy as np

from hybrid_pomdp.hybrid_model import Box, GuardSet, LocalModel, TransitionGraph, build_model

INF = np.inf


def linear_model(n=1, V=0.0, R=1.0, A=None, B=None, bounds=10.0, domain=100.0):
    """Single-mode ``x' = A x + B u``, ``z = x + w`` over the whole space."""
    A = np.eye(n) if A is None else np.atleast_2d(A)
    B = np.eye(n) if B is None else np.atleast_2d(B)
    loc = LocalModel.affine(0, A, B, np.eye(n), V * np.eye(n), R * np.eye(n))
    box = Box(-domain * np.ones(n), domain * np.ones(n))
    whole = GuardSet.from_box(Box(-INF * np.ones(n), INF * np.ones(n)), box)
    graph = TransitionGraph((0,), {(0, 0): whole})
    return build_model([loc], graph, box, Box(-bounds * np.ones(B.shape[1]), bounds * np.ones(B.shape[1])))
