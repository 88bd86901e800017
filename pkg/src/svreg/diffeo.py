"""Velocity exponentiation by scaling and squaring, and deformation regularity metrics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .field import check_vector_field, compose, compose_vjp


def exponentiate(v: np.ndarray, n_steps: int = 7) -> np.ndarray:
    """Displacement of ``exp(v)``: scale ``v`` by ``2**-n_steps`` then self-compose ``n_steps`` times."""
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    check_vector_field(v)
    u = np.asarray(v, dtype=np.float64) / 2.0**n_steps
    for _ in range(n_steps):
        u = compose(u, u)
    return u


def exponentiate_vjp(v: np.ndarray, n_steps: int = 7):
    """Forward exponentiation plus a pullback mapping ``dL/du`` to ``dL/dv``."""
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    check_vector_field(v)
    u = np.asarray(v, dtype=np.float64) / 2.0**n_steps
    pullbacks = []
    for _ in range(n_steps):
        u, pb = compose_vjp(u, u)
        pullbacks.append(pb)

    def pullback(grad):
        g = np.asarray(grad, dtype=np.float64)
        for pb in reversed(pullbacks):
            g_outer, g_inner = pb(g)
            g = g_outer + g_inner
        return g / 2.0**n_steps

    return u, pullback


def exponentiate_with_adjoint(v: np.ndarray, n_steps: int, upstream_grad: np.ndarray) -> np.ndarray:
    """Gradient with respect to ``v`` of ``<upstream_grad, exponentiate(v, n_steps)>``."""
    _, pullback = exponentiate_vjp(v, n_steps)
    return pullback(upstream_grad)


def _det(jac) -> np.ndarray:
    """Determinant of a nested ``jac[c][a]`` list of arrays (2x2 or 3x3)."""
    if len(jac) == 2:
        return jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]
    return (
        jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
        - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
        + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0])
    )


def jacobian_determinant(disp: np.ndarray) -> np.ndarray:
    """``det(I + grad u)`` per voxel; central differences inside, one-sided on the border."""
    check_vector_field(disp)
    d = disp.shape[0]
    jac = [
        [(1.0 if c == a else 0.0) + np.gradient(disp[c], axis=a) for a in range(d)] for c in range(d)
    ]
    return _det(jac)


def _one_sided(comp: np.ndarray, axis: int, forward: bool) -> np.ndarray:
    """Forward (or backward) difference, falling back to the other side on the border."""
    diff = np.diff(comp, axis=axis)
    first = np.take(diff, [0], axis=axis)
    last = np.take(diff, [-1], axis=axis)
    return np.concatenate([diff, last] if forward else [first, diff], axis=axis)


@dataclass
class JacobianReport:
    pct_nonpos_j: float
    pct_ndv: float
    min_j: float
    det: np.ndarray

    def summary(self) -> dict:
        return {"pct_nonpos_J": self.pct_nonpos_j, "pct_ndv": self.pct_ndv, "min_J": self.min_j}


def fold_metrics(disp: np.ndarray) -> JacobianReport:
    """Folding statistics of a displacement field.

    ``pct_nonpos_j`` is the fraction of voxels whose central-difference Jacobian
    determinant is <= 0. ``pct_ndv`` averages, over voxels, the fraction of the
    ``2**d`` forward/backward one-sided Jacobians that are non-positive. Both are
    fractions in ``[0, 1]``.
    """
    check_vector_field(disp)
    d = disp.shape[0]
    det = jacobian_determinant(disp)
    diffs = {
        (c, a, fwd): _one_sided(disp[c], a, fwd) for c in range(d) for a in range(d) for fwd in (True, False)
    }
    bad = np.zeros(disp.shape[1:])
    combos = list(itertools.product((True, False), repeat=d))
    for combo in combos:
        jac = [[(1.0 if c == a else 0.0) + diffs[c, a, combo[a]] for a in range(d)] for c in range(d)]
        bad += _det(jac) <= 0
    return JacobianReport(
        pct_nonpos_j=float(np.mean(det <= 0)),
        pct_ndv=float(np.mean(bad / len(combos))),
        min_j=float(det.min()),
        det=det,
    )
