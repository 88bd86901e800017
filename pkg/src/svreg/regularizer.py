"""Spatially varying diffusion energy and the hyperprior penalties on its weights.

All energies are averaged over voxels so hyperparameters do not depend on the
grid size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import GridMismatchError, forward_gradient

LOG_FLOOR = 1e-7


@dataclass(frozen=True)
class BetaPrior:
    """Power-function prior on ``lambda / lambda_max`` with shape ``alpha = 1 + alpha_prime``."""

    alpha_prime: float
    lambda_max: float

    def __post_init__(self):
        if self.alpha_prime < 0:
            raise ValueError(f"alpha_prime must be >= 0, got {self.alpha_prime}")
        # lambda_max == 0 is accepted: it switches the diffusion term off entirely.
        if self.lambda_max < 0:
            raise ValueError(f"lambda_max must be >= 0, got {self.lambda_max}")

    kind = "beta"


@dataclass(frozen=True)
class GaussianPrior:
    """Truncated normal prior on ``lambda / lambda_mean`` with ``sigma_prime = 1 / (2 sigma^2)``."""

    sigma_prime: float
    lambda_mean: float

    def __post_init__(self):
        if self.sigma_prime < 0:
            raise ValueError(f"sigma_prime must be >= 0, got {self.sigma_prime}")
        if not self.lambda_mean > 0:
            raise ValueError(f"lambda_mean must be > 0, got {self.lambda_mean}")

    kind = "gaussian"


@dataclass(frozen=True)
class UniformWeight:
    """Spatially invariant baseline: ``lambda`` fixed to ``value`` everywhere, never optimized."""

    value: float

    def __post_init__(self):
        if self.value < 0:
            raise ValueError(f"uniform weight must be >= 0, got {self.value}")

    kind = "uniform"


PriorKind = BetaPrior | GaussianPrior | UniformWeight


def prior_to_dict(prior: PriorKind) -> dict:
    if isinstance(prior, BetaPrior):
        return {"kind": "beta", "alpha_prime": prior.alpha_prime, "lambda_max": prior.lambda_max}
    if isinstance(prior, GaussianPrior):
        return {"kind": "gaussian", "sigma_prime": prior.sigma_prime, "lambda_mean": prior.lambda_mean}
    return {"kind": "uniform", "value": prior.value}


def prior_from_dict(d: dict) -> PriorKind:
    d = dict(d)
    kind = d.pop("kind")
    cls = {"beta": BetaPrior, "gaussian": GaussianPrior, "uniform": UniformWeight}.get(kind)
    if cls is None:
        raise ValueError(f"unknown prior kind {kind!r}")
    return cls(**{k: float(v) for k, v in d.items()})


def weighted_diffusion(u: np.ndarray, lam: np.ndarray):
    """``mean_p lam(p) * sum_a |u(p + e_a) - u(p)|^2`` and its gradients.

    Args:
        u: vector field ``(C, *dims)`` (any number of components).
        lam: non-negative scalar weights ``dims``.

    Returns:
        ``(energy, grad_u, grad_lam)``.
    """
    u = np.asarray(u, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if u.shape[1:] != lam.shape:
        raise GridMismatchError(f"weights {lam.shape} do not match field {u.shape[1:]}")
    if np.any(lam < 0):
        raise ValueError("regularization weights must be non-negative")
    size = lam.size
    grad_u = np.zeros_like(u)
    sq = np.zeros_like(lam)
    for a, diff in enumerate(forward_gradient(u, vector=True)):
        sq += np.sum(diff * diff, axis=0)
        flux = 2.0 * lam * diff
        grad_u -= flux
        # Each forward difference also pulls on its neighbour at p + e_a.
        dst = [slice(None)] * u.ndim
        src = [slice(None)] * u.ndim
        dst[a + 1] = slice(1, None)
        src[a + 1] = slice(0, -1)
        grad_u[tuple(dst)] += flux[tuple(src)]
    energy = float(np.sum(lam * sq)) / size
    return energy, grad_u / size, sq / size


def build_laplacian_dense(lam: np.ndarray, max_nodes: int = 1000) -> np.ndarray:
    """Dense weighted graph Laplacian ``D - A`` of the forward-adjacency lattice.

    Every forward edge ``(p, p + e_a)`` carries weight ``lam(p)`` in both directions,
    so ``trace(u^T L u) = sum_p lam(p) |grad u(p)|^2``. Meant as a test oracle.
    """
    lam = np.asarray(lam, dtype=np.float64)
    n = lam.size
    if n > max_nodes:
        raise ValueError(f"dense Laplacian limited to {max_nodes} nodes, grid has {n}")
    idx = np.arange(n).reshape(lam.shape)
    adj = np.zeros((n, n))
    for a in range(lam.ndim):
        src = [slice(None)] * lam.ndim
        dst = [slice(None)] * lam.ndim
        src[a] = slice(0, -1)
        dst[a] = slice(1, None)
        i = idx[tuple(src)].ravel()
        j = idx[tuple(dst)].ravel()
        w = lam[tuple(src)].ravel()
        adj[i, j] += w
        adj[j, i] += w
    return np.diag(adj.sum(axis=1)) - adj


def beta_penalty(lam_norm: np.ndarray, alpha_prime: float):
    """Negative log power-function prior: ``-(alpha_prime / N) sum log lam_norm``.

    ``lam_norm`` is clamped at ``LOG_FLOOR`` inside the log; the gradient is zero
    where the clamp is active.
    """
    if alpha_prime < 0:
        raise ValueError(f"alpha_prime must be >= 0, got {alpha_prime}")
    lam_norm = np.asarray(lam_norm, dtype=np.float64)
    size = lam_norm.size
    clamped = np.maximum(lam_norm, LOG_FLOOR)
    energy = -alpha_prime * float(np.sum(np.log(clamped))) / size
    grad = np.where(lam_norm > LOG_FLOOR, -alpha_prime / clamped, 0.0) / size
    return energy, grad


def gaussian_penalty(lam: np.ndarray, sigma_prime: float, lambda_mean: float):
    """Negative log normal prior: ``(sigma_prime / N) sum (lam / lambda_mean - 1)^2``."""
    if not lambda_mean > 0:
        raise ValueError(f"lambda_mean must be > 0, got {lambda_mean}")
    if sigma_prime < 0:
        raise ValueError(f"sigma_prime must be >= 0, got {sigma_prime}")
    lam = np.asarray(lam, dtype=np.float64)
    size = lam.size
    r = lam / lambda_mean - 1.0
    energy = sigma_prime * float(np.sum(r * r)) / size
    grad = 2.0 * sigma_prime * r / (lambda_mean * size)
    return energy, grad
