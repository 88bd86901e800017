"""Per-pair MAP registration: joint optimization of a velocity field and a weight map."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffeo import JacobianReport, exponentiate, exponentiate_vjp, fold_metrics
from .field import GridMismatchError, Stencil, identity_coords, upsample_linear, upsample_linear_adjoint
from .regularizer import (
    BetaPrior,
    GaussianPrior,
    PriorKind,
    UniformWeight,
    beta_penalty,
    gaussian_penalty,
    weighted_diffusion,
)
from .similarity import NccConfig, ncc_loss, soft_dice_loss

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss term stops being finite during registration."""

    def __init__(self, term: str, iteration: int, value: float):
        super().__init__(f"loss term {term!r} became non-finite ({value}) at iteration {iteration}")
        self.term = term
        self.iteration = iteration


def low_res_dims(full_dims, factor: float) -> tuple[int, ...]:
    if not 0 < factor <= 1:
        raise ValueError(f"resolution factor must lie in (0, 1], got {factor}")
    return tuple(max(2, math.ceil(n * factor - 1e-9)) for n in full_dims)


@dataclass
class WeightParams:
    """Low-resolution pre-activation ``z`` that realizes the weight map ``lambda``."""

    z: np.ndarray
    prior: PriorKind
    resolution_factor: float = 0.25

    @classmethod
    def initial(cls, full_dims, prior: PriorKind, resolution_factor: float = 0.25) -> "WeightParams":
        dims = low_res_dims(full_dims, resolution_factor)
        # Gaussian starts at its mode rather than at ReLU(0) = 0.
        start = prior.lambda_mean if isinstance(prior, GaussianPrior) else 0.0
        return cls(np.full(dims, float(start)), prior, resolution_factor)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(wp: WeightParams, full_dims):
    """Return the upsampled activation ``a``, ``lambda = scale * a`` and a pullback ``dL/da -> dL/dz``."""
    z = np.asarray(wp.z, dtype=np.float64)
    if isinstance(wp.prior, BetaPrior):
        s = _sigmoid(z)
        ds = s * (1.0 - s)
        scale = wp.prior.lambda_max
    elif isinstance(wp.prior, GaussianPrior):
        s = np.maximum(z, 0.0)
        ds = (z > 0).astype(np.float64)
        scale = 1.0
    else:
        act = np.full(tuple(full_dims), wp.prior.value)
        return act, act, lambda g: np.zeros_like(z)
    act = upsample_linear(s, full_dims)

    def pullback(grad_act):
        return ds * upsample_linear_adjoint(grad_act, z.shape)

    return act, scale * act, pullback


def realize_weights(wp: WeightParams, full_dims):
    """Full-resolution weight map and a pullback ``dL/dlambda -> dL/dz``.

    Beta prior: ``lambda = lambda_max * up(sigmoid(z))``; Gaussian prior:
    ``lambda = up(relu(z))``; uniform: constant, with zero gradient.
    """
    act, lam, pb = _activate(wp, full_dims)
    scale = wp.prior.lambda_max if isinstance(wp.prior, BetaPrior) else 1.0
    return lam, lambda g: pb(scale * np.asarray(g))


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class RegistrationConfig:
    ncc: NccConfig = NccConfig()
    prior: PriorKind = BetaPrior(alpha_prime=0.175, lambda_max=3.354)
    n_squaring: int = 7
    iterations: int = 400
    adam: AdamConfig = AdamConfig()
    lambda_resolution_factor: float = 0.25
    dice_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.n_squaring < 0:
            raise ValueError("n_squaring must be >= 0")
        if self.dice_weight < 0:
            raise ValueError("dice_weight must be >= 0")


@dataclass
class LossEvaluation:
    loss: float
    terms: dict
    grad_v: np.ndarray
    grad_z: np.ndarray
    disp: np.ndarray
    lam: np.ndarray


def total_loss(fixed, moving, v, wp: WeightParams, cfg: RegistrationConfig, labels=None) -> LossEvaluation:
    """Negative log posterior of ``(v, lambda)`` and its gradients.

    ``sigma_I * NCC(fixed, moving o exp(v)) + diffusion(v; lambda) + prior(lambda)``,
    plus ``dice_weight * soft_dice`` when ``labels = (moving_onehot, fixed_onehot)``
    is supplied.
    """
    fixed = np.asarray(fixed, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    dims = fixed.shape
    if moving.shape != dims or v.shape[1:] != dims:
        raise GridMismatchError(f"fixed {dims}, moving {moving.shape} and velocity {v.shape[1:]} differ")

    act, lam, act_pullback = _activate(wp, dims)
    disp, exp_pullback = exponentiate_vjp(v, cfg.n_squaring)
    st = Stencil(identity_coords(dims) + disp, dims)
    corners = st.gather(moving)
    warped = st.sample(moving, corners)
    ncc, g_warped = ncc_loss(fixed, warped, cfg.ncc)
    g_disp = cfg.ncc.sigma_i * st.spatial_derivative(moving, corners) * g_warped
    terms = {"ncc": cfg.ncc.sigma_i * ncc}

    if labels is not None and cfg.dice_weight > 0:
        moving_oh, fixed_oh = labels
        lab_corners = st.gather(moving_oh)
        dice, g_lab = soft_dice_loss(st.sample(moving_oh, lab_corners), fixed_oh)
        terms["dice"] = cfg.dice_weight * dice
        deriv = st.spatial_derivative(moving_oh, lab_corners)  # (d, K, *dims)
        g_disp = g_disp + cfg.dice_weight * np.einsum("ak...,k...->a...", deriv, g_lab)

    diff, g_v_reg, g_lam = weighted_diffusion(v, lam)
    terms["diffusion"] = diff

    prior = wp.prior
    if isinstance(prior, BetaPrior):
        pen, g_act = beta_penalty(act, prior.alpha_prime)
        g_act = g_act + prior.lambda_max * g_lam
    elif isinstance(prior, GaussianPrior):
        pen, g_lam_pen = gaussian_penalty(lam, prior.sigma_prime, prior.lambda_mean)
        g_act = g_lam + g_lam_pen
    else:
        pen, g_act = 0.0, np.zeros_like(lam)
    terms["prior"] = pen

    grad_v = exp_pullback(g_disp) + g_v_reg
    grad_z = act_pullback(g_act)
    loss = sum(terms.values())
    return LossEvaluation(float(loss), terms, grad_v, grad_z, disp, lam)


def adam_step(params: dict, grads: dict, state: dict | None, cfg: AdamConfig, t: int):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are not mutated."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    state = state or {}
    new_params, new_state = {}, {}
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k!r} {np.shape(p)}")
        m, s = state.get(k, (np.zeros_like(g), np.zeros_like(g)))
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        s = cfg.beta2 * s + (1.0 - cfg.beta2) * g * g
        new_params[k] = p - cfg.lr * (m / bc1) / (np.sqrt(s / bc2) + cfg.eps)
        new_state[k] = (m, s)
    return new_params, new_state


@dataclass
class RegistrationResult:
    velocity: np.ndarray
    displacement: np.ndarray
    inverse_displacement: np.ndarray
    lambda_field: np.ndarray
    loss_trace: list = field(default_factory=list)
    jacobian: JacobianReport | None = None
    wall_time: float = 0.0
    config: RegistrationConfig | None = None


def _check_image(name, img):
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} image contains non-finite values")
    if img.min() < -1e-6 or img.max() > 1 + 1e-6:
        raise ValueError(f"{name} image intensities must be normalized to [0, 1]")
    return img


def register(
    moving,
    fixed,
    cfg: RegistrationConfig = RegistrationConfig(),
    labels=None,
    callback: Callable[[int, LossEvaluation], None] | None = None,
) -> RegistrationResult:
    """Minimize the total loss over ``(v, z)`` with Adam from ``v = 0``.

    Args:
        moving, fixed: images on the same grid, intensities in ``[0, 1]``.
        cfg: registration settings.
        labels: optional ``(moving_onehot, fixed_onehot)`` stacks for the Dice term.
        callback: called after every loss evaluation as ``callback(iteration, evaluation)``;
            exceptions propagate (the tuner uses this for pruning).

    Raises:
        NonFiniteLossError: a loss term became NaN/inf; names the term.
    """
    moving = _check_image("moving", moving)
    fixed = _check_image("fixed", fixed)
    if moving.shape != fixed.shape:
        raise GridMismatchError(f"moving {moving.shape} and fixed {fixed.shape} grids differ")
    dims = fixed.shape
    start = time.perf_counter()
    wp = WeightParams.initial(dims, cfg.prior, cfg.lambda_resolution_factor)
    params = {"v": np.zeros((len(dims),) + dims), "z": wp.z}
    learn_z = not isinstance(cfg.prior, UniformWeight)
    state = None
    trace = []
    for it in range(cfg.iterations):
        wp.z = params["z"]
        ev = total_loss(fixed, moving, params["v"], wp, cfg, labels)
        for name, value in list(ev.terms.items()) + [("total", ev.loss)]:
            if not np.isfinite(value):
                raise NonFiniteLossError(name, it, value)
        trace.append({"total": ev.loss, **ev.terms})
        if callback is not None:
            callback(it, ev)
        grads = {"v": ev.grad_v, "z": ev.grad_z if learn_z else np.zeros_like(params["z"])}
        if not (np.all(np.isfinite(grads["v"])) and np.all(np.isfinite(grads["z"]))):
            raise NonFiniteLossError("gradient", it, float("nan"))
        params, state = adam_step(params, grads, state, cfg.adam, it + 1)
        if not learn_z:
            params["z"] = wp.z
    wp.z = params["z"]
    v = params["v"]
    disp = exponentiate(v, cfg.n_squaring)
    lam, _ = realize_weights(wp, dims)
    log.debug("registration finished: final loss %.6f", trace[-1]["total"])
    return RegistrationResult(
        velocity=v,
        displacement=disp,
        inverse_displacement=exponentiate(-v, cfg.n_squaring),
        lambda_field=lam,
        loss_trace=trace,
        jacobian=fold_metrics(disp),
        wall_time=time.perf_counter() - start,
        config=cfg,
    )


def gradient_check(loss, params: np.ndarray, eps: float = 1e-5, n_probes: int = 30, seed: int = 0) -> float:
    """Largest relative error between an analytic gradient and central differences.

    Args:
        loss: closure ``x -> (value, grad)`` with ``grad`` shaped like ``x``.
        params: point at which to check.

    Returns:
        ``max |g_fd - g| / max(|g_fd|, |g|, 1e-12)`` over ``n_probes`` random coordinates.
    """
    x = np.array(params, dtype=np.float64)
    _, grad = loss(x)
    grad = np.asarray(grad)
    rng = np.random.default_rng(seed)
    probes = rng.choice(x.size, size=min(n_probes, x.size), replace=False)
    worst = 0.0
    for i in probes:
        idx = np.unravel_index(i, x.shape)
        orig = x[idx]
        x[idx] = orig + eps
        fp, _ = loss(x)
        x[idx] = orig - eps
        fm, _ = loss(x)
        x[idx] = orig
        fd = (fp - fm) / (2 * eps)
        err = abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-12)
        worst = max(worst, err)
    return worst
