"""Image dissimilarity terms with hand-derived adjoints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import GridMismatchError


@dataclass(frozen=True)
class NccConfig:
    """Settings of the windowed NCC likelihood.

    ``window`` is the odd side length of the cubic window (an int applies to every
    axis). ``sigma_i`` weights the data term in the total loss.
    """

    window: int | tuple[int, ...] = 9
    epsilon: float = 1e-5
    sigma_i: float = 1.0

    def __post_init__(self):
        sizes = (self.window,) if np.isscalar(self.window) else tuple(self.window)
        if any(int(w) != w or w < 1 or w % 2 == 0 for w in sizes):
            raise ValueError(f"NCC window must be odd and >= 1, got {self.window}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.sigma_i > 0:
            raise ValueError("sigma_i must be positive")

    def radii(self, ndim: int) -> tuple[int, ...]:
        if np.isscalar(self.window):
            return (int(self.window) // 2,) * ndim
        if len(self.window) != ndim:
            raise ValueError(f"window has {len(self.window)} entries for a {ndim}D image")
        return tuple(int(w) // 2 for w in self.window)


def box_sum(x: np.ndarray, radii) -> np.ndarray:
    """Sum of ``x`` over the window of half-width ``radii`` clipped to the grid.

    The clipped window relation is symmetric (q lies in the window of p iff p lies
    in the window of q), so this operator is self-adjoint.
    """
    out = np.asarray(x, dtype=np.float64)
    for a, r in enumerate(radii):
        n = out.shape[a]
        c = np.cumsum(out, axis=a)
        zero = np.zeros_like(np.take(c, [0], axis=a))
        c = np.concatenate([zero, c], axis=a)
        pos = np.arange(n)
        hi = np.minimum(pos + r, n - 1) + 1
        lo = np.maximum(pos - r, 0)
        out = np.take(c, hi, axis=a) - np.take(c, lo, axis=a)
    return out


def window_counts(shape, radii) -> np.ndarray:
    counts = np.ones(shape)
    for a, (n, r) in enumerate(zip(shape, radii)):
        pos = np.arange(n)
        per_axis = np.minimum(pos + r, n - 1) - np.maximum(pos - r, 0) + 1
        view = [1] * len(shape)
        view[a] = n
        counts = counts * per_axis.reshape(view)
    return counts


def local_correlation(fixed: np.ndarray, warped: np.ndarray, cfg: NccConfig = NccConfig()):
    """Per-voxel windowed Pearson correlation plus the intermediates the adjoint needs."""
    fixed = np.asarray(fixed, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    if fixed.shape != warped.shape:
        raise GridMismatchError(f"image grids differ: {fixed.shape} vs {warped.shape}")
    radii = cfg.radii(fixed.ndim)
    n = window_counts(fixed.shape, radii)
    sf = box_sum(fixed, radii)
    sw = box_sum(warped, radii)
    sff = box_sum(fixed * fixed, radii)
    sww = box_sum(warped * warped, radii)
    sfw = box_sum(fixed * warped, radii)
    mf, mw = sf / n, sw / n
    cov = sfw / n - mf * mw
    vf = np.maximum(sff / n - mf * mf, 0.0)
    vw = np.maximum(sww / n - mw * mw, 0.0)
    denom = np.sqrt(vf * vw)
    guarded = denom <= cfg.epsilon
    cc = cov / np.where(guarded, cfg.epsilon, denom)
    return cc, dict(n=n, sf=sf, sw=sw, cov=cov, vf=vf, vw=vw, denom=denom, guarded=guarded, radii=radii)


def ncc_loss(fixed: np.ndarray, warped: np.ndarray, cfg: NccConfig = NccConfig()):
    """Negative mean local correlation and its gradient with respect to ``warped``.

    Returns:
        ``(energy, adjoint)`` with ``energy`` in ``[-1, 1]``. ``sigma_i`` is not
        applied here; the total loss scales the term.
    """
    cc, s = local_correlation(fixed, warped, cfg)
    fixed = np.asarray(fixed, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    size = cc.size
    energy = -float(np.mean(cc))

    n, guarded = s["n"], s["guarded"]
    safe = np.where(guarded, 1.0, s["denom"])
    # cc = cov / D with D = sqrt(vf vw); below the epsilon floor D is a constant.
    dcc_dcov = np.where(guarded, 1.0 / cfg.epsilon, 1.0 / safe)
    dcc_dvw = np.where(guarded, 0.0, -s["cov"] * s["vf"] / (2.0 * safe**3))
    d_sw = (-dcc_dcov * s["sf"] - 2.0 * dcc_dvw * s["sw"]) / n**2
    d_sfw = dcc_dcov / n
    d_sww = dcc_dvw / n
    r = s["radii"]
    adjoint = box_sum(d_sw, r) + 2.0 * warped * box_sum(d_sww, r) + fixed * box_sum(d_sfw, r)
    return energy, -adjoint / size


def soft_dice_loss(warped_labels: np.ndarray, fixed_labels: np.ndarray, eps: float = 1e-6):
    """One minus the class-averaged soft Dice of two one-hot stacks ``(K, *dims)``."""
    a = np.asarray(warped_labels, dtype=np.float64)
    b = np.asarray(fixed_labels, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"class count mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape != b.shape:
        raise GridMismatchError(f"label grids differ: {a.shape} vs {b.shape}")
    axes = tuple(range(1, a.ndim))
    inter = np.sum(a * b, axis=axes)
    denom = np.sum(a, axis=axes) + np.sum(b, axis=axes) + eps
    dice = 2.0 * inter / denom
    k = a.shape[0]
    view = (k,) + (1,) * (a.ndim - 1)
    grad = -(2.0 * b / denom.reshape(view) - (2.0 * inter / denom**2).reshape(view)) / k
    return 1.0 - float(np.mean(dice)), grad


def one_hot(labels: np.ndarray, classes) -> np.ndarray:
    labels = np.asarray(labels)
    return np.stack([(labels == c).astype(np.float64) for c in classes])
