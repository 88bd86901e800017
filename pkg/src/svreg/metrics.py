"""Registration quality metrics: Dice overlap, landmark TRE and report assembly."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .field import GridMismatchError, check_vector_field, sample_linear, warp_nearest
from .regularizer import prior_to_dict

REPORT_VERSION = 1


@dataclass
class LandmarkSet:
    """Physical landmark coordinates in mm, one row per point."""

    points: np.ndarray
    names: list[str] | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if pts.size and pts.ndim != 2:
            raise ValueError("landmark points must be an (n, d) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        if self.names is not None and len(self.names) != len(pts):
            raise ValueError("one name per landmark is required")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


def dice(labels_a: np.ndarray, labels_b: np.ndarray, classes=None) -> dict:
    """Per-class Dice overlap and their mean.

    Classes absent from both maps are reported as ``None`` and left out of the mean.
    By default every non-zero label present in either map is scored.

    Returns:
        ``{"per_class": {k: score | None}, "mean": float | None}``.
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise GridMismatchError(f"label grids differ: {a.shape} vs {b.shape}")
    if classes is None:
        classes = sorted(int(c) for c in np.union1d(np.unique(a), np.unique(b)) if c != 0)
    per_class = {}
    for k in classes:
        in_a = a == k
        in_b = b == k
        total = int(in_a.sum()) + int(in_b.sum())
        per_class[int(k)] = None if total == 0 else 2.0 * int(np.sum(in_a & in_b)) / total
    defined = [s for s in per_class.values() if s is not None]
    return {"per_class": per_class, "mean": float(np.mean(defined)) if defined else None}


@dataclass
class TreResult:
    distances: np.ndarray
    excluded: list[int] = field(default_factory=list)

    @property
    def mean(self) -> float | None:
        return float(self.distances.mean()) if len(self.distances) else None


def tre(moving_lms: LandmarkSet, fixed_lms: LandmarkSet, disp: np.ndarray, spacing=None) -> TreResult:
    """Target registration error in mm.

    Each fixed landmark ``x_f`` (mm, converted to voxels) is mapped to
    ``x_f + disp(x_f)`` and compared with its paired moving landmark. ``disp``
    resamples the moving image into fixed space. Landmarks outside the grid are
    excluded and their indices returned.
    """
    dims = check_vector_field(disp)
    d = len(dims)
    spacing = np.ones(d) if spacing is None else np.asarray(spacing, dtype=np.float64)
    if len(moving_lms) != len(fixed_lms):
        raise ValueError(f"landmark counts differ: {len(moving_lms)} vs {len(fixed_lms)}")
    if len(fixed_lms) == 0:
        return TreResult(np.zeros(0))
    if fixed_lms.points.shape[1] != d or moving_lms.points.shape[1] != d:
        raise ValueError(f"landmarks must be {d}-dimensional")
    fixed_vox = fixed_lms.points / spacing
    upper = np.asarray(dims) - 1
    inside = np.all((fixed_vox >= 0) & (fixed_vox <= upper), axis=1)
    excluded = [int(i) for i in np.flatnonzero(~inside)]
    pts = fixed_vox[inside]
    if len(pts) == 0:
        return TreResult(np.zeros(0), excluded)
    offset = np.stack([sample_linear(disp[a], pts) for a in range(d)], axis=1)
    mapped_mm = (pts + offset) * spacing
    dist = np.linalg.norm(mapped_mm - moving_lms.points[inside], axis=1)
    return TreResult(dist, excluded)


def report(result, labels=None, landmarks=None) -> dict:
    """JSON-ready summary of a registration result.

    Args:
        result: a ``RegistrationResult``.
        labels: optional ``(moving_labels, fixed_labels)`` integer maps; the moving
            map is warped with nearest-neighbour sampling before scoring.
        landmarks: optional ``(moving_lms, fixed_lms, spacing)``.
    """
    jac = result.jacobian.summary() if result.jacobian is not None else {}
    metrics = {key: float(val) for key, val in jac.items()}
    if labels is not None:
        moving_labels, fixed_labels = labels
        scores = dice(warp_nearest(moving_labels, result.displacement), fixed_labels)
        metrics["dice_mean"] = scores["mean"]
        metrics["dice_per_class"] = {str(k): v for k, v in scores["per_class"].items()}
    if landmarks is not None:
        moving_lms, fixed_lms, spacing = landmarks
        res = tre(moving_lms, fixed_lms, result.displacement, spacing)
        metrics["tre_mean_mm"] = res.mean
        metrics["tre_mm"] = [float(x) for x in res.distances]
        metrics["tre_excluded"] = res.excluded

    trace = result.loss_trace
    cfg = result.config
    out = {
        "version": REPORT_VERSION,
        "metrics": metrics,
        "loss": {
            "iterations": len(trace),
            "initial": {k: float(v) for k, v in trace[0].items()} if trace else None,
            "final": {k: float(v) for k, v in trace[-1].items()} if trace else None,
        },
        "lambda": {
            "mean": float(result.lambda_field.mean()),
            "min": float(result.lambda_field.min()),
            "max": float(result.lambda_field.max()),
        },
        "timing": {"wall_time_s": float(result.wall_time)},
    }
    if cfg is not None:
        out["hyperparameters"] = {
            "prior": prior_to_dict(cfg.prior),
            "iterations": cfg.iterations,
            "n_squaring": cfg.n_squaring,
            "learning_rate": cfg.adam.lr,
            "ncc_window": cfg.ncc.window,
            "sigma_i": cfg.ncc.sigma_i,
            "lambda_resolution_factor": cfg.lambda_resolution_factor,
            "dice_weight": cfg.dice_weight,
        }
    return out
