"""Synthetic images and deformations: Perlin textures, random shapes, sliding-motion pairs."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .diffeo import exponentiate
from .field import warp, warp_nearest


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin_noise(dims, cell_size: float, seed: int) -> np.ndarray:
    """Classic gradient noise with quintic fading; one lattice cell spans ``cell_size`` voxels.

    Gradients are random unit vectors, so values are bounded by ``sqrt(d) / 2 <= 1``.
    """
    if cell_size < 2:
        raise ValueError(f"cell_size must be >= 2, got {cell_size}")
    dims = tuple(int(n) for n in dims)
    d = len(dims)
    rng = np.random.default_rng(seed)
    lattice = tuple(int(np.ceil((n - 1) / cell_size)) + 2 for n in dims)
    grads = rng.normal(size=(d,) + lattice)
    grads /= np.linalg.norm(grads, axis=0, keepdims=True)

    pos = [np.arange(n) / cell_size for n in dims]
    cell = [np.floor(p).astype(np.intp) for p in pos]
    frac = [p - c for p, c in zip(pos, cell)]
    mesh = lambda arrs: np.meshgrid(*arrs, indexing="ij")
    cell_m, frac_m = mesh(cell), mesh(frac)
    fade_m = [_fade(f) for f in frac_m]

    out = np.zeros(dims)
    for corner in itertools.product((0, 1), repeat=d):
        idx = tuple(c + b for c, b in zip(cell_m, corner))
        dot = sum(grads[a][idx] * (frac_m[a] - corner[a]) for a in range(d))
        weight = np.ones(dims)
        for a, b in enumerate(corner):
            weight = weight * (fade_m[a] if b else 1.0 - fade_m[a])
        out += weight * dot
    return out


def _child_seed(seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *keys])


def random_shapes_image(dims, n_labels: int, seed: int, min_fraction: float = 0.005, max_attempts: int = 50):
    """Random-shape image from the argmax of mixed-scale Perlin channels.

    Each label gets a uniform random intensity; Gaussian noise with a per-image
    standard deviation in ``[0, 0.05]`` is added and the result clipped to ``[0, 1]``.
    Draws are repeated (deterministically) until every label covers at least
    ``min_fraction`` of the voxels.

    Returns:
        ``(image, labels)`` with labels in ``1..n_labels``.
    """
    if n_labels < 2:
        raise ValueError("n_labels must be >= 2")
    dims = tuple(int(n) for n in dims)
    base = max(4.0, min(dims) / 4)
    scales = [base, base / 2, base / 4]
    for attempt in range(max_attempts):
        ss = _child_seed(seed, attempt)
        rng = np.random.default_rng(ss)
        channels = []
        for k in range(n_labels):
            weights = rng.uniform(0.2, 1.0, size=len(scales))
            ch = sum(
                w * perlin_noise(dims, max(2.0, s), int(rng.integers(2**31))) for w, s in zip(weights, scales)
            )
            channels.append(ch)
        labels = np.argmax(np.stack(channels), axis=0) + 1
        counts = np.bincount(labels.ravel(), minlength=n_labels + 1)[1:]
        if counts.min() >= min_fraction * labels.size or attempt == max_attempts - 1:
            break
    intensity = rng.uniform(0.0, 1.0, size=n_labels + 1)
    sigma = rng.uniform(0.0, 0.05)
    image = intensity[labels] + sigma * rng.normal(size=dims)
    return np.clip(image, 0.0, 1.0), labels.astype(np.int32)


def random_smooth_velocity(dims, max_mag: float, smooth_cells: float, seed: int) -> np.ndarray:
    """Per-component Perlin noise rescaled so the largest vector norm equals ``max_mag``."""
    if not max_mag > 0:
        raise ValueError("max_mag must be positive")
    dims = tuple(int(n) for n in dims)
    ss = _child_seed(seed).spawn(len(dims))
    v = np.stack([perlin_noise(dims, smooth_cells, int(s.generate_state(1)[0])) for s in ss])
    norm = np.sqrt(np.sum(v * v, axis=0)).max()
    return v * (max_mag / norm)


@dataclass(frozen=True)
class SlideScenario:
    """A 2D sliding-motion pair.

    ``boundary`` is ``"vertical"`` (interface at column ``position``, right side
    slides along axis 0), ``"horizontal"`` (interface at row ``position``, lower
    side slides along axis 1), ``"strip"`` (columns ``[position, position + width)``
    slide along axis 0) or ``"circle"`` (a disc of radius ``width`` centred in the
    grid is translated along axis 1).
    """

    dims: tuple[int, int] = (128, 128)
    boundary: str = "vertical"
    offset: float = 6.0
    position: int = 64
    width: int = 32
    seed: int = 0
    band_width: int = 4
    texture_cell: float = 16.0

    def __post_init__(self):
        if len(self.dims) != 2:
            raise ValueError("sliding scenarios are 2D")
        if self.boundary not in ("vertical", "horizontal", "strip", "circle"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if not abs(self.offset) < min(self.dims) / 4:
            raise ValueError("offset magnitude must be below a quarter of the smallest dimension")
        if self.band_width < 1 or self.band_width > min(self.dims) // 2:
            raise ValueError("band_width must fit inside the domain")


def _interface(sc: SlideScenario):
    """Sliding-region mask, signed distance to the interface, and slide direction axis."""
    rows, cols = np.meshgrid(np.arange(sc.dims[0]), np.arange(sc.dims[1]), indexing="ij")
    if sc.boundary == "vertical":
        dist = cols - (sc.position - 0.5)
        return dist > 0, np.abs(dist), 0
    if sc.boundary == "horizontal":
        dist = rows - (sc.position - 0.5)
        return dist > 0, np.abs(dist), 1
    if sc.boundary == "strip":
        lo, hi = sc.position - 0.5, sc.position + sc.width - 0.5
        inside = (cols > lo) & (cols < hi)
        return inside, np.minimum(np.abs(cols - lo), np.abs(cols - hi)), 0
    centre = [(n - 1) / 2 for n in sc.dims]
    r = np.hypot(rows - centre[0], cols - centre[1])
    return r < sc.width, np.abs(r - sc.width), 1


def sliding_pair_2d(sc: SlideScenario):
    """Build a sliding-motion pair.

    Returns:
        dict with ``moving``, ``fixed`` images in ``[0, 1]``, ``true_disp``
        ``(2, *dims)`` (constant ``offset`` inside the sliding region, zero outside),
        ``mask`` (band of ``band_width`` voxels around the interface), ``labels``
        (1 outside, 2 inside the sliding region), ``fixed_labels`` and ``foreground``.
    """
    inside, dist, axis = _interface(sc)
    ss = _child_seed(sc.seed).spawn(4)
    seeds = [int(s.generate_state(1)[0]) for s in ss]
    tex_out = perlin_noise(sc.dims, sc.texture_cell, seeds[0]) + 0.5 * perlin_noise(sc.dims, sc.texture_cell / 2, seeds[1])
    tex_in = perlin_noise(sc.dims, sc.texture_cell, seeds[2]) + 0.5 * perlin_noise(sc.dims, sc.texture_cell / 2, seeds[3])
    # Textures are bounded by 1.5 * sqrt(2)/2 < 1.07; map each into its own intensity band.
    moving = np.where(inside, 0.6 + 0.28 * tex_in, 0.35 + 0.28 * tex_out)
    moving = np.clip(moving, 0.0, 1.0)

    true_disp = np.zeros((2,) + tuple(sc.dims))
    true_disp[axis][inside] = sc.offset
    fixed = warp(moving, true_disp)
    half = sc.band_width / 2
    mask = dist <= half
    labels = np.where(inside, 2, 1).astype(np.int32)
    return {
        "moving": moving,
        "fixed": fixed,
        "true_disp": true_disp,
        "mask": mask,
        "labels": labels,
        "fixed_labels": warp_nearest(labels, true_disp),
        "foreground": evaluation_foreground(sc),
    }


def evaluation_foreground(sc: SlideScenario) -> np.ndarray:
    """Voxels whose true correspondence is observable: away from the image border by the offset.

    Near the border the clamp-to-edge resampling replicates edge rows, so truth
    there is not recoverable from the images.
    """
    margin = int(np.ceil(abs(sc.offset))) + 1
    fg = np.zeros(sc.dims, dtype=bool)
    fg[margin:-margin, margin:-margin] = True
    return fg


def shift_pair(dims=(64, 64), shift=(3.0, 0.0), seed: int = 0, texture_cell: float = 12.0):
    """Textured image and its copy translated by a constant ``shift`` (voxels)."""
    dims = tuple(int(n) for n in dims)
    ss = _child_seed(seed).spawn(2)
    tex = perlin_noise(dims, texture_cell, int(ss[0].generate_state(1)[0]))
    tex = tex + 0.5 * perlin_noise(dims, texture_cell / 2, int(ss[1].generate_state(1)[0]))
    moving = np.clip(0.5 + 0.45 * tex, 0.0, 1.0)
    true_disp = np.broadcast_to(np.asarray(shift, dtype=np.float64).reshape((-1,) + (1,) * len(dims)), (len(dims),) + dims).copy()
    fixed = warp(moving, true_disp)
    margin = int(np.ceil(np.max(np.abs(shift)))) + 1
    fg = np.zeros(dims, dtype=bool)
    fg[tuple(slice(margin, -margin) for _ in dims)] = True
    return {"moving": moving, "fixed": fixed, "true_disp": true_disp, "foreground": fg}


@dataclass(frozen=True)
class ShapesScenario:
    """Random-shape label image deformed by the exponential of a smooth random velocity."""

    dims: tuple[int, ...] = (64, 64)
    n_labels: int = 4
    max_velocity: float = 3.0
    smooth_cells: float = 24.0
    seed: int = 0


def deformed_shapes_pair(sc: ShapesScenario):
    """Same keys as :func:`sliding_pair_2d`; ``mask`` is empty."""
    moving, labels = random_shapes_image(sc.dims, sc.n_labels, sc.seed)
    v = random_smooth_velocity(sc.dims, sc.max_velocity, sc.smooth_cells, sc.seed + 1)
    true_disp = exponentiate(v)
    margin = int(np.ceil(np.abs(true_disp).max())) + 1
    fg = np.zeros(sc.dims, dtype=bool)
    fg[tuple(slice(margin, -margin) for _ in sc.dims)] = True
    return {
        "moving": moving,
        "fixed": warp(moving, true_disp),
        "true_disp": true_disp,
        "mask": np.zeros(sc.dims, dtype=bool),
        "labels": labels,
        "fixed_labels": warp_nearest(labels, true_disp),
        "foreground": fg,
    }


def make_pair(sc):
    """Dispatch a scenario description to its generator."""
    if isinstance(sc, SlideScenario):
        return sliding_pair_2d(sc)
    if isinstance(sc, ShapesScenario):
        return deformed_shapes_pair(sc)
    raise TypeError(f"unknown scenario type {type(sc).__name__}")


SCENARIOS = {
    "slide-v6": SlideScenario(boundary="vertical", offset=6.0, position=64, seed=11),
    "slide-h4": SlideScenario(boundary="horizontal", offset=4.0, position=64, seed=12),
    "slide-strip4": SlideScenario(boundary="strip", offset=4.0, position=48, width=32, seed=13),
    "shapes-64": ShapesScenario(seed=21),
}
