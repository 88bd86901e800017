"""Voxel grids, multilinear sampling, warping and composition.

Array conventions used across the package:

* a scalar field is an ``ndarray`` of shape ``dims``;
* a vector field is an ``ndarray`` of shape ``(d, *dims)`` whose component ``a``
  is a displacement in voxels along array axis ``a``.

Sampling outside the grid replicates the border (coordinates are clamped into
``[0, dim - 1]`` per axis).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field

import numpy as np


class GridMismatchError(ValueError):
    """Two fields that must share a grid do not."""


@dataclass(frozen=True)
class Grid:
    """Axis-aligned voxel lattice.

    Args:
        dims: number of voxels per axis (2 or 3 axes, each >= 2).
        spacing: physical voxel size per axis in millimetres.
    """

    dims: tuple[int, ...]
    spacing: tuple[float, ...] = dc_field(default=())

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) not in (2, 3):
            raise ValueError(f"grid must be 2D or 3D, got {len(dims)} axes")
        if any(n < 2 for n in dims):
            raise ValueError(f"every grid dimension must be >= 2, got {dims}")
        spacing = tuple(float(s) for s in self.spacing) or (1.0,) * len(dims)
        if len(spacing) != len(dims):
            raise ValueError("spacing must have one entry per axis")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def identity(self) -> np.ndarray:
        """Voxel coordinates of every grid point, shape ``(d, *dims)``."""
        return identity_coords(self.dims)

    @classmethod
    def of(cls, array: np.ndarray, vector: bool = False, spacing=()) -> "Grid":
        return cls(array.shape[1:] if vector else array.shape, spacing)


def identity_coords(dims) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))


def check_vector_field(disp: np.ndarray, dims=None) -> tuple[int, ...]:
    """Validate a ``(d, *dims)`` array and return its spatial dims."""
    disp = np.asarray(disp)
    if disp.ndim not in (3, 4) or disp.shape[0] != disp.ndim - 1:
        raise ValueError(f"vector field must have shape (d, *dims), got {disp.shape}")
    spatial = disp.shape[1:]
    if dims is not None and tuple(dims) != spatial:
        raise GridMismatchError(f"field grid {tuple(dims)} does not match displacement grid {spatial}")
    return spatial


class Stencil:
    """Multilinear interpolation weights for a fixed set of sample coordinates.

    Building the stencil once lets the forward sample, its adjoint scatter and the
    spatial derivative of the interpolant all share index/weight computation.
    """

    def __init__(self, coords: np.ndarray, dims):
        coords = np.asarray(coords, dtype=np.float64)
        dims = tuple(dims)
        d = len(dims)
        if coords.shape[0] != d:
            raise ValueError(f"coordinates must have leading dimension {d}, got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("sample coordinates must be finite")
        self.dims = dims
        self.shape = coords.shape[1:]
        strides = np.cumprod((1,) + dims[:0:-1])[::-1]
        lo_idx, hi_idx, frac, inside = [], [], [], []
        for a, n in enumerate(dims):
            c = coords[a].reshape(-1)
            inside.append((c >= 0) & (c <= n - 1))
            c = np.clip(c, 0.0, n - 1.0)
            i0 = np.floor(c).astype(np.intp)
            i1 = np.minimum(i0 + 1, n - 1)
            frac.append(c - i0)
            lo_idx.append(i0 * strides[a])
            hi_idx.append(i1 * strides[a])
        self.frac = frac
        self.inside = inside
        # Corner order follows itertools.product, so the last axis varies fastest.
        self.bits = list(itertools.product((0, 1), repeat=d))
        self.corners = [
            sum(hi_idx[a] if b else lo_idx[a] for a, b in enumerate(bits)) for bits in self.bits
        ]

    def _flat(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        lead = values.shape[: values.ndim - len(self.dims)]
        if values.shape[len(lead):] != self.dims:
            raise GridMismatchError(f"field shape {values.shape} does not match grid {self.dims}")
        return values.reshape(lead + (-1,))

    def gather(self, values: np.ndarray) -> list[np.ndarray]:
        """Field values at the ``2**d`` cell corners of every sample point."""
        flat = self._flat(values)
        return [np.take(flat, idx, axis=-1) for idx in self.corners]

    def _lerp(self, vals: list[np.ndarray], axes) -> np.ndarray:
        # Nested lerps a + t (b - a) keep constants and integer nodes exact.
        for a in reversed(axes):
            t = self.frac[a]
            vals = [v0 + t * (v1 - v0) for v0, v1 in zip(vals[0::2], vals[1::2])]
        return vals[0]

    def sample(self, values: np.ndarray, corners=None) -> np.ndarray:
        """Interpolate ``values`` (shape ``(*lead, *dims)``) at the stencil coordinates."""
        vals = self.gather(values) if corners is None else corners
        out = self._lerp(vals, list(range(len(self.dims))))
        return out.reshape(out.shape[:-1] + self.shape)

    def weights(self) -> list[np.ndarray]:
        out = []
        for bits in self.bits:
            w = np.ones_like(self.frac[0])
            for a, b in enumerate(bits):
                w = w * (self.frac[a] if b else 1.0 - self.frac[a])
            out.append(w)
        return out

    def scatter(self, grad: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`sample`: spread ``grad`` back onto the grid nodes."""
        grad = np.asarray(grad, dtype=np.float64)
        lead = grad.shape[: grad.ndim - len(self.shape)]
        g = grad.reshape(lead + (-1,))
        size = int(np.prod(self.dims))
        idx = np.concatenate(self.corners)
        w = np.stack(self.weights())
        out = np.empty(lead + (size,))
        for k in np.ndindex(*lead):
            out[k] = np.bincount(idx, weights=(w * g[k]).ravel(), minlength=size)
        return out.reshape(lead + self.dims)

    def spatial_derivative(self, values: np.ndarray, corners=None) -> np.ndarray:
        """Derivative of the interpolant with respect to each sample coordinate.

        Returns shape ``(d, *lead, *sample_shape)``. Clamped coordinates get zero
        derivative; on cell faces the derivative of the cell above is used.
        """
        vals = self.gather(values) if corners is None else corners
        d = len(self.dims)
        out = []
        for a in range(d):
            # Differences across axis a, then interpolate over the remaining axes.
            step = 2 ** (d - 1 - a)
            diffs = [vals[k + step] - vals[k] for k in range(len(vals)) if not (k // step) % 2]
            acc = self._lerp(diffs, [b for b in range(d) if b != a]) * self.inside[a]
            out.append(acc.reshape(acc.shape[:-1] + self.shape))
        return np.stack(out)


def sample_linear(field: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of a scalar field with clamp-to-edge.

    Args:
        field: scalar field of shape ``dims``.
        coords: voxel coordinates, shape ``(n, d)`` (a list of points).

    Returns:
        Array of ``n`` interpolated values.
    """
    field = np.asarray(field, dtype=np.float64)
    pts = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    if pts.shape[1] != field.ndim:
        raise ValueError(f"points must be {field.ndim}-dimensional, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample coordinates must be finite")
    return Stencil(pts.T, field.shape).sample(field)


def warp(field: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Resample ``field`` at ``p + disp(p)`` for every voxel ``p``.

    ``field`` may be scalar (``dims``) or carry leading channels (``(C, *dims)``).
    """
    dims = check_vector_field(disp)
    field = np.asarray(field, dtype=np.float64)
    if field.shape[field.ndim - len(dims):] != dims:
        raise GridMismatchError(f"field shape {field.shape} does not match displacement grid {dims}")
    return Stencil(identity_coords(dims) + disp, dims).sample(field)


def warp_nearest(labels: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Nearest-neighbour resampling for label maps; keeps the input dtype."""
    dims = check_vector_field(disp)
    labels = np.asarray(labels)
    if labels.shape != dims:
        raise GridMismatchError(f"label shape {labels.shape} does not match displacement grid {dims}")
    coords = identity_coords(dims) + disp
    idx = tuple(
        np.clip(np.floor(coords[a] + 0.5), 0, n - 1).astype(np.intp) for a, n in enumerate(dims)
    )
    return labels[idx]


def compose(outer_disp: np.ndarray, inner_disp: np.ndarray) -> np.ndarray:
    """Displacement of ``phi_outer o phi_inner``: ``outer(p + inner(p)) + inner(p)``."""
    dims = check_vector_field(inner_disp)
    check_vector_field(outer_disp, dims)
    return Stencil(identity_coords(dims) + inner_disp, dims).sample(outer_disp) + inner_disp


def compose_vjp(outer_disp: np.ndarray, inner_disp: np.ndarray):
    """Compose and return a pullback ``g -> (g_outer, g_inner)``."""
    dims = check_vector_field(inner_disp)
    check_vector_field(outer_disp, dims)
    st = Stencil(identity_coords(dims) + inner_disp, dims)
    corners = st.gather(outer_disp)
    result = st.sample(outer_disp, corners) + inner_disp

    def pullback(g):
        g_outer = st.scatter(g)
        # d/d inner_a: sum_c g_c * d outer_c / d x_a, plus the identity term.
        deriv = st.spatial_derivative(outer_disp, corners)  # (d_a, c, *dims)
        g_inner = np.einsum("ac...,c...->a...", deriv, g) + g
        return g_outer, g_inner

    return result, pullback


def _axis_lerp_table(src: int, dst: int):
    j = np.arange(dst)
    c = j * (src - 1) / (dst - 1)
    i0 = np.minimum(np.floor(c).astype(np.intp), src - 1)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, c - i0


def upsample_matrix(src: int, dst: int) -> np.ndarray:
    """Dense ``(dst, src)`` align-corners linear interpolation matrix."""
    i0, i1, t = _axis_lerp_table(src, dst)
    m = np.zeros((dst, src))
    np.add.at(m, (np.arange(dst), i0), 1.0 - t)
    np.add.at(m, (np.arange(dst), i1), t)
    return m


def upsample_linear(field: np.ndarray, target_dims) -> np.ndarray:
    """Align-corners multilinear upsampling of a scalar field to ``target_dims``."""
    field = np.asarray(field, dtype=np.float64)
    target_dims = tuple(int(n) for n in target_dims)
    if len(target_dims) != field.ndim:
        raise ValueError("target grid must have the same number of axes")
    if any(t < s for t, s in zip(target_dims, field.shape)):
        raise ValueError(f"target {target_dims} is smaller than source {field.shape}")
    out = field
    for a, (s, t) in enumerate(zip(field.shape, target_dims)):
        if s == t:
            continue
        i0, i1, frac = _axis_lerp_table(s, t)
        shape = [1] * out.ndim
        shape[a] = t
        v0 = np.take(out, i0, axis=a)
        v1 = np.take(out, i1, axis=a)
        out = v0 + frac.reshape(shape) * (v1 - v0)
    return out


def upsample_linear_adjoint(grad: np.ndarray, source_dims) -> np.ndarray:
    """Transpose of :func:`upsample_linear` applied to a full-resolution gradient."""
    out = np.asarray(grad, dtype=np.float64)
    for a, s in enumerate(source_dims):
        t = out.shape[a]
        if s == t:
            continue
        m = upsample_matrix(s, t)
        out = np.moveaxis(np.tensordot(m.T, np.moveaxis(out, a, 0), axes=1), 0, a)
    return out


def forward_gradient(field: np.ndarray, vector: bool = False) -> list[np.ndarray]:
    """Forward differences per spatial axis, zero on each axis' last slice.

    Args:
        field: scalar field, or vector field ``(d, *dims)`` when ``vector`` is set.

    Returns:
        One array per spatial axis, each shaped like ``field``.
    """
    field = np.asarray(field, dtype=np.float64)
    offset = 1 if vector else 0
    out = []
    for a in range(offset, field.ndim):
        diff = np.zeros_like(field)
        lead = [slice(None)] * field.ndim
        lead[a] = slice(0, -1)
        diff[tuple(lead)] = np.diff(field, axis=a)
        out.append(diff)
    return out
