"""Atomic file output: NPY volumes with JSON sidecars, landmark CSVs, JSON documents."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .metrics import LandmarkSet

AXIS_NAMES = ("x", "y", "z")
_DTYPES = {"f": "<f8", "i": "<i4", "u": "<i4", "b": "<i4"}


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, canonical_json(obj))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def _storable(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        target = "<f4"
    else:
        target = _DTYPES.get(arr.dtype.kind)
        if target is None:
            raise TypeError(f"cannot store arrays of dtype {arr.dtype}")
    return np.ascontiguousarray(arr.astype(target, copy=False))


def npy_bytes(arr: np.ndarray) -> bytes:
    """NPY v1.0 encoding (little-endian, C order) of ``arr``."""
    buf = io.BytesIO()
    np.lib.format.write_array(buf, _storable(arr), version=(1, 0), allow_pickle=False)
    return buf.getvalue()


def save_volume(path, arr: np.ndarray, spacing=None, vector: bool = False, extra: dict | None = None) -> None:
    """Store ``arr`` as NPY plus a sidecar JSON with spacing and axis order.

    For vector fields (``vector=True``) the leading axis holds components.
    """
    arr = np.asarray(arr)
    spatial = arr.shape[1:] if vector else arr.shape
    d = len(spatial)
    spacing = [1.0] * d if spacing is None else [float(s) for s in spacing]
    if len(spacing) != d:
        raise ValueError(f"{d} spacing values required, got {len(spacing)}")
    meta = {
        "spacing": spacing,
        "axis_order": list(AXIS_NAMES[:d]),
        "vector": bool(vector),
        "shape": list(arr.shape),
    }
    if extra:
        meta.update(extra)
    atomic_write_bytes(path, npy_bytes(arr))
    write_json(sidecar_path(path), meta)


def load_volume(path) -> tuple[np.ndarray, dict]:
    """Load an NPY volume and its sidecar (defaults: unit spacing, scalar)."""
    path = Path(path)
    arr = np.load(path, allow_pickle=False)
    side = sidecar_path(path)
    meta = read_json(side) if side.exists() else {}
    vector = bool(meta.get("vector", False))
    d = arr.ndim - 1 if vector else arr.ndim
    meta.setdefault("spacing", [1.0] * d)
    meta.setdefault("axis_order", list(AXIS_NAMES[:d]))
    meta["vector"] = vector
    return arr, meta


def landmark_csv(lms: LandmarkSet) -> str:
    d = lms.points.shape[1]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(AXIS_NAMES[:d])
    for row in lms.points:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def write_landmarks(path, lms: LandmarkSet) -> None:
    """CSV with header ``x,y[,z]`` in mm; column ``k`` is array axis ``k``."""
    atomic_write_text(path, landmark_csv(lms))


def read_landmarks(path) -> LandmarkSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty landmark file")
    header = [h.strip() for h in rows[0]]
    if header not in (["x", "y"], ["x", "y", "z"]):
        raise ValueError(f"{path}: landmark header must be x,y or x,y,z, got {','.join(header)}")
    pts = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    return LandmarkSet(pts.reshape(-1, len(header)))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
