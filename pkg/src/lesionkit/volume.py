"""Volume container, validation helpers and ``.npy`` I/O.

Arrays are held in memory indexed ``[x, y, z]``.  On disk the raw data is
laid out x-fastest, which for a C-ordered ``.npy`` file means the header
shape is ``(nz, ny, nx)``.  Voxel spacing (mm) lives in a JSON sidecar
next to the array file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import numpy.lib.format as npy_format

PathLike = Union[str, Path]

SUPPORTED_DTYPES = {
    "<f4": np.dtype("<f4"),
    "<f8": np.dtype("<f8"),
    "|u1": np.dtype("|u1"),
    "<i4": np.dtype("<i4"),
}


class VolumeFormatError(ValueError):
    """Raised when an array file or its sidecar cannot be interpreted."""


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense 3D scalar grid with physical voxel spacing.

    ``data`` is stored read-only and keeps its element type so that a
    save/load round trip is bit-exact.  Numerical code should go through
    :meth:`values`, which always returns float64.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.dtype == bool:
            data = data.astype(np.uint8)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be 3D with positive dims, got shape {data.shape}")
        if data.dtype.kind not in "fiu":
            raise ValueError(f"unsupported element type {data.dtype}")
        if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive finite values, got {self.spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def values(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


def linear_index(x, y, z, dims):
    """x-fastest linear index of voxel ``(x, y, z)``."""
    nx, ny, _ = dims
    return x + nx * (y + ny * z)


def unravel_index(index, dims):
    """Inverse of :func:`linear_index`."""
    return np.unravel_index(index, dims, order="F")


def linear_indices(dims) -> np.ndarray:
    """Array indexed ``[x, y, z]`` holding each voxel's linear index."""
    return np.arange(int(np.prod(dims)), dtype=np.int64).reshape(dims, order="F")


def as_array(v) -> np.ndarray:
    """Unwrap a :class:`Volume` (or pass an array through) as float64."""
    if isinstance(v, Volume):
        return v.values()
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {arr.shape}")
    return arr


def spacing_of(*vols, default=(1.0, 1.0, 1.0)) -> tuple[float, float, float]:
    """Common spacing of the given volumes; plain arrays contribute nothing."""
    found = {v.spacing for v in vols if isinstance(v, Volume)}
    if len(found) > 1:
        raise ValueError(f"spacing mismatch: {sorted(found)}")
    return found.pop() if found else tuple(float(s) for s in default)


def as_mask(v) -> np.ndarray:
    """Boolean view of a binary mask; rejects values other than 0 and 1."""
    arr = as_array(v)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("mask values must be exactly 0 or 1")
    return arr == 1


def as_probability(v) -> np.ndarray:
    arr = as_array(v)
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    return arr


def check_same_dims(*arrays) -> None:
    shapes = {np.shape(a.data if isinstance(a, Volume) else a) for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"dimension mismatch: {sorted(shapes)}")


def binarize(v, threshold: float = 0.5) -> Volume:
    """Mask of voxels strictly greater than ``threshold``."""
    spacing = v.spacing if isinstance(v, Volume) else (1.0, 1.0, 1.0)
    return Volume((as_array(v) > threshold).astype(np.uint8), spacing)


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    stem = path.name[:-4] if path.name.endswith(".npy") else path.name
    return path.with_name(stem + ".spacing.json")


def save_volume(v: Volume, path: PathLike) -> None:
    """Write ``v`` as a version 1.0 ``.npy`` file plus spacing sidecar."""
    path = Path(path)
    dtype = v.data.dtype.newbyteorder("<") if v.data.dtype.itemsize > 1 else v.data.dtype
    if dtype.str not in SUPPORTED_DTYPES:
        raise VolumeFormatError(f"unsupported element type {v.data.dtype}")
    raw = np.ascontiguousarray(v.data.astype(dtype, copy=False).transpose(2, 1, 0))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        npy_format.write_array(fh, raw, version=(1, 0), allow_pickle=False)
    sidecar_path(path).write_text(json.dumps({"spacing_mm": list(v.spacing)}) + "\n")


def load_volume(path: PathLike) -> Volume:
    """Read a volume written by :func:`save_volume` (or any compatible file)."""
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            version = npy_format.read_magic(fh)
        except ValueError as exc:
            raise VolumeFormatError(f"{path}: malformed header ({exc})") from None
        if version != (1, 0):
            raise VolumeFormatError(f"{path}: malformed header (unsupported version {version})")
        try:
            shape, fortran_order, dtype = npy_format.read_array_header_1_0(fh)
        except ValueError as exc:
            raise VolumeFormatError(f"{path}: malformed header ({exc})") from None
        payload = fh.read()

    if fortran_order:
        raise VolumeFormatError(f"{path}: malformed header (fortran_order must be false)")
    if dtype.str not in SUPPORTED_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported element type {dtype.str}")
    if len(shape) != 3:
        raise VolumeFormatError(f"{path}: malformed header (expected 3 dims, got {shape})")
    count = int(np.prod(shape))
    if len(payload) != count * dtype.itemsize:
        raise VolumeFormatError(
            f"{path}: dimension mismatch (header shape {shape} needs {count} elements, "
            f"file holds {len(payload) / dtype.itemsize:g})"
        )
    raw = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if dtype.kind == "f" and not np.all(np.isfinite(raw)):
        raise VolumeFormatError(f"{path}: non-finite data")
    data = raw.transpose(2, 1, 0)

    spacing = (1.0, 1.0, 1.0)
    side = sidecar_path(path)
    if side.exists():
        try:
            spacing = tuple(json.loads(side.read_text())["spacing_mm"])
        except (ValueError, KeyError, TypeError) as exc:
            raise VolumeFormatError(f"{side}: malformed spacing sidecar ({exc})") from None
    try:
        return Volume(data, spacing)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from None
