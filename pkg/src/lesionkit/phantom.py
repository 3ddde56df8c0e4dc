"""Seeded synthetic lesion phantoms.

Each phantom is Gaussian background noise with a handful of ball-shaped
lesions whose intensity is raised by ``lcnr * noise_sigma``.  All random
draws come from numpy's PCG64 bit generator seeded with ``seed``, so a
given spec always produces the same bytes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import Volume, save_volume


class PlacementError(RuntimeError):
    """Lesions could not be placed with the requested separation."""


@dataclass(frozen=True)
class LesionSpec:
    size: int
    lcnr: float = 1.0

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 1:
            raise ValueError(f"lesion size must be an integer >= 1, got {self.size}")
        if not self.lcnr >= 0:
            raise ValueError(f"lcnr must be >= 0, got {self.lcnr}")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    lesions: tuple = ()
    noise_sigma: float = 1.0
    seed: int = 0
    min_separation_voxels: int = 3
    size_jitter: float = 0.1
    max_retries: int = 200

    def __post_init__(self):
        lesions = tuple(l if isinstance(l, LesionSpec) else LesionSpec(*l) for l in self.lesions)
        object.__setattr__(self, "lesions", lesions)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be > 0")
        if self.min_separation_voxels < 1:
            raise ValueError("min_separation_voxels must be >= 1 so lesions never touch")
        if not 0 <= self.size_jitter < 1:
            raise ValueError("size_jitter must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dims"] = list(self.dims)
        d["spacing"] = list(self.spacing)
        d["lesions"] = [{"size": l.size, "lcnr": l.lcnr} for l in self.lesions]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        data = dict(data)
        if "lesions" in data:
            data["lesions"] = tuple(
                LesionSpec(**l) if isinstance(l, dict) else LesionSpec(*l) for l in data["lesions"]
            )
        return cls(**data)

    def with_seed(self, seed: int) -> "PhantomSpec":
        return dataclasses.replace(self, seed=int(seed))


def benchmark_spec(seed: int = 0, lcnr: float = 1.0) -> PhantomSpec:
    """32^3 phantom with one 3-, one 8- and one 500-voxel lesion."""
    return PhantomSpec(
        dims=(32, 32, 32),
        lesions=(LesionSpec(3, lcnr), LesionSpec(8, lcnr), LesionSpec(500, lcnr)),
        noise_sigma=1.0,
        seed=seed,
        min_separation_voxels=3,
    )


def benchmark_set(n: int = 10, first_seed: int = 0, lcnr: float = 1.0) -> list:
    return [generate(benchmark_spec(first_seed + i, lcnr)) for i in range(n)]


@dataclass
class Phantom:
    image: Volume
    mask: Volume
    spec: PhantomSpec
    lesion_sizes: list = field(default_factory=list)


def _ball(center: np.ndarray, n: int, dims) -> np.ndarray | None:
    """Linear (x-fastest) indices of the ``n`` voxels closest to ``center``.

    Equivalent to voxelizing a ball by center inclusion with the radius
    set to the n-th smallest voxel distance.  Returns None if the ball
    would be clipped by the grid.
    """
    radius = (3.0 * n / (4.0 * np.pi)) ** (1.0 / 3.0) + 2.0
    lo = np.floor(center - radius).astype(int)
    hi = np.ceil(center + radius).astype(int)
    if np.any(lo < 0) or np.any(hi >= np.asarray(dims)):
        return None
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    d2 = (gx - center[0]) ** 2 + (gy - center[1]) ** 2 + (gz - center[2]) ** 2
    lin = gx + dims[0] * (gy + dims[1] * gz)
    order = np.lexsort((lin.ravel(), d2.ravel()))[:n]
    return lin.ravel()[order]


def generate(spec: PhantomSpec) -> Phantom:
    """Build the phantom described by ``spec``.

    Raises :class:`PlacementError` when a lesion cannot be placed within
    ``max_retries`` attempts.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    dims = spec.dims
    noise = rng.normal(0.0, spec.noise_sigma, size=dims[::-1]).transpose(2, 1, 0)

    n_vox = dims[0] * dims[1] * dims[2]
    mask_flat = np.zeros(n_vox, dtype=np.uint8)
    offset_flat = np.zeros(n_vox)
    blocked = np.zeros(dims, dtype=bool)
    reach = 2 * spec.min_separation_voxels + 1
    sizes = []

    for lesion in spec.lesions:
        n = max(1, int(round(lesion.size * (1.0 + rng.uniform(-spec.size_jitter, spec.size_jitter)))))
        for _ in range(spec.max_retries):
            center = rng.uniform(0.0, 1.0, size=3) * (np.asarray(dims) - 1)
            voxels = _ball(center, n, dims)
            if voxels is None:
                continue
            if blocked.ravel(order="F")[voxels].any():
                continue
            break
        else:
            raise PlacementError(
                f"could not place a {n}-voxel lesion in a {dims} grid after {spec.max_retries} attempts"
            )
        mask_flat[voxels] = 1
        offset_flat[voxels] = lesion.lcnr * spec.noise_sigma
        this = np.zeros(n_vox, dtype=bool)
        this[voxels] = True
        blocked |= ndimage.binary_dilation(
            this.reshape(dims, order="F"), structure=np.ones((reach,) * 3, dtype=bool)
        )
        sizes.append(n)

    image = noise + offset_flat.reshape(dims, order="F")
    mask = mask_flat.reshape(dims, order="F")
    return Phantom(Volume(image, spec.spacing), Volume(mask, spec.spacing), spec, sizes)


def save_phantom(ph: Phantom, out_dir, name: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_volume(ph.image, out_dir / f"{name}.img.npy")
    save_volume(ph.mask, out_dir / f"{name}.gt.npy")
    resolved = ph.spec.to_dict()
    resolved["generated_lesion_sizes"] = ph.lesion_sizes
    (out_dir / f"{name}.spec.json").write_text(json.dumps(resolved, indent=2) + "\n")
