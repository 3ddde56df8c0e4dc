"""Connected-component labeling and surface extraction for 3D masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import Volume, as_mask

CONNECTIVITIES = (6, 18, 26)
DEFAULT_CONNECTIVITY = 26


def structuring_element(connectivity: int) -> np.ndarray:
    """3x3x3 neighbourhood for face (6), edge (18) or corner (26) adjacency."""
    if connectivity not in CONNECTIVITIES:
        raise ValueError(f"connectivity must be one of {CONNECTIVITIES}, got {connectivity}")
    rank = {6: 1, 18: 2, 26: 3}[connectivity]
    return ndimage.generate_binary_structure(3, rank)


@dataclass(frozen=True)
class Component:
    id: int
    voxel_count: int
    voxels: np.ndarray  # ascending x-fastest linear indices
    bbox: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]  # inclusive (lo, hi) per axis


@dataclass(frozen=True)
class ComponentLabeling:
    label_map: np.ndarray  # int32, 0 = background
    components: list[Component] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.components)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([c.voxel_count for c in self.components], dtype=np.int64)

    def to_volume(self, spacing=(1.0, 1.0, 1.0)) -> Volume:
        return Volume(self.label_map.astype(np.int32), spacing)


def label_components(mask, connectivity: int = DEFAULT_CONNECTIVITY) -> ComponentLabeling:
    """Split a binary mask into connected components.

    Component ids run 1..K in ascending order of each component's smallest
    x-fastest linear voxel index, so the labeling is fully deterministic.
    """
    fg = as_mask(mask)
    raw, k = ndimage.label(fg, structure=structuring_element(connectivity))
    if k == 0:
        return ComponentLabeling(np.zeros(fg.shape, dtype=np.int32), [])

    flat_labels = raw.ravel(order="F")
    fg_pos = np.flatnonzero(flat_labels)  # x-fastest linear indices, ascending
    fg_labels = flat_labels[fg_pos]

    # first occurrence of each raw label along the x-fastest scan
    _, first = np.unique(fg_labels, return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, k + 1, dtype=np.int32)
    label_map = remap[raw]

    new_labels = remap[fg_labels]
    sort = np.argsort(new_labels, kind="stable")
    bounds = np.searchsorted(new_labels[sort], np.arange(1, k + 2))
    components = []
    for cid in range(1, k + 1):
        voxels = fg_pos[sort[bounds[cid - 1]:bounds[cid]]]
        xs, ys, zs = np.unravel_index(voxels, fg.shape, order="F")
        bbox = (
            (int(xs.min()), int(xs.max())),
            (int(ys.min()), int(ys.max())),
            (int(zs.min()), int(zs.max())),
        )
        components.append(Component(cid, int(voxels.size), voxels, bbox))
    return ComponentLabeling(label_map, components)


def filter_small_components(mask, min_size: int, connectivity: int = DEFAULT_CONNECTIVITY) -> np.ndarray:
    """Drop every connected component with fewer than ``min_size`` voxels.

    Returns a uint8 mask; a :class:`Volume` input yields a :class:`Volume`
    with the same spacing.
    """
    if min_size < 0:
        raise ValueError("min_size must be non-negative")
    labeling = label_components(mask, connectivity)
    keep = np.zeros(labeling.count + 1, dtype=bool)
    keep[1:] = labeling.sizes >= min_size
    out = keep[labeling.label_map].astype(np.uint8)
    if isinstance(mask, Volume):
        return Volume(out, mask.spacing)
    return out


def surface_mask(mask) -> np.ndarray:
    """Foreground voxels with a background (or out-of-grid) face neighbour."""
    fg = as_mask(mask)
    interior = ndimage.binary_erosion(fg, structure=structuring_element(6), border_value=0)
    return fg & ~interior


def surface_voxels(mask) -> np.ndarray:
    """Sorted x-fastest linear indices of the surface voxels of ``mask``."""
    surf = surface_mask(mask)
    return np.flatnonzero(surf.ravel(order="F"))
