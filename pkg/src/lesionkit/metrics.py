"""Voxel-level, lesion-level and error-analysis metrics for binary masks.

Undefined values (HD95 with an empty mask, small-lesion recall without
small lesions, ...) are returned as ``None``; they serialize as ``null``
and are left out of aggregate means.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .components import CONNECTIVITIES, ComponentLabeling, label_components, surface_mask
from .volume import as_mask, check_same_dims, spacing_of

HIT_RULES = ("any_overlap", "center_in")


@dataclass(frozen=True)
class MetricConfig:
    small_lesion_tau: int = 50
    size_bins: tuple = (10, 50, 200, math.inf)
    hit_rule: str = "any_overlap"
    connectivity: int = 26
    eps_metric: float = 1e-8
    near_distance_mm: float = 2.0

    def __post_init__(self):
        bins = tuple(float(b) for b in self.size_bins)
        if not bins or any(b <= 0 for b in bins) or any(b2 <= b1 for b1, b2 in zip(bins, bins[1:])):
            raise ValueError(f"size_bins must be positive and strictly ascending, got {self.size_bins}")
        object.__setattr__(self, "size_bins", bins)
        if self.hit_rule not in HIT_RULES:
            raise ValueError(f"hit_rule must be one of {HIT_RULES}")
        if self.connectivity not in CONNECTIVITIES:
            raise ValueError(f"connectivity must be one of {CONNECTIVITIES}")
        if not self.eps_metric > 0:
            raise ValueError("eps_metric must be > 0")
        if not self.near_distance_mm > 0:
            raise ValueError("near_distance_mm must be > 0")
        if self.small_lesion_tau < 0:
            raise ValueError("small_lesion_tau must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["size_bins"] = ["inf" if math.isinf(b) else b for b in self.size_bins]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "MetricConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown metric config keys: {sorted(unknown)}")
        data = dict(data)
        if "size_bins" in data:
            data["size_bins"] = tuple(float(b) for b in data["size_bins"])
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "MetricConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def bin_labels(self) -> list[str]:
        labels = []
        for edge in self.size_bins:
            if math.isinf(edge):
                labels.append(f"gt{_fmt_edge(self.size_bins[-2]) if len(self.size_bins) > 1 else 0}")
            else:
                labels.append(f"le{_fmt_edge(edge)}")
        if not math.isinf(self.size_bins[-1]):
            labels.append(f"gt{_fmt_edge(self.size_bins[-1])}")
        return labels


def _fmt_edge(edge: float) -> str:
    return str(int(edge)) if float(edge).is_integer() else str(edge)


def _pair(pred, gt, spacing=None):
    check_same_dims(pred, gt)
    sp = spacing_of(pred, gt) if spacing is None else tuple(float(s) for s in spacing)
    return as_mask(pred), as_mask(gt), sp


def dice(pred, gt) -> float:
    """``2|P & G| / (|P| + |G|)``; 1.0 when both masks are empty."""
    p, g, _ = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / total


def _coords_mm(mask: np.ndarray, spacing) -> np.ndarray:
    return np.argwhere(mask) * np.asarray(spacing, dtype=np.float64)


def directed_surface_distances(src, dst, spacing=(1.0, 1.0, 1.0), method: str = "kdtree") -> np.ndarray:
    """Distance (mm) from every surface voxel of ``src`` to the surface of ``dst``.

    ``method="kdtree"`` is exact nearest-neighbour search; ``method="edt"``
    reads the same distances off a Euclidean distance transform.
    """
    s_src = surface_mask(src)
    s_dst = surface_mask(dst)
    if method == "kdtree":
        tree = cKDTree(_coords_mm(s_dst, spacing))
        dist, _ = tree.query(_coords_mm(s_src, spacing), k=1)
        return np.asarray(dist, dtype=np.float64)
    if method == "edt":
        dt = ndimage.distance_transform_edt(~s_dst, sampling=spacing)
        return dt[s_src]
    raise ValueError(f"unknown distance method {method!r}")


def hd95(pred, gt, spacing=None, method: str = "kdtree") -> Optional[float]:
    """Symmetric 95th-percentile surface distance in mm.

    Percentiles interpolate linearly between order statistics.  Returns
    ``None`` when either mask is empty.
    """
    p, g, sp = _pair(pred, gt, spacing)
    if not p.any() or not g.any():
        return None
    d_pg = directed_surface_distances(p, g, sp, method)
    d_gp = directed_surface_distances(g, p, sp, method)
    return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))


@dataclass(frozen=True)
class LesionMatch:
    gt_labeling: ComponentLabeling
    pred_labeling: ComponentLabeling
    gt_hit: np.ndarray  # bool per GT component, in id order
    pred_hit: np.ndarray  # bool per predicted component

    @property
    def gt_sizes(self) -> np.ndarray:
        return self.gt_labeling.sizes


def _center_voxel(comp, shape) -> int:
    coords = np.stack(np.unravel_index(comp.voxels, shape, order="F"), axis=1).astype(np.float64)
    d2 = np.sum((coords - coords.mean(axis=0)) ** 2, axis=1)
    return int(comp.voxels[int(np.argmin(d2))])


def _hits(labeling: ComponentLabeling, other: np.ndarray, rule: str) -> np.ndarray:
    flat_other = other.ravel(order="F")
    if rule == "any_overlap":
        return np.array([bool(flat_other[c.voxels].any()) for c in labeling.components], dtype=bool)
    return np.array([bool(flat_other[_center_voxel(c, other.shape)]) for c in labeling.components], dtype=bool)


def lesion_match(pred, gt, cfg: MetricConfig = MetricConfig()) -> LesionMatch:
    """Label both masks and flag which components are detected by the other mask.

    ``any_overlap``: a component is hit when it shares at least one voxel
    with the other mask's foreground.  ``center_in``: hit when the
    component voxel closest to its centroid lies in the other mask.
    """
    p, g, _ = _pair(pred, gt)
    gl = label_components(g, cfg.connectivity)
    pl = label_components(p, cfg.connectivity)
    return LesionMatch(gl, pl, _hits(gl, p, cfg.hit_rule), _hits(pl, g, cfg.hit_rule))


def _f1_from_match(m: LesionMatch, eps: float):
    precision = int(m.pred_hit.sum()) / (m.pred_labeling.count + eps)
    recall = int(m.gt_hit.sum()) / (m.gt_labeling.count + eps)
    f1 = 2.0 * precision * recall / (precision + recall + eps)
    return precision, recall, f1


def lesion_f1(pred, gt, cfg: MetricConfig = MetricConfig(), match: Optional[LesionMatch] = None):
    """Lesion-wise (precision, recall, F1), each epsilon-smoothed."""
    match = match or lesion_match(pred, gt, cfg)
    return _f1_from_match(match, cfg.eps_metric)


def small_lesion_recall(pred, gt, cfg: MetricConfig = MetricConfig(), match: Optional[LesionMatch] = None) -> Optional[float]:
    """Detected fraction of GT lesions with at most ``tau`` voxels."""
    match = match or lesion_match(pred, gt, cfg)
    small = match.gt_sizes <= cfg.small_lesion_tau
    if not small.any():
        return None
    return int((match.gt_hit & small).sum()) / (int(small.sum()) + cfg.eps_metric)


def _bin_index(sizes: np.ndarray, edges) -> np.ndarray:
    # bin j holds sizes in (edges[j-1], edges[j]]
    return np.searchsorted(np.asarray(edges, dtype=np.float64), sizes, side="left")


def recall_by_size(pred, gt, cfg: MetricConfig = MetricConfig(), match: Optional[LesionMatch] = None) -> dict:
    """Hit fraction of GT lesions per size bin; ``None`` for empty bins."""
    match = match or lesion_match(pred, gt, cfg)
    labels = cfg.bin_labels()
    idx = _bin_index(match.gt_sizes, cfg.size_bins)
    out = {}
    for j, label in enumerate(labels):
        in_bin = idx == j
        n = int(in_bin.sum())
        out[label] = None if n == 0 else int((match.gt_hit & in_bin).sum()) / n
    return out


def size_bin_counts(gt, cfg: MetricConfig = MetricConfig()) -> dict:
    sizes = label_components(gt, cfg.connectivity).sizes
    idx = _bin_index(sizes, cfg.size_bins)
    return {label: int((idx == j).sum()) for j, label in enumerate(cfg.bin_labels())}


def error_volumes(pred, gt, spacing=None, eps: float = 1e-8):
    """False-positive volume in mm^3 and missed fraction of GT voxels."""
    p, g, sp = _pair(pred, gt, spacing)
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(g & ~p))
    return fp * (sp[0] * sp[1] * sp[2]), fn / (int(g.sum()) + eps)


def fp_analysis(pred, gt, cfg: MetricConfig = MetricConfig(), spacing=None, match: Optional[LesionMatch] = None):
    """Characterise false positives.

    Returns ``(blob_fraction, near_fraction, median_distance_mm)``:
    the share of predicted components touching no GT voxel, the share of
    FP voxels within ``near_distance_mm`` of GT foreground, and the median
    FP-voxel distance to GT foreground.
    """
    p, g, sp = _pair(pred, gt, spacing)
    pl = match.pred_labeling if match is not None else label_components(p, cfg.connectivity)
    if pl.count == 0:
        blob = None
    else:
        flat_g = g.ravel(order="F")
        unmatched = sum(1 for c in pl.components if not flat_g[c.voxels].any())
        blob = unmatched / pl.count

    fp = p & ~g
    if not fp.any() or not g.any():
        return blob, None, None
    dist = ndimage.distance_transform_edt(~g, sampling=sp)[fp]
    near = float(np.count_nonzero(dist <= cfg.near_distance_mm)) / dist.size
    return blob, near, float(np.median(dist))


@dataclass
class CaseReport:
    dice: float
    hd95_mm: Optional[float]
    lesion_precision: float
    lesion_recall: float
    lesion_f1: float
    small_lesion_recall: Optional[float]
    fn_lesion_count: int
    miss_rate: float
    fn_volume_fraction: float
    fp_volume_mm3: float
    fp_blob_fraction: Optional[float]
    fp_near_fraction: Optional[float]
    fp_median_distance_mm: Optional[float]
    recall_by_size_bin: dict = field(default_factory=dict)

    def to_row(self) -> dict:
        """Flat mapping with one ``recall_<bin>`` column per size bin."""
        row = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "recall_by_size_bin"}
        for label, value in self.recall_by_size_bin.items():
            row[f"recall_{label}"] = value
        return row


SCALAR_FIELDS = tuple(f.name for f in dataclasses.fields(CaseReport) if f.name != "recall_by_size_bin")


def evaluate_case(pred, gt, cfg: MetricConfig = MetricConfig(), spacing=None) -> CaseReport:
    p, g, sp = _pair(pred, gt, spacing)
    match = lesion_match(p, g, cfg)
    precision, recall, f1 = _f1_from_match(match, cfg.eps_metric)
    fp_vol, fn_frac = error_volumes(p, g, sp, cfg.eps_metric)
    blob, near, median = fp_analysis(p, g, cfg, sp, match)
    return CaseReport(
        dice=dice(p, g),
        hd95_mm=hd95(p, g, sp),
        lesion_precision=precision,
        lesion_recall=recall,
        lesion_f1=f1,
        small_lesion_recall=small_lesion_recall(p, g, cfg, match),
        fn_lesion_count=match.gt_labeling.count - int(match.gt_hit.sum()),
        miss_rate=1.0 - recall,
        fn_volume_fraction=fn_frac,
        fp_volume_mm3=fp_vol,
        fp_blob_fraction=blob,
        fp_near_fraction=near,
        fp_median_distance_mm=median,
        recall_by_size_bin=recall_by_size(p, g, cfg, match),
    )


def aggregate(reports: Sequence[CaseReport]) -> dict:
    """Per-column mean, population std and count of defined values.

    ``None`` entries are skipped.  Sums use exactly rounded ``math.fsum``,
    so the result does not depend on report order.
    """
    rows = [r.to_row() for r in reports]
    columns = list(rows[0]) if rows else list(SCALAR_FIELDS)
    summary = {}
    for col in columns:
        values = [float(r[col]) for r in rows if r.get(col) is not None]
        n = len(values)
        if n == 0:
            summary[col] = {"mean": None, "std": None, "n": 0}
            continue
        if all(v == values[0] for v in values):
            summary[col] = {"mean": values[0], "std": 0.0, "n": n}
            continue
        mean = math.fsum(values) / n
        var = math.fsum((v - mean) ** 2 for v in values) / n
        summary[col] = {"mean": mean, "std": math.sqrt(var), "n": n}
    return summary
