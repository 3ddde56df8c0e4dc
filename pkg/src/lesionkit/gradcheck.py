"""Central finite-difference verification of analytic loss gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .components import label_components
from .losses import LossConfig, detection_scores, objective_loss

FD_STEP = 1e-6
REL_FLOOR = 1e-12


def central_difference(f, x: np.ndarray, h: float = FD_STEP, mask=None) -> np.ndarray:
    """Per-coordinate central difference of scalar ``f`` at ``x``.

    Coordinates where ``mask`` is False are skipped and reported as NaN.
    """
    x = np.array(x, dtype=np.float64)
    out = np.full(x.shape, np.nan)
    flat = x.reshape(-1)
    out_flat = out.reshape(-1)
    todo = range(flat.size) if mask is None else np.flatnonzero(np.asarray(mask).reshape(-1))
    for i in todo:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x)
        flat[i] = orig - h
        f_minus = f(x)
        flat[i] = orig
        out_flat[i] = (f_plus - f_minus) / (2.0 * h)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, mask=None) -> float:
    """``max |a - n| / max(|a|, |n|)`` over the checked coordinates."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    sel = ~np.isnan(n) if mask is None else np.asarray(mask, dtype=bool) & ~np.isnan(n)
    if not np.any(sel):
        return 0.0
    a, n = a[sel], n[sel]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def mil_tie_mask(p, gt, connectivity: int, h: float = FD_STEP) -> np.ndarray:
    """False on lesion voxels whose value is within ``h`` of the lesion max.

    Perturbing such a voxel by ``h`` can flip the argmax, which makes the
    finite difference straddle a kink of the hard max.
    """
    labeling = label_components(gt, connectivity)
    keep = np.ones(np.shape(p), dtype=bool)
    if labeling.count == 0:
        return keep
    flat_p = np.asarray(p, dtype=np.float64).ravel(order="F")
    flat_keep = keep.ravel(order="F")
    scores, argmax = detection_scores(p, labeling)
    for comp, s, am in zip(labeling.components, scores, argmax):
        vals = flat_p[comp.voxels]
        others = vals[comp.voxels != am]
        if others.size and s - others.max() <= 2 * h:
            near = comp.voxels[np.abs(vals - s) <= 2 * h]
            flat_keep[near] = False
    return flat_keep.reshape(np.shape(p), order="F")


@dataclass(frozen=True)
class GradCheckResult:
    objective: str
    max_rel_error: float
    checked: int


def check_objective(
    objective: str,
    p: np.ndarray,
    gt: np.ndarray,
    cfg: LossConfig = LossConfig(),
    step: int = 0,
    h: float = FD_STEP,
    focal_exponent: float = 0.75,
) -> GradCheckResult:
    """Compare an objective's analytic gradient with central differences in p."""
    labeling = label_components(gt, cfg.connectivity)

    def f(x):
        return objective_loss(objective, x, gt, cfg, step, labeling, focal_exponent).value

    analytic = objective_loss(objective, p, gt, cfg, step, labeling, focal_exponent).grad
    mask = mil_tie_mask(p, gt, cfg.connectivity, h) if objective in ("mil", "catmil") else None
    numeric = central_difference(f, p, h, mask)
    checked = int(np.count_nonzero(~np.isnan(numeric)))
    return GradCheckResult(objective, max_relative_error(analytic, numeric), checked)


def check_objective_logits(
    objective: str,
    z: np.ndarray,
    gt: np.ndarray,
    cfg: LossConfig = LossConfig(),
    step: int = 0,
    h: float = FD_STEP,
    focal_exponent: float = 0.75,
) -> GradCheckResult:
    """Same check for ``objective(sigmoid(z))`` in logit space."""
    labeling = label_components(gt, cfg.connectivity)

    def f(x):
        return objective_loss(objective, expit(x), gt, cfg, step, labeling, focal_exponent).value

    p = expit(z)
    analytic = objective_loss(objective, p, gt, cfg, step, labeling, focal_exponent).grad * p * (1.0 - p)
    # a logit step of h moves p by at most h/4
    mask = mil_tie_mask(p, gt, cfg.connectivity, h) if objective in ("mil", "catmil") else None
    numeric = central_difference(f, z, h, mask)
    checked = int(np.count_nonzero(~np.isnan(numeric)))
    return GradCheckResult(objective, max_relative_error(analytic, numeric), checked)


def random_instance(rng: np.random.Generator, dims, fg_fraction: float = 0.3, p_range=(0.02, 0.98)):
    """Random probability volume and binary mask for gradient checks."""
    dims = tuple(int(d) for d in dims)
    gt = (rng.random(dims) < fg_fraction).astype(np.uint8)
    p = rng.uniform(p_range[0], p_range[1], size=dims)
    return p, gt
