"""Segmentation objectives with closed-form gradients w.r.t. probabilities.

Every loss takes a probability volume ``p`` and a binary ground truth
``gt`` of the same shape and returns a :class:`LossValueGrad`.  One volume
is one sample; there is no batch axis.

The component-adaptive Tversky (CAT) term reweights voxels by the inverse
size of the ground-truth lesion they belong to, the MIL term asks for one
confident voxel per lesion, and :func:`catmil_loss` adds both to the
Dice + cross-entropy base with a linear warm-up on the CAT weight.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .components import CONNECTIVITIES, ComponentLabeling, label_components
from .volume import as_mask, as_probability, check_same_dims

DEFAULT_FOCAL_EXPONENT = 0.75


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.3
    beta: float = 0.7
    gamma: float = 1.0
    delta: float = 1e-6
    eps_weight: float = 1e-6
    w_bg: float = 1.0
    eps_mil: float = 1e-6
    lambda_cat_final: float = 0.1
    lambda_mil: float = 0.1
    warmup_T: int = 50
    connectivity: int = 26

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "w_bg", "lambda_cat_final", "lambda_mil"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        for name in ("delta", "eps_weight", "eps_mil"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be finite and > 0, got {value}")
        if self.eps_mil >= 0.5:
            raise ValueError("eps_mil must be below 0.5")
        if int(self.warmup_T) != self.warmup_T or self.warmup_T < 1:
            raise ValueError(f"warmup_T must be an integer >= 1, got {self.warmup_T}")
        if self.connectivity not in CONNECTIVITIES:
            raise ValueError(f"connectivity must be one of {CONNECTIVITIES}")

    def replace(self, **changes) -> "LossConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LossConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "LossConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class LossValueGrad:
    value: float
    grad: np.ndarray

    def __add__(self, other: "LossValueGrad") -> "LossValueGrad":
        return LossValueGrad(self.value + other.value, self.grad + other.grad)

    def scaled(self, factor: float) -> "LossValueGrad":
        return LossValueGrad(factor * self.value, factor * self.grad)


def _prepare(p, gt):
    check_same_dims(p, gt)
    return as_probability(p), as_mask(gt).astype(np.float64)


def _labeling(gt, cfg: LossConfig, labeling: Optional[ComponentLabeling]) -> ComponentLabeling:
    if labeling is None:
        labeling = label_components(gt, cfg.connectivity)
    return labeling


def component_weights(gt, cfg: LossConfig = LossConfig(), labeling: Optional[ComponentLabeling] = None) -> np.ndarray:
    """Voxel weights ``(|C_k| + eps)^-gamma`` inside lesion k, ``w_bg`` elsewhere.

    Depends only on the ground truth.  Pass a precomputed ``labeling`` to
    skip relabeling inside optimisation loops.
    """
    labeling = _labeling(gt, cfg, labeling)
    per_label = np.empty(labeling.count + 1, dtype=np.float64)
    per_label[0] = cfg.w_bg
    per_label[1:] = np.power(labeling.sizes.astype(np.float64) + cfg.eps_weight, -cfg.gamma)
    return per_label[labeling.label_map]


def weighted_tversky_index(p, g, w, alpha, beta, delta):
    """Weighted Tversky index and its gradient w.r.t. ``p`` (arrays only)."""
    wp = w * p
    tp = np.sum(wp * g)
    fp = np.sum(wp * (1.0 - g))
    fn = np.sum(w * (1.0 - p) * g)
    num = tp + delta
    den = tp + alpha * fp + beta * fn + delta
    d_num = w * g
    d_den = w * g + alpha * w * (1.0 - g) - beta * w * g
    index = num / den
    d_index = (d_num * den - num * d_den) / (den * den)
    return index, d_index


def cat_index(p, gt, cfg: LossConfig = LossConfig(), labeling=None) -> float:
    p, g = _prepare(p, gt)
    w = component_weights(gt, cfg, labeling)
    index, _ = weighted_tversky_index(p, g, w, cfg.alpha, cfg.beta, cfg.delta)
    return float(index)


def cat_loss(p, gt, cfg: LossConfig = LossConfig(), labeling=None) -> LossValueGrad:
    """Component-adaptive Tversky loss ``1 - I_CAT``."""
    p, g = _prepare(p, gt)
    w = component_weights(gt, cfg, labeling)
    index, d_index = weighted_tversky_index(p, g, w, cfg.alpha, cfg.beta, cfg.delta)
    return LossValueGrad(float(1.0 - index), -d_index)


def tversky_loss(p, gt, cfg: LossConfig = LossConfig()) -> LossValueGrad:
    """Plain voxel-wise Tversky loss (all weights 1)."""
    p, g = _prepare(p, gt)
    index, d_index = weighted_tversky_index(p, g, np.ones_like(p), cfg.alpha, cfg.beta, cfg.delta)
    return LossValueGrad(float(1.0 - index), -d_index)


def focal_tversky_loss(p, gt, cfg: LossConfig = LossConfig(), focal_exponent: float = DEFAULT_FOCAL_EXPONENT) -> LossValueGrad:
    """``(1 - Tversky index) ** focal_exponent``.

    At a perfect prediction the base is 0; the gradient there is reported
    as zero rather than the one-sided limit (infinite for exponents < 1).
    """
    if focal_exponent <= 0:
        raise ValueError("focal_exponent must be positive")
    plain = tversky_loss(p, gt, cfg)
    base = max(plain.value, 0.0)
    if base == 0.0:
        return LossValueGrad(0.0, np.zeros_like(plain.grad))
    return LossValueGrad(base**focal_exponent, focal_exponent * base ** (focal_exponent - 1.0) * plain.grad)


def detection_scores(p, labeling: ComponentLabeling):
    """Per-lesion max probability and the voxel that attains it.

    Ties go to the lowest x-fastest linear index.
    """
    flat = np.asarray(p, dtype=np.float64).ravel(order="F")
    scores = np.empty(labeling.count)
    argmax = np.empty(labeling.count, dtype=np.int64)
    for k, comp in enumerate(labeling.components):
        vals = flat[comp.voxels]
        j = int(np.argmax(vals))
        scores[k] = vals[j]
        argmax[k] = comp.voxels[j]
    return scores, argmax


def mil_loss(p, gt, cfg: LossConfig = LossConfig(), labeling=None) -> LossValueGrad:
    """Mean over lesions of ``-log(max_{i in C_k} p_i + eps)``; 0 when K = 0."""
    p, _ = _prepare(p, gt)
    labeling = _labeling(gt, cfg, labeling)
    grad = np.zeros(p.size)
    k = labeling.count
    if k == 0:
        return LossValueGrad(0.0, grad.reshape(p.shape))
    scores, argmax = detection_scores(p, labeling)
    value = float(np.mean(-np.log(scores + cfg.eps_mil)))
    grad[argmax] = -1.0 / (k * (scores + cfg.eps_mil))
    return LossValueGrad(value, grad.reshape(p.shape, order="F"))


def soft_dice_coefficient(p, g, smooth):
    """Soft Dice ``(2 sum pg + s) / (sum p + sum g + s)`` and its gradient."""
    inter = np.sum(p * g)
    total = np.sum(p) + np.sum(g) + smooth
    coef = (2.0 * inter + smooth) / total
    d_coef = (2.0 * g * total - (2.0 * inter + smooth)) / (total * total)
    return coef, d_coef


def base_loss(p, gt, cfg: LossConfig = LossConfig()) -> LossValueGrad:
    """Soft Dice loss plus mean binary cross-entropy.

    The cross-entropy clamps ``p`` into ``[eps_mil, 1 - eps_mil]``; voxels
    outside that band get zero cross-entropy gradient.
    """
    p, g = _prepare(p, gt)
    coef, d_coef = soft_dice_coefficient(p, g, cfg.delta)

    eps = cfg.eps_mil
    pc = np.clip(p, eps, 1.0 - eps)
    n = p.size
    ce = -np.sum(g * np.log(pc) + (1.0 - g) * np.log1p(-pc)) / n
    in_band = (p >= eps) & (p <= 1.0 - eps)
    d_ce = np.where(in_band, -(g / pc - (1.0 - g) / (1.0 - pc)) / n, 0.0)

    return LossValueGrad(float(1.0 - coef + ce), d_ce - d_coef)


def cat_weight(step: int, cfg: LossConfig) -> float:
    """Warm-up schedule ``lambda_cat_final * min(step / T, 1)``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= cfg.warmup_T:
        return cfg.lambda_cat_final
    return cfg.lambda_cat_final * (step / cfg.warmup_T)


def catmil_loss(p, gt, cfg: LossConfig = LossConfig(), step: int = 0, labeling=None) -> LossValueGrad:
    """Base loss + warmed-up CAT term + constant-weight MIL term."""
    labeling = _labeling(gt, cfg, labeling)
    total = base_loss(p, gt, cfg)
    lam_cat = cat_weight(step, cfg)
    if lam_cat != 0.0:
        total = total + cat_loss(p, gt, cfg, labeling).scaled(lam_cat)
    if cfg.lambda_mil != 0.0:
        total = total + mil_loss(p, gt, cfg, labeling).scaled(cfg.lambda_mil)
    return total


Objective = Callable[..., LossValueGrad]

OBJECTIVES = ("dicece", "tversky", "focal_tversky", "cat", "mil", "catmil")


def objective_loss(
    name: str,
    p,
    gt,
    cfg: LossConfig = LossConfig(),
    step: int = 0,
    labeling=None,
    focal_exponent: float = DEFAULT_FOCAL_EXPONENT,
) -> LossValueGrad:
    """Evaluate a named training objective.

    ``cat`` and ``mil`` are the single-term ablations: the base loss plus
    only that auxiliary term.  ``tversky`` and ``focal_tversky`` replace the
    base loss entirely.
    """
    if name == "dicece":
        return base_loss(p, gt, cfg)
    if name == "tversky":
        return tversky_loss(p, gt, cfg)
    if name == "focal_tversky":
        return focal_tversky_loss(p, gt, cfg, focal_exponent)
    if name == "cat":
        return catmil_loss(p, gt, cfg.replace(lambda_mil=0.0), step, labeling)
    if name == "mil":
        return catmil_loss(p, gt, cfg.replace(lambda_cat_final=0.0), step, labeling)
    if name == "catmil":
        return catmil_loss(p, gt, cfg, step, labeling)
    raise ValueError(f"unknown objective {name!r}; choose from {', '.join(OBJECTIVES)}")
