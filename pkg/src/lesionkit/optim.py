"""Direct logit optimisation harness.

A free logit per voxel is fitted to a ground-truth mask by plain gradient
descent under one of the training objectives.  With no network in the
loop, differences between runs come from the objective alone.

The descent step is ``z -= learning_rate * |Omega| * dL/dz``.  The
objectives are voxel-averaged, so their per-voxel gradients shrink like
``1 / |Omega|``; multiplying by the voxel count keeps ``learning_rate``
meaningful independently of the volume size.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .components import label_components
from .losses import (
    DEFAULT_FOCAL_EXPONENT,
    OBJECTIVES,
    LossConfig,
    base_loss,
    cat_loss,
    cat_weight,
    detection_scores,
    focal_tversky_loss,
    mil_loss,
    objective_loss,
    tversky_loss,
)
from .metrics import CaseReport, MetricConfig, aggregate, evaluate_case
from .volume import Volume, as_mask


class OptimizationError(FloatingPointError):
    """A loss value or gradient became non-finite during optimisation."""


@dataclass(frozen=True)
class OptimConfig:
    objective: str = "catmil"
    steps: int = 500
    learning_rate: float = 1.0
    init_logit: float = -2.0
    loss_cfg: Optional[LossConfig] = None
    threshold: float = 0.5
    record_every: int = 50
    focal_exponent: float = DEFAULT_FOCAL_EXPONENT
    metric_cfg: MetricConfig = MetricConfig()
    label: Optional[str] = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError("steps must be a non-negative integer")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive and finite")
        if not math.isfinite(self.init_logit):
            raise ValueError("init_logit must be finite")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ValueError("record_every must be a positive integer")
        if self.loss_cfg is None:
            # default warm-up: 10% of the run
            object.__setattr__(self, "loss_cfg", LossConfig(warmup_T=max(1, int(self.steps) // 10)))

    @property
    def name(self) -> str:
        return self.label or self.objective

    def replace(self, **changes) -> "OptimConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["loss_cfg"] = self.loss_cfg.to_dict()
        d["metric_cfg"] = self.metric_cfg.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "OptimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown optimisation config keys: {sorted(unknown)}")
        data = dict(data)
        if isinstance(data.get("loss_cfg"), dict):
            data["loss_cfg"] = LossConfig.from_dict(data["loss_cfg"])
        if isinstance(data.get("metric_cfg"), dict):
            data["metric_cfg"] = MetricConfig.from_dict(data["metric_cfg"])
        return cls(**data)


@dataclass
class TraceEntry:
    step: int
    loss: float
    lambda_cat: float
    lambda_mil: float
    detection_scores: list
    report: CaseReport


@dataclass
class OptimTrace:
    entries: list = field(default_factory=list)

    @property
    def steps(self) -> list:
        return [e.step for e in self.entries]

    def rows(self) -> list:
        out = []
        for e in self.entries:
            row = {"step": e.step, "loss": e.loss, "lambda_cat": e.lambda_cat, "lambda_mil": e.lambda_mil}
            row.update(e.report.to_row())
            out.append(row)
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.rows())


def _fmt(value) -> str:
    if value is None:
        return "null"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows: Sequence[dict]) -> str:
    """CSV with the first row's column order; ``None`` written as ``null``."""
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    columns = list(rows[0])
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def _term_weights(cfg: OptimConfig, step: int) -> tuple[float, float]:
    lc = cfg.loss_cfg
    if cfg.objective in ("catmil", "cat"):
        lam_cat = cat_weight(step, lc)
    else:
        lam_cat = 0.0
    lam_mil = lc.lambda_mil if cfg.objective in ("catmil", "mil") else 0.0
    return lam_cat, lam_mil


def _diagnose(p, gt, cfg: OptimConfig, labeling) -> str:
    lc = cfg.loss_cfg
    terms = {
        "dicece": lambda: base_loss(p, gt, lc),
        "tversky": lambda: tversky_loss(p, gt, lc),
        "focal_tversky": lambda: focal_tversky_loss(p, gt, lc, cfg.focal_exponent),
        "cat": lambda: cat_loss(p, gt, lc, labeling),
        "mil": lambda: mil_loss(p, gt, lc, labeling),
    }
    used = {
        "dicece": ["dicece"],
        "tversky": ["tversky"],
        "focal_tversky": ["focal_tversky"],
        "cat": ["dicece", "cat"],
        "mil": ["dicece", "mil"],
        "catmil": ["dicece", "cat", "mil"],
    }[cfg.objective]
    for name in used:
        lv = terms[name]()
        if not (np.isfinite(lv.value) and np.all(np.isfinite(lv.grad))):
            return name
    return "sigmoid chain"


def optimize(image, gt, cfg: OptimConfig = OptimConfig()):
    """Fit per-voxel logits to ``gt`` under ``cfg.objective``.

    ``image`` only provides the grid geometry; logits start at
    ``init_logit`` everywhere.  Returns the final probability volume and
    an :class:`OptimTrace` recorded every ``record_every`` steps and at
    the final step.
    """
    g = as_mask(gt).astype(np.uint8)
    spacing = gt.spacing if isinstance(gt, Volume) else (image.spacing if isinstance(image, Volume) else (1.0, 1.0, 1.0))
    if image is not None and np.shape(image.data if isinstance(image, Volume) else image) != g.shape:
        raise ValueError("image and ground truth dims differ")
    lc = cfg.loss_cfg
    labeling = label_components(g, lc.connectivity)
    n_vox = g.size
    z = np.full(g.shape, float(cfg.init_logit))
    trace = OptimTrace()

    def record(step, p, value):
        pred = (p > cfg.threshold).astype(np.uint8)
        lam_cat, lam_mil = _term_weights(cfg, step)
        scores = detection_scores(p, labeling)[0].tolist() if labeling.count else []
        report = evaluate_case(pred, g, cfg.metric_cfg, spacing)
        trace.entries.append(TraceEntry(step, value, lam_cat, lam_mil, scores, report))

    for step in range(cfg.steps + 1):
        p = expit(z)
        lv = objective_loss(cfg.objective, p, g, lc, step, labeling, cfg.focal_exponent)
        if not (np.isfinite(lv.value) and np.all(np.isfinite(lv.grad))):
            term = _diagnose(p, g, cfg, labeling)
            raise OptimizationError(f"non-finite loss or gradient at step {step} (term: {term})")
        if step % cfg.record_every == 0 or step == cfg.steps:
            record(step, p, float(lv.value))
        if step == cfg.steps:
            break
        grad_z = lv.grad * p * (1.0 - p)
        with np.errstate(over="ignore", invalid="ignore"):
            z = z - cfg.learning_rate * n_vox * grad_z
        if not np.all(np.isfinite(z)):
            raise OptimizationError(
                f"non-finite logits after the update at step {step} (term: {cfg.objective} step size; lower learning_rate)"
            )
    return Volume(p, spacing), trace


def _run_case(args):
    image, gt, cfg = args
    p, trace = optimize(image, gt, cfg)
    return trace.entries[-1].report


def _phantom_pairs(phantoms):
    return [(ph.image, ph.mask) if hasattr(ph, "mask") else tuple(ph) for ph in phantoms]


def run_reports(phantoms, configs: Sequence[OptimConfig], jobs: int = 1) -> list:
    """Final CaseReports for every (config, phantom) pair, config-major."""
    pairs = _phantom_pairs(phantoms)
    tasks = [(img, gt, cfg) for cfg in configs for img, gt in pairs]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_case, tasks))
    else:
        reports = [_run_case(t) for t in tasks]
    n = len(pairs)
    return [reports[i * n:(i + 1) * n] for i in range(len(configs))]


def _summary_row(summary: dict) -> dict:
    row = {}
    for col, stats in summary.items():
        row[col] = stats["mean"]
    for col, stats in summary.items():
        row[f"{col}_std"] = stats["std"]
    return row


def compare_objectives(phantoms, configs: Sequence[OptimConfig], jobs: int = 1) -> list:
    """One row of aggregated metric means (and stds) per configuration."""
    rows = []
    for cfg, reports in zip(configs, run_reports(phantoms, configs, jobs)):
        row = {"objective": cfg.name}
        row.update(_summary_row(aggregate(reports)))
        rows.append(row)
    return rows


def sweep(phantoms, lambda_cat_values, lambda_mil_values, base: OptimConfig = OptimConfig(), jobs: int = 1) -> list:
    """CATMIL over the grid ``lambda_cat_final x lambda_mil``, one row per pair."""
    configs = []
    for lam_cat in lambda_cat_values:
        for lam_mil in lambda_mil_values:
            lc = base.loss_cfg.replace(lambda_cat_final=float(lam_cat), lambda_mil=float(lam_mil))
            configs.append(base.replace(objective="catmil", loss_cfg=lc, label=f"catmil_{lam_cat:g}_{lam_mil:g}"))
    rows = []
    for cfg, reports in zip(configs, run_reports(phantoms, configs, jobs)):
        row = {
            "lambda_cat_final": cfg.loss_cfg.lambda_cat_final,
            "lambda_mil": cfg.loss_cfg.lambda_mil,
        }
        row.update(_summary_row(aggregate(reports)))
        rows.append(row)
    return rows


def rows_to_json(rows) -> str:
    return json.dumps(rows, indent=2) + "\n"
