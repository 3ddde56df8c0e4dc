"""Component-adaptive Tversky and lesion-level MIL losses, lesion-wise
segmentation metrics, and a direct logit optimisation harness for 3D
binary lesion masks."""

__version__ = "0.1.0"

from .components import filter_small_components, label_components, surface_voxels
from .losses import (
    LossConfig,
    LossValueGrad,
    base_loss,
    cat_loss,
    catmil_loss,
    component_weights,
    focal_tversky_loss,
    mil_loss,
    tversky_loss,
)
from .metrics import CaseReport, MetricConfig, aggregate, evaluate_case
from .volume import Volume, binarize, load_volume, save_volume

__all__ = [
    "CaseReport",
    "LossConfig",
    "LossValueGrad",
    "MetricConfig",
    "Volume",
    "aggregate",
    "base_loss",
    "binarize",
    "cat_loss",
    "catmil_loss",
    "component_weights",
    "evaluate_case",
    "filter_small_components",
    "focal_tversky_loss",
    "label_components",
    "load_volume",
    "mil_loss",
    "save_volume",
    "surface_voxels",
    "tversky_loss",
]
