"""Desk-scale spatial-temporal transformer video object detection with
fully checkable numerics: a float64 autodiff core, deformable and dense
attention, set-prediction matching losses, a synthetic clip generator, and
an end-to-end two-stage training pipeline."""

__version__ = "0.1.0"

from .autodiff import Node, Parameter, ShapeError, backward, grad_check
from .boxes import BoxCS, box_corners_to_cs, box_cs_to_corners, generalized_iou, iou
from .config import ConfigError, RunConfig, load_config, parse_config

__all__ = [
    "Node",
    "Parameter",
    "ShapeError",
    "backward",
    "grad_check",
    "BoxCS",
    "box_corners_to_cs",
    "box_cs_to_corners",
    "generalized_iou",
    "iou",
    "ConfigError",
    "RunConfig",
    "load_config",
    "parse_config",
    "__version__",
]
