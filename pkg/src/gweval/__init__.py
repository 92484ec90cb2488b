"""Domain-aware evaluation, ensembling and augmentation tooling for wheat-head detection."""

__version__ = "0.1.0"

from .errors import ConfigError, DegenerateVarianceError, FormatError, GwevalError, InputDomainError
from .geometry import BoundingBox, CanvasSize, TTATransform, area, clip_box, iou, transform_box

__all__ = [
    "__version__",
    "BoundingBox",
    "CanvasSize",
    "TTATransform",
    "area",
    "clip_box",
    "iou",
    "transform_box",
    "GwevalError",
    "FormatError",
    "InputDomainError",
    "DegenerateVarianceError",
    "ConfigError",
]
