"""Axis-aligned box arithmetic and the lossless test-time-augmentation transforms.

Boxes are stored in corner form ``(x_min, y_min, x_max, y_max)`` with real-valued
pixel coordinates, origin at the top-left corner of the image. A box covers the
half-open region ``[x_min, x_max) x [y_min, y_max)``.
"""
from __future__ import annotations

import enum
import math
from collections import namedtuple
from typing import Optional

import numpy as np

from .errors import InputDomainError

_BoxBase = namedtuple("_BoxBase", "x_min y_min x_max y_max")


class BoundingBox(_BoxBase):
    """Immutable corner-form box. Zero or negative extent is rejected."""

    __slots__ = ()

    def __new__(cls, x_min, y_min, x_max, y_max):
        x_min, y_min, x_max, y_max = float(x_min), float(y_min), float(x_max), float(y_max)
        if not (math.isfinite(x_min) and math.isfinite(y_min) and math.isfinite(x_max) and math.isfinite(y_max)):
            raise InputDomainError(f"non-finite box coordinates {(x_min, y_min, x_max, y_max)}")
        if not (x_min < x_max and y_min < y_max):
            raise InputDomainError(f"box {(x_min, y_min, x_max, y_max)} has non-positive width or height")
        return super().__new__(cls, x_min, y_min, x_max, y_max)

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BoundingBox":
        return cls(x, y, x + w, y + h)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min)

    def scaled(self, sx: float, sy: float) -> "BoundingBox":
        return BoundingBox(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


_CanvasBase = namedtuple("_CanvasBase", "width height")


class CanvasSize(_CanvasBase):
    __slots__ = ()

    def __new__(cls, width, height):
        if int(width) != width or int(height) != height:
            raise InputDomainError(f"canvas size must be integral, got {width}x{height}")
        width, height = int(width), int(height)
        if width < 1 or height < 1:
            raise InputDomainError(f"canvas size must be positive, got {width}x{height}")
        return super().__new__(cls, width, height)

    def contains(self, b: BoundingBox) -> bool:
        return b.x_min >= 0 and b.y_min >= 0 and b.x_max <= self.width and b.y_max <= self.height


class TTATransform(str, enum.Enum):
    IDENTITY = "identity"
    HORIZONTAL_FLIP = "horizontal-flip"
    VERTICAL_FLIP = "vertical-flip"
    ROTATE_90_CW = "rotate-90-cw"
    ROTATE_90_CCW = "rotate-90-ccw"
    ROTATE_180 = "rotate-180"

    @property
    def inverse(self) -> "TTATransform":
        if self is TTATransform.ROTATE_90_CW:
            return TTATransform.ROTATE_90_CCW
        if self is TTATransform.ROTATE_90_CCW:
            return TTATransform.ROTATE_90_CW
        return self

    @property
    def swaps_axes(self) -> bool:
        return self in (TTATransform.ROTATE_90_CW, TTATransform.ROTATE_90_CCW)

    def output_canvas(self, canvas: CanvasSize) -> CanvasSize:
        if self.swaps_axes:
            return CanvasSize(canvas.height, canvas.width)
        return canvas


def area(b: BoundingBox) -> float:
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union. Boxes that only share an edge score 0."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = area(a) + area(b) - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` corner-form arrays.

    Uses the same operation order as :func:`iou` so both give bit-identical values.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(overlap, inter / np.where(overlap, union, 1.0), 0.0)


def transform_box(b: BoundingBox, t: TTATransform, canvas: CanvasSize) -> BoundingBox:
    """Map a box through a dihedral image transform.

    ``canvas`` is the size of the image *before* the transform. For the 90 degree
    rotations the resulting image is ``canvas.height x canvas.width``.

    Raises:
        InputDomainError: if ``b`` does not lie within ``canvas``.
    """
    t = TTATransform(t)
    if not canvas.contains(b):
        raise InputDomainError(f"box {tuple(b)} lies outside canvas {canvas.width}x{canvas.height}")
    w, h = canvas.width, canvas.height
    x0, y0, x1, y1 = b
    if t is TTATransform.IDENTITY:
        return b
    if t is TTATransform.HORIZONTAL_FLIP:
        return BoundingBox(w - x1, y0, w - x0, y1)
    if t is TTATransform.VERTICAL_FLIP:
        return BoundingBox(x0, h - y1, x1, h - y0)
    if t is TTATransform.ROTATE_180:
        return BoundingBox(w - x1, h - y1, w - x0, h - y0)
    if t is TTATransform.ROTATE_90_CW:
        # (x, y) -> (h - y, x)
        return BoundingBox(h - y1, x0, h - y0, x1)
    # rotate-90-ccw: (x, y) -> (y, w - x)
    return BoundingBox(y0, w - x1, y1, w - x0)


def inverse_transform_box(b: BoundingBox, t: TTATransform, canvas: CanvasSize) -> BoundingBox:
    """Undo :func:`transform_box`; ``canvas`` is the size before the forward transform."""
    t = TTATransform(t)
    return transform_box(b, t.inverse, t.output_canvas(canvas))


def clip_box(b: BoundingBox, canvas: CanvasSize) -> Optional[BoundingBox]:
    """Intersect ``b`` with the canvas, or return None when nothing is left."""
    return clip_to_region(b, 0.0, 0.0, float(canvas.width), float(canvas.height))


def clip_to_region(b: BoundingBox, x0: float, y0: float, x1: float, y1: float) -> Optional[BoundingBox]:
    nx0, ny0 = max(b.x_min, x0), max(b.y_min, y0)
    nx1, ny1 = min(b.x_max, x1), min(b.y_max, y1)
    if nx0 >= nx1 or ny0 >= ny1:
        return None
    if (nx0, ny0, nx1, ny1) == tuple(b):
        return b
    return BoundingBox(nx0, ny0, nx1, ny1)


def boxes_to_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
