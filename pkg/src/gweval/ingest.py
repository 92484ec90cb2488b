"""Readers and writers for ground-truth, submission, domain-manifest and canvas tables.

File layouts (UTF-8, comma-delimited, standard CSV quoting):

* ground truth: ``image_id,width,height,bbox,domain`` with ``bbox = "[x, y, w, h]"``,
  one row per box; an image without boxes appears once with an empty ``bbox``.
* submission: ``image_id,PredictionString`` where the prediction string repeats
  ``conf x y w h``.
* domain manifest: ``image_id,domain``.
* canvases: ``image_id,width,height``.

Boxes are converted to corner form at this boundary and nowhere else.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter, namedtuple
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, TextIO, Union

from .errors import FormatError, InputDomainError
from .geometry import BoundingBox, CanvasSize, clip_box

log = logging.getLogger(__name__)

GT_HEADER = ("image_id", "width", "height", "bbox", "domain")
SUBMISSION_HEADER = ("image_id", "PredictionString")
MANIFEST_HEADER = ("image_id", "domain")
CANVAS_HEADER = ("image_id", "width", "height")


_DetectionBase = namedtuple("_DetectionBase", "box confidence")


class Detection(_DetectionBase):
    """A predicted box with its confidence in [0, 1]."""

    __slots__ = ()

    def __new__(cls, box: BoundingBox, confidence: float):
        confidence = float(confidence)
        if not (0.0 <= confidence <= 1.0):
            raise InputDomainError(f"confidence {confidence} outside [0, 1]")
        return super().__new__(cls, box, confidence)


class ImageAnnotation(NamedTuple):
    canvas: CanvasSize
    boxes: tuple[BoundingBox, ...]


class DomainManifest(Mapping):
    """Read-only mapping image id -> domain id."""

    def __init__(self, mapping: Optional[Mapping[str, str]] = None):
        self._map = dict(mapping or {})

    def __getitem__(self, key: str) -> str:
        return self._map[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._map)

    def __len__(self) -> int:
        return len(self._map)

    def __eq__(self, other) -> bool:
        if isinstance(other, Mapping):
            return dict(self._map) == dict(other)
        return NotImplemented

    def __repr__(self) -> str:
        return f"DomainManifest({self._map!r})"

    def domains(self) -> list[str]:
        return sorted(set(self._map.values()))


@dataclass(frozen=True)
class GroundTruthSet:
    images: Mapping[str, ImageAnnotation]
    variant: str = ""
    domains: DomainManifest = field(default_factory=DomainManifest)
    warnings: Counter = field(default_factory=Counter, compare=False)

    def __post_init__(self):
        for image_id, ann in self.images.items():
            for b in ann.boxes:
                if not ann.canvas.contains(b):
                    raise InputDomainError(f"image {image_id}: box {tuple(b)} outside canvas")

    @property
    def canvases(self) -> dict[str, CanvasSize]:
        return {k: v.canvas for k, v in self.images.items()}


@dataclass(frozen=True)
class PredictionSet:
    name: str
    images: Mapping[str, tuple[Detection, ...]]
    warnings: Counter = field(default_factory=Counter, compare=False)

    def get(self, image_id: str) -> tuple[Detection, ...]:
        return self.images.get(image_id, ())


def _detection_key(d: Detection):
    return (-d.confidence, *d.box)


def canonical_detections(dets) -> tuple[Detection, ...]:
    return tuple(sorted(dets, key=_detection_key))


def _as_text(source: Union[str, TextIO]) -> TextIO:
    if isinstance(source, str):
        return io.StringIO(source)
    return source


def _read_table(source, header: tuple[str, ...], name: Optional[str]):
    reader = csv.reader(_as_text(source))
    try:
        first = next(reader)
    except StopIteration:
        raise FormatError(f"empty file, expected header {','.join(header)}", line=1, source=name) from None
    if tuple(c.strip().lstrip("\ufeff") for c in first) != header:
        raise FormatError(f"bad header {first!r}, expected {','.join(header)}", line=1, source=name)
    for row in reader:
        line = reader.line_num
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(header):
            raise FormatError(f"expected {len(header)} fields, got {len(row)}", line=line, source=name)
        yield line, [c.strip() for c in row]


def _number(text: str, what: str, line: int, name: Optional[str]) -> float:
    try:
        value = float(text)
    except ValueError:
        raise FormatError(f"cannot parse {what} {text!r}", line=line, source=name) from None
    if not math.isfinite(value):
        raise FormatError(f"non-finite {what} {text!r}", line=line, source=name)
    return value


def _integer(text: str, what: str, line: int, name: Optional[str]) -> int:
    value = _number(text, what, line, name)
    if value != int(value) or value < 1:
        raise FormatError(f"{what} must be a positive integer, got {text!r}", line=line, source=name)
    return int(value)


def _xywh_box(x: float, y: float, w: float, h: float) -> Optional[BoundingBox]:
    # x + w can round back to x for tiny w
    if w <= 0 or h <= 0 or not (x + w > x and y + h > y):
        return None
    return BoundingBox.from_xywh(x, y, w, h)


def parse_ground_truth(source, variant: str = "", name: Optional[str] = None) -> GroundTruthSet:
    """Parse a ground-truth table.

    Degenerate boxes (``w <= 0`` or ``h <= 0``) are dropped and boxes reaching
    past the canvas are clipped; both are tallied in ``warnings``. The domain
    column, where non-empty, fills ``domains``.
    """
    canvases: dict[str, CanvasSize] = {}
    boxes: dict[str, list[BoundingBox]] = {}
    domains: dict[str, str] = {}
    warnings: Counter = Counter()
    for line, (image_id, width, height, bbox, domain) in _read_table(source, GT_HEADER, name):
        if not image_id:
            raise FormatError("empty image_id", line=line, source=name)
        canvas = CanvasSize(_integer(width, "width", line, name), _integer(height, "height", line, name))
        if canvases.setdefault(image_id, canvas) != canvas:
            raise FormatError(f"image {image_id} listed with conflicting sizes", line=line, source=name)
        if domain:
            if domains.setdefault(image_id, domain) != domain:
                raise FormatError(f"image {image_id} listed with conflicting domains", line=line, source=name)
        image_boxes = boxes.setdefault(image_id, [])
        text = bbox.strip()
        if text.startswith("[") and text.endswith("]"):
            text = text[1:-1].strip()
        if not text:
            continue
        parts = [p for p in text.replace(",", " ").split()]
        if len(parts) != 4:
            raise FormatError(f"bbox needs 4 numbers, got {bbox!r}", line=line, source=name)
        x, y, w, h = (_number(p, "bbox coordinate", line, name) for p in parts)
        box = _xywh_box(x, y, w, h)
        if box is None:
            warnings["dropped_degenerate"] += 1
            log.warning("%s:%d: dropping degenerate box %s", name or "<gt>", line, bbox)
            continue
        if not canvas.contains(box):
            clipped = clip_box(box, canvas)
            if clipped is None:
                warnings["dropped_outside"] += 1
                log.warning("%s:%d: dropping box %s outside the image", name or "<gt>", line, bbox)
                continue
            warnings["clipped"] += 1
            log.warning("%s:%d: clipping box %s to the image", name or "<gt>", line, bbox)
            box = clipped
        image_boxes.append(box)
    images = {k: ImageAnnotation(canvases[k], tuple(sorted(v))) for k, v in boxes.items()}
    return GroundTruthSet(images=images, variant=variant, domains=DomainManifest(domains), warnings=warnings)


def serialize_ground_truth(gt: GroundTruthSet, domains: Optional[Mapping[str, str]] = None) -> str:
    domains = gt.domains if domains is None else domains
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(GT_HEADER)
    for image_id in sorted(gt.images):
        ann = gt.images[image_id]
        domain = domains.get(image_id, "")
        if not ann.boxes:
            writer.writerow([image_id, ann.canvas.width, ann.canvas.height, "", domain])
        for b in ann.boxes:
            x, y, w, h = b.to_xywh()
            writer.writerow(
                [image_id, ann.canvas.width, ann.canvas.height, f"[{x:.4f}, {y:.4f}, {w:.4f}, {h:.4f}]", domain]
            )
    return out.getvalue()


def parse_submission(source, name: str = "", source_name: Optional[str] = None) -> PredictionSet:
    """Parse a submission table into a :class:`PredictionSet`.

    Raises:
        FormatError: on a bad header, a token count not divisible by 5, an
            unparsable number, a confidence outside [0, 1], or a repeated image id.
    """
    images: dict[str, tuple[Detection, ...]] = {}
    warnings: Counter = Counter()
    for line, (image_id, pred) in _read_table(source, SUBMISSION_HEADER, source_name):
        if not image_id:
            raise FormatError("empty image_id", line=line, source=source_name)
        if image_id in images:
            raise FormatError(f"duplicate image_id {image_id}", line=line, source=source_name)
        tokens = pred.split()
        if len(tokens) % 5:
            raise FormatError(
                f"PredictionString has {len(tokens)} tokens, not a multiple of 5", line=line, source=source_name
            )
        dets = []
        for i in range(0, len(tokens), 5):
            conf, x, y, w, h = (_number(t, "prediction value", line, source_name) for t in tokens[i : i + 5])
            if not (0.0 <= conf <= 1.0):
                raise FormatError(f"confidence {tokens[i]} outside [0, 1]", line=line, source=source_name)
            box = _xywh_box(x, y, w, h)
            if box is None:
                warnings["dropped_degenerate"] += 1
                log.warning("%s:%d: dropping degenerate prediction", source_name or "<submission>", line)
                continue
            dets.append(Detection(box, conf))
        images[image_id] = canonical_detections(dets)
    return PredictionSet(name=name, images=images, warnings=warnings)


def format_prediction_string(dets) -> str:
    parts = []
    for d in dets:
        x, y, w, h = d.box.to_xywh()
        parts.append(f"{d.confidence:.6f} {x:.4f} {y:.4f} {w:.4f} {h:.4f}")
    return " ".join(parts)


def serialize_submission(p: PredictionSet) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(SUBMISSION_HEADER)
    for image_id in sorted(p.images):
        writer.writerow([image_id, format_prediction_string(p.images[image_id])])
    return out.getvalue()


def parse_domain_manifest(source, name: Optional[str] = None) -> DomainManifest:
    mapping: dict[str, str] = {}
    for line, (image_id, domain) in _read_table(source, MANIFEST_HEADER, name):
        if not image_id:
            raise FormatError("empty image_id", line=line, source=name)
        if not domain:
            raise FormatError(f"empty domain for image {image_id}", line=line, source=name)
        if image_id in mapping:
            raise FormatError(f"duplicate image_id {image_id}", line=line, source=name)
        mapping[image_id] = domain
    return DomainManifest(mapping)


def serialize_domain_manifest(domains: Mapping[str, str]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for image_id in sorted(domains):
        writer.writerow([image_id, domains[image_id]])
    return out.getvalue()


def parse_canvases(source, name: Optional[str] = None) -> dict[str, CanvasSize]:
    canvases: dict[str, CanvasSize] = {}
    for line, (image_id, width, height) in _read_table(source, CANVAS_HEADER, name):
        if image_id in canvases:
            raise FormatError(f"duplicate image_id {image_id}", line=line, source=name)
        canvases[image_id] = CanvasSize(_integer(width, "width", line, name), _integer(height, "height", line, name))
    return canvases


def serialize_canvases(canvases: Mapping[str, CanvasSize]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CANVAS_HEADER)
    for image_id in sorted(canvases):
        writer.writerow([image_id, canvases[image_id].width, canvases[image_id].height])
    return out.getvalue()
