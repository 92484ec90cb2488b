"""Prediction post-processing: NMS, weighted boxes fusion, TTA merging, pseudo-labels."""
from __future__ import annotations

import statistics
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Optional, Sequence

from .errors import InputDomainError
from .geometry import BoundingBox, CanvasSize, TTATransform, clip_box, inverse_transform_box, iou, transform_box
from .ingest import Detection, GroundTruthSet, ImageAnnotation, PredictionSet, canonical_detections

SCORE_MODES = ("mean", "weighted-mean")


@dataclass(frozen=True)
class FusionConfig:
    iou_threshold: float = 0.55
    weights: Optional[tuple[float, ...]] = None
    score_mode: str = "mean"
    cull_threshold: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.iou_threshold <= 1.0):
            raise InputDomainError(f"fusion IoU threshold {self.iou_threshold} outside (0, 1]")
        if self.weights is not None and any(w <= 0 for w in self.weights):
            raise InputDomainError("fusion weights must be positive")
        if self.score_mode not in SCORE_MODES:
            raise InputDomainError(f"unknown score mode {self.score_mode!r}; expected one of {SCORE_MODES}")


@dataclass(frozen=True)
class TTAPredictionSet:
    """Predictions made on transformed images.

    ``canvases`` holds the size of each *original* image; detections are in the
    coordinates of the transformed image.
    """

    transform: TTATransform
    canvases: Mapping[str, CanvasSize]
    images: Mapping[str, tuple[Detection, ...]]
    name: str = ""


def _order_key(d: Detection, index: int):
    return (-d.confidence, *d.box, index)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Keep each detection whose IoU with every previously kept one is <= ``iou_threshold``."""
    if not (0.0 < iou_threshold <= 1.0):
        raise InputDomainError(f"NMS IoU threshold {iou_threshold} outside (0, 1]")
    ordered = [d for _, d in sorted(((_order_key(d, i), d) for i, d in enumerate(dets)), key=lambda t: t[0])]
    kept: list[Detection] = []
    for d in ordered:
        if all(iou(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


class _Cluster:
    __slots__ = ("members", "sum_conf", "sum_coords", "box")

    def __init__(self):
        self.members: list[tuple[float, float, float, BoundingBox]] = []
        self.sum_conf = Fraction(0)
        self.sum_coords = [Fraction(0)] * 4
        self.box: Optional[BoundingBox] = None

    def add(self, scored: float, raw: float, weight: float, box: BoundingBox) -> None:
        self.members.append((scored, raw, weight, box))
        c = Fraction(scored)
        self.sum_conf += c
        self.sum_coords = [s + c * Fraction(v) for s, v in zip(self.sum_coords, box)]
        if self.sum_conf > 0:
            coords = [float(s / self.sum_conf) for s in self.sum_coords]
        else:
            coords = [float(statistics.mean(m[3][k] for m in self.members)) for k in range(4)]
        self.box = BoundingBox(*coords)


def wbf_fuse(sources: Sequence[Sequence[Detection]], cfg: FusionConfig = FusionConfig()) -> list[Detection]:
    """Weighted boxes fusion across ``sources`` (one detection list per model or TTA variant).

    Confidences are multiplied by their source weight and visited in descending
    order. Each detection joins the cluster whose running fused box overlaps it
    most, if that IoU exceeds ``cfg.iou_threshold``; otherwise it seeds a new
    cluster. The fused box is the confidence-weighted mean of the members. The
    fused confidence is the mean member confidence scaled by
    ``min(T, N) / sum(weights)``, which is ``min(T, N) / T`` for unit weights,
    where ``T`` is the number of sources and ``N`` the cluster size.
    """
    if len(sources) == 0:
        raise InputDomainError("weighted boxes fusion needs at least one source")
    weights = cfg.weights if cfg.weights is not None else (1.0,) * len(sources)
    if len(weights) != len(sources):
        raise InputDomainError(f"{len(weights)} fusion weights for {len(sources)} sources")
    pooled = []
    for s, dets in enumerate(sources):
        for i, d in enumerate(dets):
            pooled.append(((-d.confidence * weights[s], *d.box, s, i), d.confidence * weights[s], d.confidence, weights[s], d.box))
    pooled.sort(key=lambda t: t[0])

    clusters: list[_Cluster] = []
    for _, scored, raw, weight, box in pooled:
        best, best_iou = None, cfg.iou_threshold
        for c in clusters:
            v = iou(box, c.box)
            if v > best_iou:
                best, best_iou = c, v
        if best is None:
            best = _Cluster()
            clusters.append(best)
        best.add(scored, raw, weight, box)

    n_sources = len(sources)
    total_weight = sum(weights)
    fused = []
    for c in clusters:
        n = len(c.members)
        scale = Fraction(min(n_sources, n))
        if cfg.score_mode == "mean":
            mean = sum((Fraction(m[0]) for m in c.members), Fraction(0)) / n
            score = float(mean * scale / Fraction(total_weight))
        else:
            weighted = sum((Fraction(m[0]) for m in c.members), Fraction(0))
            member_weight = sum((Fraction(m[2]) for m in c.members), Fraction(0))
            score = float(weighted / member_weight * scale / n_sources)
        score = min(1.0, score)
        if score < cfg.cull_threshold:
            continue
        fused.append(Detection(c.box, score))
    return list(canonical_detections(fused))


def detransform_predictions(p: TTAPredictionSet) -> dict[str, tuple[Detection, ...]]:
    """Map every detection back to the original image coordinates.

    Raises:
        InputDomainError: for an image without a canvas, or a box outside the
            transformed canvas.
    """
    t = TTATransform(p.transform)
    out = {}
    for image_id, dets in p.images.items():
        canvas = p.canvases.get(image_id)
        if t is TTATransform.IDENTITY:
            # the identity needs no canvas; check bounds only when one is known
            for d in dets:
                if canvas is not None and not canvas.contains(d.box):
                    raise InputDomainError(f"image {image_id}: box {tuple(d.box)} outside canvas")
            out[image_id] = tuple(dets)
            continue
        if canvas is None:
            raise InputDomainError(f"no canvas size for image {image_id}")
        out[image_id] = tuple(Detection(inverse_transform_box(d.box, t, canvas), d.confidence) for d in dets)
    return out


def transform_predictions(
    images: Mapping[str, Sequence[Detection]], t: TTATransform, canvases: Mapping[str, CanvasSize], name: str = ""
) -> TTAPredictionSet:
    """Forward counterpart of :func:`detransform_predictions`, mostly for building fixtures."""
    t = TTATransform(t)
    mapped = {
        image_id: tuple(Detection(transform_box(d.box, t, canvases[image_id]), d.confidence) for d in dets)
        for image_id, dets in images.items()
    }
    return TTAPredictionSet(transform=t, canvases=dict(canvases), images=mapped, name=name)


def tta_merge(variants: Sequence[TTAPredictionSet], cfg: FusionConfig = FusionConfig(), name: str = "tta") -> PredictionSet:
    """De-transform each variant and fuse per image, one source per variant."""
    if not variants:
        raise InputDomainError("tta_merge needs at least one variant")
    ids = set(variants[0].images)
    for v in variants[1:]:
        other = set(v.images)
        if other != ids:
            missing = sorted(ids - other)
            extra = sorted(other - ids)
            raise InputDomainError(
                f"variant {v.name or '?'} covers different images: missing {missing}, unexpected {extra}"
            )
    restored = [detransform_predictions(v) for v in variants]
    images = {image_id: tuple(wbf_fuse([r[image_id] for r in restored], cfg)) for image_id in sorted(ids)}
    return PredictionSet(name=name, images=images)


def pseudo_label(
    p: PredictionSet, confidence_threshold: float, canvases: Mapping[str, CanvasSize]
) -> GroundTruthSet:
    """Turn detections with confidence >= threshold into ground-truth boxes.

    Every image in ``canvases`` appears in the result. Boxes reaching past the
    canvas are clipped and tallied in ``warnings``.
    """
    if not (0.0 <= confidence_threshold <= 1.0):
        raise InputDomainError(f"confidence threshold {confidence_threshold} outside [0, 1]")
    unknown = sorted(set(p.images) - set(canvases))
    if unknown:
        raise InputDomainError(f"no canvas size for images {unknown}")
    warnings: Counter = Counter()
    images = {}
    for image_id, canvas in canvases.items():
        boxes = []
        for d in p.get(image_id):
            if d.confidence < confidence_threshold:
                continue
            b = clip_box(d.box, canvas)
            if b is None:
                warnings["dropped_outside"] += 1
                continue
            if b is not d.box:
                warnings["clipped"] += 1
            boxes.append(b)
        images[image_id] = ImageAnnotation(canvas, tuple(sorted(boxes)))
    return GroundTruthSet(images=images, variant="pseudo", warnings=warnings)
