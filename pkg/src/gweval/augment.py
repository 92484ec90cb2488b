"""Seeded detection augmentation: single-image op groups, Cutmix, Mixup and Mosaic.

Every sample draws from its own random stream, derived from ``(seed, sample
index)``, so results never depend on processing order. Multi-image stages read
partners from a snapshot of the batch taken before the stage runs.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, InputDomainError
from .geometry import BoundingBox, CanvasSize, TTATransform, area, clip_to_region, transform_box


@dataclass(frozen=True, eq=False)
class Sample:
    """An RGB image as a ``(height, width, 3)`` uint8 array plus its boxes."""

    pixels: np.ndarray
    boxes: tuple[BoundingBox, ...] = ()

    def __post_init__(self):
        px = self.pixels
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise InputDomainError(f"pixels must be an (H, W, 3) uint8 array, got {px.dtype} {px.shape}")
        size = self.size
        for b in self.boxes:
            if not size.contains(b):
                raise InputDomainError(f"box {tuple(b)} outside {size.width}x{size.height} image")

    @property
    def size(self) -> CanvasSize:
        return CanvasSize(self.pixels.shape[1], self.pixels.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return self.boxes == other.boxes and np.array_equal(self.pixels, other.pixels)


class SeededRng:
    """Factory of independent per-sample generators keyed by ``(seed, index)``."""

    def __init__(self, seed: int):
        if not (0 <= int(seed) < 2**64):
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)

    def stream(self, index: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(int(index),))))


# single-image ops ---------------------------------------------------------------------------


def _geometric(sample: Sample, t: TTATransform, pixels: np.ndarray) -> Sample:
    boxes = tuple(transform_box(b, t, sample.size) for b in sample.boxes)
    return Sample(np.ascontiguousarray(pixels), boxes)


def horizontal_flip(sample: Sample) -> Sample:
    return _geometric(sample, TTATransform.HORIZONTAL_FLIP, sample.pixels[:, ::-1])


def vertical_flip(sample: Sample) -> Sample:
    return _geometric(sample, TTATransform.VERTICAL_FLIP, sample.pixels[::-1])


def rotate_90(sample: Sample) -> Sample:
    """Rotate clockwise by 90 degrees."""
    return _geometric(sample, TTATransform.ROTATE_90_CW, np.rot90(sample.pixels, k=-1))


def brightness_shift(sample: Sample, delta) -> Sample:
    """Add ``delta`` (scalar or per channel) to every pixel, clamped to [0, 255]."""
    delta = np.broadcast_to(np.asarray(delta, dtype=np.int16), (3,))
    px = np.clip(sample.pixels.astype(np.int16) + delta, 0, 255).astype(np.uint8)
    return Sample(px, sample.boxes)


def channel_shuffle(sample: Sample, order: Sequence[int]) -> Sample:
    return Sample(np.ascontiguousarray(sample.pixels[:, :, list(order)]), sample.boxes)


def _op_hflip(sample, rng, cfg):
    return horizontal_flip(sample), {}


def _op_vflip(sample, rng, cfg):
    return vertical_flip(sample), {}


def _op_rot90(sample, rng, cfg):
    return rotate_90(sample), {}


def _op_brightness(sample, rng, cfg):
    d = cfg.brightness_delta
    delta = rng.integers(-d, d + 1, size=3)
    return brightness_shift(sample, delta), {"delta": delta.tolist()}


def _op_channel_shuffle(sample, rng, cfg):
    order = rng.permutation(3)
    return channel_shuffle(sample, order), {"order": order.tolist()}


SINGLE_IMAGE_OPS: dict[str, Callable] = {
    "horizontal-flip": _op_hflip,
    "vertical-flip": _op_vflip,
    "rotate-90": _op_rot90,
    "brightness": _op_brightness,
    "channel-shuffle": _op_channel_shuffle,
}
GEOMETRIC_OPS = frozenset({"horizontal-flip", "vertical-flip", "rotate-90"})


# configuration -------------------------------------------------------------------------------

STAGES = ("groups", "cutmix", "mixup", "mosaic")


@dataclass(frozen=True)
class AugmentConfig:
    groups: tuple[tuple[str, ...], ...] = ()
    cutmix: bool = False
    mixup: bool = False
    mosaic: bool = False
    probability: float = 0.5
    stage_probabilities: dict = field(default_factory=dict)
    mixup_weight: float = 0.5
    cutmix_area: tuple[float, float] = (0.25, 0.75)
    keep_fraction: float = 0.25
    brightness_delta: int = 32
    batch_size: Optional[int] = None

    def __post_init__(self):
        probs = {"default": self.probability, **self.stage_probabilities}
        for stage, p in probs.items():
            if stage != "default" and stage not in STAGES:
                raise ConfigError(f"unknown stage {stage!r} in stage_probabilities")
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"probability {p} for {stage} outside [0, 1]")
        if not (0.0 < self.mixup_weight < 1.0):
            raise ConfigError(f"mixup weight {self.mixup_weight} outside (0, 1)")
        lo, hi = self.cutmix_area
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigError(f"cutmix area range {self.cutmix_area} must satisfy 0 < lo <= hi < 1")
        if not (0.0 <= self.keep_fraction <= 1.0):
            raise ConfigError(f"keep fraction {self.keep_fraction} outside [0, 1]")
        if self.brightness_delta < 0 or self.brightness_delta > 255:
            raise ConfigError(f"brightness delta {self.brightness_delta} outside [0, 255]")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        for g in self.groups:
            if not g:
                raise ConfigError("op groups must be non-empty")
            for op in g:
                if op not in SINGLE_IMAGE_OPS:
                    raise ConfigError(f"unknown op {op!r}; known ops: {sorted(SINGLE_IMAGE_OPS)}")

    def stage_probability(self, stage: str) -> float:
        return self.stage_probabilities.get(stage, self.probability)

    @property
    def min_batch(self) -> int:
        need = 1
        if (self.cutmix and self.stage_probability("cutmix") > 0) or (self.mixup and self.stage_probability("mixup") > 0):
            need = 2
        if self.mosaic and self.stage_probability("mosaic") > 0:
            need = 4
        return need


_CONFIG_KEYS = {
    "groups", "cutmix", "mixup", "mosaic", "probability", "probabilities", "mixup_weight",
    "cutmix_area", "keep_fraction", "brightness_delta", "batch_size", "seed",
}


def load_augment_config(text: str) -> tuple[AugmentConfig, Optional[int]]:
    """Build a config from its JSON document; also returns the optional ``seed`` entry.

    Raises:
        ConfigError: on invalid JSON, unknown keys or out-of-range values.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"augment config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("augment config must be a JSON object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown augment config keys {sorted(unknown)}")
    try:
        cfg = AugmentConfig(
            groups=tuple(tuple(g) for g in doc.get("groups", ())),
            cutmix=bool(doc.get("cutmix", False)),
            mixup=bool(doc.get("mixup", False)),
            mosaic=bool(doc.get("mosaic", False)),
            probability=float(doc.get("probability", 0.5)),
            stage_probabilities={k: float(v) for k, v in doc.get("probabilities", {}).items()},
            mixup_weight=float(doc.get("mixup_weight", 0.5)),
            cutmix_area=tuple(float(v) for v in doc.get("cutmix_area", (0.25, 0.75))),
            keep_fraction=float(doc.get("keep_fraction", 0.25)),
            brightness_delta=int(doc.get("brightness_delta", 32)),
            batch_size=doc.get("batch_size"),
        )
    except (TypeError, ValueError, AttributeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid augment config: {exc}") from None
    seed = doc.get("seed")
    return cfg, (int(seed) if seed is not None else None)


# multi-image ops -----------------------------------------------------------------------------


def _same_size(a: Sample, b: Sample, what: str) -> None:
    if a.size != b.size:
        raise InputDomainError(f"{what} needs equal image sizes, got {tuple(a.size)} and {tuple(b.size)}")


def mixup(a: Sample, b: Sample, weight: float = 0.5) -> Sample:
    """Blend ``weight * a + (1 - weight) * b``, rounding halves away from zero; boxes of both are kept."""
    _same_size(a, b, "mixup")
    if not (0.0 < weight < 1.0):
        raise InputDomainError(f"mixup weight {weight} outside (0, 1)")
    blend = weight * a.pixels.astype(np.float64) + (1.0 - weight) * b.pixels.astype(np.float64)
    px = np.clip(np.floor(blend + 0.5), 0, 255).astype(np.uint8)
    return Sample(px, a.boxes + b.boxes)


def draw_cutmix_patch(rng: np.random.Generator, size: CanvasSize, area_range=(0.25, 0.75)) -> tuple[int, int, int, int]:
    """Integer patch ``(x0, y0, x1, y1)`` covering about ``lam`` of the image, same aspect ratio."""
    lam = rng.uniform(area_range[0], area_range[1])
    side = math.sqrt(lam)
    pw = min(size.width, max(1, round(side * size.width)))
    ph = min(size.height, max(1, round(side * size.height)))
    x0 = int(rng.integers(0, size.width - pw + 1))
    y0 = int(rng.integers(0, size.height - ph + 1))
    return x0, y0, x0 + pw, y0 + ph


def cutmix_patch(a: Sample, b: Sample, patch: tuple[int, int, int, int], keep_fraction: float = 0.25) -> Sample:
    """Paste ``b``'s pixels inside ``patch`` onto ``a``.

    Boxes of ``b`` are clipped to the patch and kept when the visible part is at
    least ``keep_fraction`` of the original. Boxes of ``a`` keep their coordinates
    and survive when at least ``keep_fraction`` of their area lies outside the patch.
    """
    _same_size(a, b, "cutmix")
    x0, y0, x1, y1 = patch
    px = a.pixels.copy()
    px[y0:y1, x0:x1] = b.pixels[y0:y1, x0:x1]
    boxes = []
    for box in a.boxes:
        inside = clip_to_region(box, x0, y0, x1, y1)
        outside = area(box) - (area(inside) if inside is not None else 0.0)
        if outside >= keep_fraction * area(box):
            boxes.append(box)
    for box in b.boxes:
        inside = clip_to_region(box, x0, y0, x1, y1)
        if inside is not None and area(inside) >= keep_fraction * area(box):
            boxes.append(inside)
    return Sample(px, tuple(boxes))


def cutmix(
    a: Sample, b: Sample, rng: np.random.Generator, area_range=(0.25, 0.75), keep_fraction: float = 0.25
) -> Sample:
    _same_size(a, b, "cutmix")
    return cutmix_patch(a, b, draw_cutmix_patch(rng, a.size, area_range), keep_fraction)


def draw_joint_point(rng: np.random.Generator, size: CanvasSize) -> tuple[int, int]:
    """Joint point of a ``2W x 2H`` mosaic, uniform over the central half of each axis."""
    def axis(n: int) -> int:
        lo = max(1, math.ceil(0.5 * n))
        hi = min(2 * n - 1, math.floor(1.5 * n))
        return int(rng.integers(lo, hi + 1))

    return axis(size.width), axis(size.height)


def _resize_nearest(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    cols = ((2 * np.arange(width) + 1) * w) // (2 * width)
    rows = ((2 * np.arange(height) + 1) * h) // (2 * height)
    return pixels[rows[:, None], cols[None, :]]


def mosaic_at(quad: Sequence[Sample], joint: tuple[int, int], keep_fraction: float = 0.25) -> Sample:
    """Stitch four samples (top-left, top-right, bottom-left, bottom-right) around ``joint``."""
    if len(quad) != 4:
        raise InputDomainError(f"mosaic takes exactly 4 samples, got {len(quad)}")
    for s in quad[1:]:
        _same_size(quad[0], s, "mosaic")
    w, h = quad[0].size
    jx, jy = joint
    if not (0 < jx < 2 * w and 0 < jy < 2 * h):
        raise InputDomainError(f"joint point {joint} must lie strictly inside the {2 * w}x{2 * h} canvas")
    px = np.zeros((2 * h, 2 * w, 3), dtype=np.uint8)
    regions = ((0, 0, jx, jy), (jx, 0, 2 * w, jy), (0, jy, jx, 2 * h), (jx, jy, 2 * w, 2 * h))
    boxes = []
    for s, (rx0, ry0, rx1, ry1) in zip(quad, regions):
        qw, qh = rx1 - rx0, ry1 - ry0
        px[ry0:ry1, rx0:rx1] = _resize_nearest(s.pixels, qw, qh)
        for b in s.boxes:
            moved = BoundingBox(
                b.x_min * qw / w + rx0, b.y_min * qh / h + ry0, b.x_max * qw / w + rx0, b.y_max * qh / h + ry0
            )
            kept = clip_to_region(moved, rx0, ry0, rx1, ry1)
            if kept is not None and area(kept) >= keep_fraction * area(moved):
                boxes.append(kept)
    return Sample(px, tuple(boxes))


def mosaic(quad: Sequence[Sample], rng: np.random.Generator, keep_fraction: float = 0.25) -> Sample:
    if len(quad) != 4:
        raise InputDomainError(f"mosaic takes exactly 4 samples, got {len(quad)}")
    for s in quad[1:]:
        _same_size(quad[0], s, "mosaic")
    return mosaic_at(quad, draw_joint_point(rng, quad[0].size), keep_fraction)


def apply_single_image_group(
    sample: Sample, group: Sequence[str], rng: np.random.Generator, cfg: Optional[AugmentConfig] = None
) -> Sample:
    """Apply one op of ``group`` picked uniformly at random."""
    return _apply_group(sample, group, rng, cfg or AugmentConfig())[0]


def _apply_group(sample, group, rng, cfg):
    if not group:
        raise InputDomainError("op group is empty")
    name = group[int(rng.integers(len(group)))]
    try:
        op = SINGLE_IMAGE_OPS[name]
    except KeyError:
        raise InputDomainError(f"unknown op {name!r}") from None
    out, params = op(sample, rng, cfg)
    return out, {"op": name, **params}


# pipeline ------------------------------------------------------------------------------------


def _partners(rng, batch, i, count):
    size = batch[i].size
    cands = [j for j in range(len(batch)) if j != i and batch[j].size == size]
    if len(cands) < count:
        return None
    return [int(j) for j in rng.choice(cands, size=count, replace=False)]


def run_pipeline(
    batch: Sequence[Sample],
    cfg: AugmentConfig,
    seed: int,
    audit: Optional[list] = None,
    index_offset: int = 0,
) -> list[Sample]:
    """Augment a batch; output length always equals input length.

    Stage order: each single-image group, then Cutmix, Mixup, Mosaic. For every
    sample and enabled stage a Bernoulli draw on the sample's own stream decides
    whether the stage applies. Mosaic replaces the anchor sample with the 2x
    stitched image; the partners themselves pass through unchanged.

    Args:
        audit: if given, receives one dict per sample listing each stage's draw
            and parameters.
        index_offset: global index of ``batch[0]``, so splitting a dataset into
            batches does not change any sample's stream.

    Raises:
        ConfigError: when a multi-image stage is enabled and the batch is too small.
    """
    if not batch:
        raise InputDomainError("empty batch")
    if len(batch) < cfg.min_batch:
        raise ConfigError(f"enabled multi-image stages need a batch of at least {cfg.min_batch}, got {len(batch)}")
    root = SeededRng(seed)
    rngs = [root.stream(index_offset + i) for i in range(len(batch))]
    records: list[list[dict[str, Any]]] = [[] for _ in batch]
    current = list(batch)

    for g, group in enumerate(cfg.groups):
        p = cfg.stage_probability("groups")
        for i, rng in enumerate(rngs):
            u = float(rng.random())
            rec = {"stage": f"group[{g}]", "draw": u, "applied": u < p}
            if u < p:
                current[i], params = _apply_group(current[i], group, rng, cfg)
                rec.update(params)
            records[i].append(rec)

    def pairwise(stage, fn):
        p = cfg.stage_probability(stage)
        snapshot = list(current)
        for i, rng in enumerate(rngs):
            u = float(rng.random())
            rec = {"stage": stage, "draw": u, "applied": False}
            if u < p:
                partner = _partners(rng, snapshot, i, 1)
                if partner is None:
                    rec["skipped"] = "no same-size partner"
                else:
                    current[i], params = fn(snapshot[i], snapshot[partner[0]], rng)
                    rec.update(applied=True, partners=partner, **params)
            records[i].append(rec)

    if cfg.cutmix:
        def _cut(a, b, rng):
            patch = draw_cutmix_patch(rng, a.size, cfg.cutmix_area)
            return cutmix_patch(a, b, patch, cfg.keep_fraction), {"patch": list(patch)}

        pairwise("cutmix", _cut)
    if cfg.mixup:
        pairwise("mixup", lambda a, b, rng: (mixup(a, b, cfg.mixup_weight), {"weight": cfg.mixup_weight}))
    if cfg.mosaic:
        p = cfg.stage_probability("mosaic")
        snapshot = list(current)
        for i, rng in enumerate(rngs):
            u = float(rng.random())
            rec = {"stage": "mosaic", "draw": u, "applied": False}
            if u < p:
                partners = _partners(rng, snapshot, i, 3)
                if partners is None:
                    rec["skipped"] = "fewer than 3 same-size partners"
                else:
                    joint = draw_joint_point(rng, snapshot[i].size)
                    quad = [snapshot[i]] + [snapshot[j] for j in partners]
                    current[i] = mosaic_at(quad, joint, cfg.keep_fraction)
                    rec.update(applied=True, partners=partners, joint=list(joint))
            records[i].append(rec)

    if audit is not None:
        audit.extend(records)
    return current


# PPM I/O -------------------------------------------------------------------------------------


def _ppm_tokens(data: bytes, count: int, name: str) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", source=name)
        tokens.append(data[start:pos])
    return tokens, pos


def decode_ppm(data: bytes, name: str = "<ppm>") -> np.ndarray:
    tokens, pos = _ppm_tokens(data, 4, name)
    if tokens[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {tokens[0]!r})", source=name)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("unparsable PPM header", source=name) from None
    if maxval != 255 or width < 1 or height < 1:
        raise FormatError(f"unsupported PPM {width}x{height} maxval {maxval}", source=name)
    pos += 1
    body = data[pos : pos + width * height * 3]
    if len(body) != width * height * 3:
        raise FormatError(f"PPM body has {len(body)} bytes, expected {width * height * 3}", source=name)
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read(), os.fspath(path))


def write_ppm(path, pixels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(pixels))
