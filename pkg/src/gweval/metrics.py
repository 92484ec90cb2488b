"""Dataset-level scores: the global image mean, the per-domain balanced mean,
per-domain error rates, missed-object size histograms and a one-way ANOVA.

Means are accumulated in exact rational arithmetic and rounded once, so the
global and domain-balanced means agree bit-for-bit whenever every domain holds
the same number of images.
"""
from __future__ import annotations

import logging
import math
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import special

from ._parallel import parallel_map
from .errors import DegenerateVarianceError, InputDomainError
from .geometry import area
from .ingest import GroundTruthSet, PredictionSet
from .matching import DEFAULT_THRESHOLDS, image_accuracy, sweep_thresholds

log = logging.getLogger(__name__)

HISTOGRAM_BINS = 32


@dataclass(frozen=True)
class ImageScore:
    image_id: str
    domain: str
    accuracy: float
    thresholds: tuple[float, ...]
    counts: tuple[tuple[int, int, int], ...]
    pairs: Optional[tuple[tuple[tuple[int, int, float], ...], ...]] = None

    def counts_at(self, threshold: float) -> tuple[int, int, int]:
        return self.counts[self.thresholds.index(threshold)]


@dataclass(frozen=True)
class DomainAggregate:
    domain: str
    n: int
    mean_accuracy: float
    std_accuracy: float
    missed_rate: float
    false_positive_rate: float
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class SizeHistogram:
    """Counts over sqrt(box area) with shared bin edges."""

    edges: tuple[float, ...]
    all_counts: tuple[int, ...]
    missed_counts: tuple[int, ...]
    median_ratio: Optional[float]


@dataclass(frozen=True)
class AnovaResult:
    f_statistic: float
    df_between: int
    df_within: int
    p_value: float


@dataclass(frozen=True)
class EvaluationReport:
    images: tuple[ImageScore, ...]
    domains: tuple[DomainAggregate, ...]
    kaggle_accuracy: float
    weighted_accuracy: float
    n: int
    D: int
    thresholds: tuple[float, ...]
    rate_threshold: float
    size_histogram: Optional[SizeHistogram] = None
    error_missed_correlation: Optional[float] = None
    warnings: Counter = field(default_factory=Counter)

    @property
    def pairs_retained(self) -> bool:
        return self.size_histogram is not None


def _exact_mean(values) -> Fraction:
    values = list(values)
    return sum((Fraction(v) for v in values), Fraction(0)) / len(values)


def kaggle_accuracy(scores: Sequence[ImageScore]) -> float:
    """Unweighted mean of per-image accuracies."""
    if not scores:
        raise InputDomainError("cannot average an empty list of image scores")
    return float(_exact_mean(s.accuracy for s in scores))


def _group(scores: Sequence[ImageScore], domains: Optional[Mapping[str, str]]) -> dict[str, list[ImageScore]]:
    groups: dict[str, list[ImageScore]] = defaultdict(list)
    for s in scores:
        if domains is None:
            domain = s.domain
        else:
            try:
                domain = domains[s.image_id]
            except KeyError:
                raise InputDomainError(f"image {s.image_id} has no domain") from None
        groups[domain].append(s)
    return dict(sorted(groups.items()))


def weighted_accuracy(scores: Sequence[ImageScore], domains: Optional[Mapping[str, str]] = None) -> float:
    """Mean over domains of each domain's mean image accuracy.

    ``domains`` maps image id to domain; when omitted each score's own
    ``domain`` field is used.
    """
    if not scores:
        raise InputDomainError("cannot average an empty list of image scores")
    groups = _group(scores, domains)
    per_domain = [_exact_mean(s.accuracy for s in members) for members in groups.values()]
    return float(sum(per_domain, Fraction(0)) / len(per_domain))


def _rate(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def domain_aggregates(
    scores: Sequence[ImageScore],
    domains: Optional[Mapping[str, str]] = None,
    rate_threshold: Optional[float] = None,
) -> list[DomainAggregate]:
    """Per-domain mean, population std, missed rate and false-positive rate.

    Rates pool TP/FP/FN over the domain's images at ``rate_threshold``
    (default: 0.5 when swept, otherwise the lowest swept threshold). A zero
    denominator yields rate 0 and a flag.
    """
    out = []
    for domain, members in _group(scores, domains).items():
        thr = rate_threshold if rate_threshold is not None else pick_rate_threshold(members[0].thresholds)
        tp = fp = fn = 0
        for s in members:
            a, b, c = s.counts_at(thr)
            tp, fp, fn = tp + a, fp + b, fn + c
        missed, flag_m = _rate(fn, tp + fn)
        fpr, flag_f = _rate(fp, tp + fp)
        flags = tuple(f for f, on in (("missed_rate_undefined", flag_m), ("fp_rate_undefined", flag_f)) if on)
        accs = [s.accuracy for s in members]
        out.append(
            DomainAggregate(
                domain=domain,
                n=len(members),
                mean_accuracy=float(_exact_mean(accs)),
                std_accuracy=float(statistics.pstdev(accs)),
                missed_rate=missed,
                false_positive_rate=fpr,
                flags=flags,
            )
        )
    return out


def pick_rate_threshold(thresholds: Sequence[float]) -> float:
    return 0.5 if 0.5 in thresholds else min(thresholds)


def error_missed_correlation(aggregates: Sequence[DomainAggregate]) -> Optional[float]:
    """Pearson correlation between per-domain error (1 - mean) and missed rate; None when undefined."""
    if len(aggregates) < 2:
        return None
    try:
        return statistics.correlation([1 - a.mean_accuracy for a in aggregates], [a.missed_rate for a in aggregates])
    except statistics.StatisticsError:
        return None


def missed_size_histogram(scores: Sequence[ImageScore], gt: GroundTruthSet, threshold: float = 0.5) -> SizeHistogram:
    """Histogram sqrt(area) of every ground-truth box and of those missed at ``threshold``.

    Bin edges: 32 equal bins on [0, 99th percentile of all sqrt-areas]; values above
    the top edge land in the last bin so counts stay complete. ``median_ratio`` is
    sqrt(median missed area / median area), or None when nothing was missed.
    """
    all_areas: list[float] = []
    missed_areas: list[float] = []
    for s in scores:
        if s.pairs is None:
            raise InputDomainError(f"image {s.image_id} has no pair data; evaluate with pair retention")
        boxes = gt.images[s.image_id].boxes if s.image_id in gt.images else ()
        matched = {g for _, g, _ in s.pairs[s.thresholds.index(threshold)]}
        for i, b in enumerate(boxes):
            a = area(b)
            all_areas.append(a)
            if i not in matched:
                missed_areas.append(a)
    all_sides = np.sqrt(np.asarray(all_areas, dtype=np.float64))
    missed_sides = np.sqrt(np.asarray(missed_areas, dtype=np.float64))
    top = float(np.percentile(all_sides, 99)) if len(all_sides) else 1.0
    if top <= 0:
        top = 1.0
    edges = np.linspace(0.0, top, HISTOGRAM_BINS + 1)
    all_counts, _ = np.histogram(np.minimum(all_sides, top), bins=edges)
    missed_counts, _ = np.histogram(np.minimum(missed_sides, top), bins=edges)
    ratio = None
    if missed_areas:
        ratio = math.sqrt(statistics.median(missed_areas) / statistics.median(all_areas))
    return SizeHistogram(
        edges=tuple(edges.tolist()),
        all_counts=tuple(int(c) for c in all_counts),
        missed_counts=tuple(int(c) for c in missed_counts),
        median_ratio=ratio,
    )


def one_way_anova(groups: Sequence[Sequence]) -> tuple:
    """Fixed-effects one-way ANOVA on raw values.

    Sums of squares are formed exactly; with :class:`~fractions.Fraction` inputs the
    returned F is an exact rational, otherwise a float.

    Returns:
        ``(F, df_between, df_within)``.

    Raises:
        InputDomainError: fewer than 2 groups, an empty group, or fewer than 2
            residual degrees of freedom.
        DegenerateVarianceError: within-group variance is exactly zero.
    """
    k = len(groups)
    if k < 2:
        raise InputDomainError(f"ANOVA needs at least 2 groups, got {k}")
    if any(len(g) == 0 for g in groups):
        raise InputDomainError("ANOVA groups must be non-empty")
    exact = all(isinstance(v, (int, Fraction)) for g in groups for v in g)
    fgroups = [[Fraction(v) for v in g] for g in groups]
    n = sum(len(g) for g in fgroups)
    df_b, df_w = k - 1, n - k
    if df_w < 2:
        raise InputDomainError(f"ANOVA needs at least 2 residual degrees of freedom, got {df_w}")
    grand = sum(sum(g) for g in fgroups) / n
    means = [sum(g) / len(g) for g in fgroups]
    ssb = sum(len(g) * (m - grand) ** 2 for g, m in zip(fgroups, means))
    ssw = sum(sum((v - m) ** 2 for v in g) for g, m in zip(fgroups, means))
    if ssw == 0:
        raise DegenerateVarianceError("within-group variance is zero; F is undefined")
    f = (ssb / df_b) / (ssw / df_w)
    return (f if exact else float(f)), df_b, df_w


def f_survival(f: float, df_between: int, df_within: int) -> float:
    """P(F' >= f) for F' ~ F(df_between, df_within), through the regularized incomplete beta."""
    if f <= 0:
        return 1.0
    x = df_within / (df_within + df_between * f)
    return float(special.betainc(df_within / 2.0, df_between / 2.0, x))


def anova_domains(scores: Sequence[ImageScore], domains: Optional[Mapping[str, str]] = None) -> AnovaResult:
    groups = _group(scores, domains)
    f, df_b, df_w = one_way_anova([[s.accuracy for s in members] for members in groups.values()])
    return AnovaResult(float(f), df_b, df_w, f_survival(float(f), df_b, df_w))


def _score_image(args) -> ImageScore:
    image_id, domain, boxes, dets, thresholds, retain = args
    sweep = sweep_thresholds(boxes, dets, thresholds, keep_pairs=retain)
    return ImageScore(
        image_id=image_id,
        domain=domain,
        accuracy=image_accuracy(sweep),
        thresholds=tuple(thresholds),
        counts=tuple((m.tp, m.fp, m.fn) for m in sweep),
        pairs=tuple(m.pairs for m in sweep) if retain else None,
    )


def score_images(
    gt: GroundTruthSet,
    preds: PredictionSet,
    domains: Mapping[str, str],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    retain_pairs: bool = False,
) -> tuple[list[ImageScore], Counter]:
    """Score every ground-truth image. Images absent from ``preds`` count as empty predictions."""
    warnings: Counter = Counter()
    jobs = []
    for image_id in sorted(gt.images):
        if image_id not in domains:
            raise InputDomainError(f"image {image_id} has no domain")
        if image_id not in preds.images:
            warnings["missing_prediction_images"] += 1
        jobs.append((image_id, domains[image_id], gt.images[image_id].boxes, preds.get(image_id), thresholds, retain_pairs))
        if not gt.images[image_id].boxes and not preds.get(image_id):
            warnings["empty_empty_images"] += 1
    extra = set(preds.images) - set(gt.images)
    if extra:
        warnings["unknown_prediction_images"] += len(extra)
        log.warning("%d predicted images are not in the ground truth and are ignored", len(extra))
    if warnings["missing_prediction_images"]:
        log.warning("%d ground-truth images have no predictions", warnings["missing_prediction_images"])
    return parallel_map(_score_image, jobs), warnings


def evaluate(
    gt: GroundTruthSet,
    preds: PredictionSet,
    domains: Mapping[str, str],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    retain_pairs: bool = False,
) -> EvaluationReport:
    thresholds = tuple(thresholds)
    scores, warnings = score_images(gt, preds, domains, thresholds, retain_pairs)
    if not scores:
        raise InputDomainError("ground truth contains no images")
    warnings.update(gt.warnings)
    warnings.update(preds.warnings)
    rate_thr = pick_rate_threshold(thresholds)
    aggregates = domain_aggregates(scores, rate_threshold=rate_thr)
    histogram = missed_size_histogram(scores, gt, rate_thr) if retain_pairs else None
    return EvaluationReport(
        images=tuple(scores),
        domains=tuple(aggregates),
        kaggle_accuracy=kaggle_accuracy(scores),
        weighted_accuracy=weighted_accuracy(scores),
        n=len(scores),
        D=len(aggregates),
        thresholds=thresholds,
        rate_threshold=rate_thr,
        size_histogram=histogram,
        error_missed_correlation=error_missed_correlation(aggregates),
        warnings=+warnings,
    )
