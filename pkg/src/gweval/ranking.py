"""Leaderboards under the global and domain-balanced metrics, and rank shifts between them."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence

from .errors import InputDomainError
from .ingest import GroundTruthSet, PredictionSet
from .matching import DEFAULT_THRESHOLDS
from .metrics import evaluate

METRICS = ("kaggle", "weighted")


@dataclass(frozen=True)
class SubmissionScore:
    name: str
    kaggle_accuracy: float
    weighted_accuracy: float
    warnings: Counter = field(default_factory=Counter, compare=False)

    def metric(self, which: str) -> float:
        if which == "kaggle":
            return self.kaggle_accuracy
        if which == "weighted":
            return self.weighted_accuracy
        raise InputDomainError(f"unknown metric {which!r}; expected one of {METRICS}")


@dataclass(frozen=True)
class RankRow:
    rank: int
    name: str
    score: float


@dataclass(frozen=True)
class RankTable:
    metric: str
    rows: tuple[RankRow, ...]

    def rank_of(self, name: str) -> int:
        for r in self.rows:
            if r.name == name:
                return r.rank
        raise KeyError(name)


@dataclass(frozen=True)
class RankChange:
    name: str
    rank_a: int
    rank_b: int

    @property
    def delta(self) -> int:
        """Positive when the submission moved up in table b."""
        return self.rank_a - self.rank_b


@dataclass(frozen=True)
class RankDelta:
    changes: tuple[RankChange, ...]
    max_riser: Optional[RankChange]
    max_faller: Optional[RankChange]
    spearman: Optional[float]


def evaluate_submission(
    p: PredictionSet,
    gt: GroundTruthSet,
    domains: Mapping[str, str],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> SubmissionScore:
    report = evaluate(gt, p, domains, thresholds)
    return SubmissionScore(p.name, report.kaggle_accuracy, report.weighted_accuracy, report.warnings)


def rank_table(scores: Sequence[SubmissionScore], metric: str = "kaggle") -> RankTable:
    """Sort by ``metric`` descending, then name; equal scores share a rank (1, 2, 2, 4)."""
    if metric not in METRICS:
        raise InputDomainError(f"unknown metric {metric!r}; expected one of {METRICS}")
    if not scores:
        raise InputDomainError("cannot rank an empty list of submissions")
    names = [s.name for s in scores]
    if len(set(names)) != len(names):
        dup = sorted(n for n, c in Counter(names).items() if c > 1)
        raise InputDomainError(f"duplicate submission names {dup}")
    ordered = sorted(scores, key=lambda s: (-s.metric(metric), s.name))
    rows = []
    for pos, s in enumerate(ordered):
        value = s.metric(metric)
        if rows and rows[-1].score == value:
            rank = rows[-1].rank
        else:
            rank = pos + 1
        rows.append(RankRow(rank, s.name, value))
    return RankTable(metric, tuple(rows))


def _midranks(table: RankTable) -> dict[str, Fraction]:
    sizes = Counter(r.rank for r in table.rows)
    return {r.name: r.rank + Fraction(sizes[r.rank] - 1, 2) for r in table.rows}


def spearman(a: RankTable, b: RankTable) -> Optional[float]:
    """Pearson correlation of tie-corrected midranks.

    Returns None when exactly one table is a single tie block; two such tables
    order nothing differently and score 1.
    """
    ma, mb = _midranks(a), _midranks(b)
    names = sorted(ma)
    xa = [ma[n] for n in names]
    xb = [mb[n] for n in names]
    n = len(names)
    mean_a, mean_b = sum(xa) / n, sum(xb) / n
    cov = sum((x - mean_a) * (y - mean_b) for x, y in zip(xa, xb))
    var_a = sum((x - mean_a) ** 2 for x in xa)
    var_b = sum((y - mean_b) ** 2 for y in xb)
    if var_a == 0 and var_b == 0:
        return 1.0
    if var_a == 0 or var_b == 0:
        return None
    r_squared = cov * cov / (var_a * var_b)
    return math.copysign(math.sqrt(float(r_squared)), float(cov))


def rank_delta(a: RankTable, b: RankTable) -> RankDelta:
    """Per-submission rank change from table ``a`` to table ``b``.

    Raises:
        InputDomainError: if the tables rank different submissions.
    """
    names_a = {r.name for r in a.rows}
    names_b = {r.name for r in b.rows}
    if names_a != names_b:
        raise InputDomainError(
            f"tables rank different submissions: only in a {sorted(names_a - names_b)}, "
            f"only in b {sorted(names_b - names_a)}"
        )
    rank_b = {r.name: r.rank for r in b.rows}
    changes = tuple(sorted((RankChange(r.name, r.rank, rank_b[r.name]) for r in a.rows), key=lambda c: c.name))
    riser = max(changes, key=lambda c: (c.delta, -c.rank_b), default=None)
    faller = min(changes, key=lambda c: (c.delta, -c.rank_b), default=None)
    if riser is not None and riser.delta <= 0:
        riser = None
    if faller is not None and faller.delta >= 0:
        faller = None
    return RankDelta(changes, riser, faller, spearman(a, b))
