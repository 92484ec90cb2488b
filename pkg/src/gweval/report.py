"""The versioned JSON report document shared by every CLI command.

Top-level layout::

    {
      "schema": "gweval.report",
      "schema_version": 1,
      "tool_version": "...",
      "command": ["evaluate", "--gt", "..."],
      "inputs": {"<path>": "<sha256 hex>"},
      "payload_type": "evaluation" | "ranking" | "fusion" | "augment" | "pseudo-label",
      "payload": {...},
      "warnings": {"<tally name>": <count>}
    }
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from . import __version__
from .errors import InputDomainError
from .metrics import (
    DomainAggregate,
    EvaluationReport,
    ImageScore,
    SizeHistogram,
)
from .ranking import RankDelta, RankTable

SCHEMA = "gweval.report"
SCHEMA_VERSION = 1
PAYLOAD_TYPES = ("evaluation", "ranking", "fusion", "augment", "pseudo-label")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ReportDocument:
    command: list[str]
    payload_type: str
    payload: dict[str, Any]
    inputs: dict[str, str] = field(default_factory=dict)
    warnings: dict[str, int] = field(default_factory=dict)
    tool_version: str = __version__

    def __post_init__(self):
        if self.payload_type not in PAYLOAD_TYPES:
            raise ValueError(f"unknown payload type {self.payload_type!r}")

    def add_input(self, path) -> None:
        self.inputs[os.fspath(path)] = sha256_file(path)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": SCHEMA,
            "schema_version": SCHEMA_VERSION,
            "tool_version": self.tool_version,
            "command": list(self.command),
            "inputs": dict(sorted(self.inputs.items())),
            "payload_type": self.payload_type,
            "payload": self.payload,
            "warnings": dict(sorted(self.warnings.items())),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ReportDocument":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputDomainError(f"report is not valid JSON: {exc}") from None
        if not isinstance(doc, dict) or doc.get("schema") != SCHEMA:
            raise InputDomainError("not a gweval report document")
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise InputDomainError(f"unsupported report schema version {doc.get('schema_version')}")
        return cls(
            command=doc["command"],
            payload_type=doc["payload_type"],
            payload=doc["payload"],
            inputs=doc.get("inputs", {}),
            warnings=doc.get("warnings", {}),
            tool_version=doc.get("tool_version", ""),
        )


def _image_to_dict(s: ImageScore) -> dict[str, Any]:
    out: dict[str, Any] = {
        "image_id": s.image_id,
        "domain": s.domain,
        "accuracy": s.accuracy,
        "counts": [list(c) for c in s.counts],
    }
    if s.pairs is not None:
        out["pairs"] = [[[p, g, v] for p, g, v in level] for level in s.pairs]
    return out


def _domain_to_dict(d: DomainAggregate) -> dict[str, Any]:
    return {
        "domain": d.domain,
        "n": d.n,
        "mean_accuracy": d.mean_accuracy,
        "std_accuracy": d.std_accuracy,
        "missed_rate": d.missed_rate,
        "false_positive_rate": d.false_positive_rate,
        "flags": list(d.flags),
    }


def histogram_to_dict(h: Optional[SizeHistogram]) -> Optional[dict[str, Any]]:
    if h is None:
        return None
    return {
        "axis": "sqrt_area",
        "edges": list(h.edges),
        "all": list(h.all_counts),
        "missed": list(h.missed_counts),
        "median_ratio": h.median_ratio,
    }


def evaluation_payload(r: EvaluationReport) -> dict[str, Any]:
    return {
        "kaggle_accuracy": r.kaggle_accuracy,
        "weighted_accuracy": r.weighted_accuracy,
        "n": r.n,
        "D": r.D,
        "thresholds": list(r.thresholds),
        "rate_threshold": r.rate_threshold,
        "empty_image_convention": "an image with no ground truth and no predictions scores 1.0 per threshold",
        "std_convention": "population",
        "pairs_retained": r.pairs_retained,
        "error_missed_correlation": r.error_missed_correlation,
        "domains": [_domain_to_dict(d) for d in r.domains],
        "size_histogram": histogram_to_dict(r.size_histogram),
        "images": [_image_to_dict(s) for s in r.images],
    }


def images_from_payload(payload: Mapping[str, Any]) -> list[ImageScore]:
    thresholds = tuple(payload["thresholds"])
    out = []
    for row in payload["images"]:
        pairs = None
        if "pairs" in row:
            pairs = tuple(tuple((int(p), int(g), float(v)) for p, g, v in level) for level in row["pairs"])
        out.append(
            ImageScore(
                image_id=row["image_id"],
                domain=row["domain"],
                accuracy=float(row["accuracy"]),
                thresholds=thresholds,
                counts=tuple(tuple(int(x) for x in c) for c in row["counts"]),
                pairs=pairs,
            )
        )
    return out


def table_to_dict(t: RankTable) -> dict[str, Any]:
    return {"metric": t.metric, "rows": [{"rank": r.rank, "name": r.name, "score": r.score} for r in t.rows]}


def delta_to_dict(d: RankDelta) -> dict[str, Any]:
    def change(c):
        if c is None:
            return None
        return {"name": c.name, "rank_a": c.rank_a, "rank_b": c.rank_b, "delta": c.delta}

    return {
        "changes": [change(c) for c in d.changes],
        "max_riser": change(d.max_riser),
        "max_faller": change(d.max_faller),
        "spearman": d.spearman,
    }
