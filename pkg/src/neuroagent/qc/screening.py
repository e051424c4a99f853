"""Cohort-level outlier screening on per-subject metrics."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Mapping, Sequence

from ..errors import TooFewValues
from .metrics import MetricVector


class Direction(str, Enum):
    HIGH_BAD = "high_bad"
    LOW_BAD = "low_bad"
    BOTH = "both"


class RuleKind(str, Enum):
    IQR = "iqr"
    TOPK = "topk"


def _clean(values: Mapping[str, float | None]) -> dict[str, float]:
    out = {}
    for subject, v in values.items():
        if v is None or (isinstance(v, float) and math.isnan(v)):
            continue
        out[subject] = float(v)
    return out


def tukey_hinges(values: Sequence[float]) -> tuple[float, float]:
    """Lower and upper hinges: medians of the lower and upper halves.

    With an odd count the median belongs to both halves.
    """
    xs = sorted(values)
    n = len(xs)
    lower = xs[: (n + 1) // 2]
    upper = xs[n // 2 :]
    return statistics.median(lower), statistics.median(upper)


def iqr_fences(values: Sequence[float], multiplier: float = 1.5) -> tuple[float, float]:
    q1, q3 = tukey_hinges(values)
    spread = q3 - q1
    return q1 - multiplier * spread, q3 + multiplier * spread


def screen_iqr(values: Mapping[str, float | None], multiplier: float = 1.5, direction: Direction = Direction.BOTH) -> set[str]:
    """Subjects strictly outside the Tukey fences on their bad side(s)."""
    vals = _clean(values)
    if len(vals) < 4:
        raise TooFewValues(f"IQR screening needs at least 4 values, got {len(vals)}")
    lo, hi = iqr_fences(list(vals.values()), multiplier)
    direction = Direction(direction)
    flagged = set()
    for subject, v in vals.items():
        if v < lo and direction is not Direction.HIGH_BAD:
            flagged.add(subject)
        elif v > hi and direction is not Direction.LOW_BAD:
            flagged.add(subject)
    return flagged


def topk_count(fraction: float, n: int) -> int:
    """ceil(fraction * n) in exact arithmetic, so 0.15 * 20 gives 3, not 4."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    return math.ceil(Fraction(str(fraction)) * n)


def screen_topk(values: Mapping[str, float | None], fraction: float = 0.15, direction: Direction = Direction.BOTH) -> set[str]:
    """The ceil(fraction * N) most abnormal subjects; ties go to the smaller id."""
    vals = _clean(values)
    if not vals:
        raise ValueError("top-k screening needs at least one value")
    k = topk_count(fraction, len(vals))
    direction = Direction(direction)
    if direction is Direction.LOW_BAD:
        key = lambda item: (item[1], item[0])
    elif direction is Direction.HIGH_BAD:
        key = lambda item: (-item[1], item[0])
    else:
        center = statistics.median(vals.values())
        key = lambda item: (-abs(item[1] - center), item[0])
    ranked = sorted(vals.items(), key=key)
    return {subject for subject, _ in ranked[:k]}


@dataclass(frozen=True)
class ScreeningRule:
    kind: RuleKind = RuleKind.IQR
    iqr_multiplier: float = 1.5
    fraction: float = 0.15
    directions: Mapping[str, Direction] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", RuleKind(self.kind))
        object.__setattr__(self, "directions", {k: Direction(v) for k, v in dict(self.directions).items()})
        if not 0 < self.fraction <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.iqr_multiplier < 0:
            raise ValueError("iqr_multiplier must be non-negative")

    def direction(self, metric: str) -> Direction:
        return self.directions.get(metric, Direction.BOTH)

    def apply(self, values: Mapping[str, float | None], metric: str) -> set[str]:
        if self.kind is RuleKind.IQR:
            return screen_iqr(values, self.iqr_multiplier, self.direction(metric))
        return screen_topk(values, self.fraction, self.direction(metric))

    def to_record(self) -> dict:
        return {
            "kind": self.kind.value,
            "iqr_multiplier": self.iqr_multiplier,
            "fraction": self.fraction,
            "directions": {k: v.value for k, v in sorted(self.directions.items())},
        }

    @classmethod
    def from_record(cls, record: Mapping) -> "ScreeningRule":
        return cls(
            RuleKind(record.get("kind", "iqr")),
            float(record.get("iqr_multiplier", 1.5)),
            float(record.get("fraction", 0.15)),
            dict(record.get("directions", {})),
        )


@dataclass
class ScreeningResult:
    flagged: set[str]
    triggers: dict[str, list[str]]  # subject -> metrics that flagged it ("missing:<name>" for gaps)


def screen_cohort(vectors: Sequence[MetricVector], metrics: Sequence[str], rule: ScreeningRule) -> ScreeningResult:
    """Union of per-metric flags; a subject missing any required metric is flagged too."""
    triggers: dict[str, list[str]] = {}
    for metric in metrics:
        present = {v.subject: v.metrics[metric] for v in vectors if metric in v.metrics}
        for v in vectors:
            if metric not in v.metrics:
                triggers.setdefault(v.subject, []).append(f"missing:{metric}")
        if present:
            for subject in rule.apply(present, metric):
                triggers.setdefault(subject, []).append(metric)
    return ScreeningResult(set(triggers), {s: sorted(t) for s, t in triggers.items()})
