"""Binary inter-rater agreement (Gwet's AC1) and pass-rate tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

from ._fmt import fixed
from .errors import Empty, LengthMismatch, ParseError

PASS, FAIL = "PASS", "FAIL"
QC_VARIANTS = ("metric_only", "agentic_visual_only", "non_agentic_visual_only", "hierarchical")


def _labels(vec: Sequence) -> list[str]:
    out = []
    for x in vec:
        label = str(getattr(x, "value", x)).strip().upper()
        if label not in (PASS, FAIL):
            raise ValueError(f"label must be PASS or FAIL, got {x!r}")
        out.append(label)
    return out


def _check(a: Sequence, b: Sequence) -> tuple[list[str], list[str]]:
    a, b = _labels(a), _labels(b)
    if len(a) != len(b):
        raise LengthMismatch(f"label vectors differ in length: {len(a)} vs {len(b)}")
    if not a:
        raise Empty("label vectors are empty")
    return a, b


def observed_agreement(a: Sequence, b: Sequence) -> float:
    a, b = _check(a, b)
    return sum(x == y for x, y in zip(a, b)) / len(a)


@dataclass(frozen=True)
class AC1Result:
    po: float
    phat: float
    pe: float
    ac1: float

    def __iter__(self):
        return iter((self.po, self.phat, self.pe, self.ac1))


def gwet_ac1(a: Sequence, b: Sequence) -> AC1Result:
    """Po, p-hat (mean PASS share of the two raters), Pe = 2p(1-p) and AC1.

    Each quantity is a ratio of integers divided once at the end. With k
    agreements and s PASS labels over both raters,
    AC1 = (2nk - s(2n - s)) / (2n^2 - s(2n - s)), so symmetry and label-swap
    invariance (s -> 2n - s) hold exactly and every value is correctly rounded.
    """
    a, b = _check(a, b)
    n = len(a)
    k = sum(x == y for x, y in zip(a, b))
    s = a.count(PASS) + b.count(PASS)
    chance = s * (2 * n - s)
    return AC1Result(k / n, s / (2 * n), chance / (2 * n * n), (2 * n * k - chance) / (2 * n * n - chance))


@dataclass(frozen=True)
class PairAgreement:
    rater_a: str
    rater_b: str
    po: float
    phat: float
    pe: float
    ac1: float


@dataclass(frozen=True)
class AgreementReport:
    pairs: tuple[PairAgreement, ...]
    mean_ac1: float


def mean_agreement_report(system: Sequence, human_raters: Sequence[Sequence], system_name: str = "system", rater_names: Sequence[str] | None = None) -> AgreementReport:
    """AC1 of the system against each human rater and the plain mean of those."""
    if not human_raters:
        raise Empty("no human raters")
    names = list(rater_names or [f"rater{i + 1}" for i in range(len(human_raters))])
    if len(names) != len(human_raters):
        raise ValueError("one name per rater is needed")
    pairs = []
    for name, rater in zip(names, human_raters):
        res = gwet_ac1(system, rater)
        pairs.append(PairAgreement(system_name, name, *res))
    mean = float(sum(Fraction(p.ac1) for p in pairs) / len(pairs))
    return AgreementReport(tuple(pairs), mean)


@dataclass(frozen=True)
class RatingMatrix:
    items: tuple[str, ...]
    raters: tuple[str, ...]
    labels: tuple[tuple[str, ...], ...]  # labels[i][r]

    def __post_init__(self):
        if not self.items:
            raise Empty("rating matrix has no items")
        if len(self.labels) != len(self.items) or any(len(row) != len(self.raters) for row in self.labels):
            raise LengthMismatch("label grid does not match items x raters")
        object.__setattr__(self, "labels", tuple(tuple(_labels(row)) for row in self.labels))

    @classmethod
    def from_columns(cls, items: Sequence[str], columns: Mapping[str, Sequence]) -> "RatingMatrix":
        raters = tuple(columns)
        for r in raters:
            if len(columns[r]) != len(items):
                raise LengthMismatch(f"rater {r} has {len(columns[r])} labels for {len(items)} items")
        rows = tuple(tuple(columns[r][i] for r in raters) for i in range(len(items)))
        return cls(tuple(items), raters, rows)

    def column(self, rater: str) -> list[str]:
        j = self.raters.index(rater)
        return [row[j] for row in self.labels]


@dataclass(frozen=True)
class PassRate:
    rater: str
    n_pass: int
    total: int

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.n_pass, self.total)

    @property
    def percent(self) -> str:
        return fixed(self.fraction * 100, 1)

    def render(self) -> str:
        return f"{self.percent}% ({self.n_pass}/{self.total})"


def format_pass_rate(n_pass: int, total: int) -> str:
    return PassRate("", n_pass, total).render()


def pass_rate_table(matrix: RatingMatrix) -> dict[str, PassRate]:
    out = {}
    for rater in matrix.raters:
        col = matrix.column(rater)
        out[rater] = PassRate(rater, col.count(PASS), len(col))
    return out


# -- files -------------------------------------------------------------------------------

def read_ratings(path: str | Path) -> tuple[list[str], list[str]]:
    """Item ids and labels from a CSV with header ``item_id,label``."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"item_id", "label"} <= set(reader.fieldnames):
            raise ParseError(path, "expected header item_id,label")
        rows = list(reader)
    items = [r["item_id"].strip() for r in rows]
    if len(set(items)) != len(items):
        raise ParseError(path, "duplicate item ids")
    try:
        labels = _labels(r["label"] for r in rows)
    except ValueError as exc:
        raise ParseError(path, str(exc)) from None
    return items, labels


def write_ratings(path: str | Path, items: Sequence[str], labels: Sequence) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item_id", "label"])
        for item, label in zip(items, _labels(labels)):
            writer.writerow([item, label])
    return Path(path)


def align(reference_items: Sequence[str], items: Sequence[str], labels: Sequence[str]) -> list[str]:
    """Reorder ``labels`` to follow ``reference_items``; the item sets must match."""
    if len(items) != len(reference_items) or set(items) != set(reference_items):
        raise LengthMismatch("rating files cover different items")
    lookup = dict(zip(items, labels))
    return [lookup[i] for i in reference_items]


AGREEMENT_COLUMNS = ("checkpoint", "rater", "Po", "phat", "Pe", "AC1", "mean_AC1")


def agreement_tsv(rows: Sequence[tuple[str, str, AgreementReport]]) -> str:
    """TSV over ``(checkpoint, system_name, report)`` triples, one line per pair.

    Values are written at full precision.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow([*AGREEMENT_COLUMNS, "system"])
    for checkpoint, system, report in rows:
        for p in report.pairs:
            writer.writerow([checkpoint, p.rater_b, repr(p.po), repr(p.phat), repr(p.pe), repr(p.ac1), repr(report.mean_ac1), system])
    return buf.getvalue()


def display(value: float, places: int = 3) -> str:
    return fixed(value, places)
