"""Voxel grids and the image metrics used for cohort screening."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..errors import (
    BothEmpty,
    DegenerateEntropy,
    DimMismatch,
    LabelAbsent,
    NoSubjectColumn,
    ParseError,
    ZeroVariance,
)

SUBJECT_COLUMN = "subject_id"
DEFAULT_BINS = 64


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A 3D scalar image with voxel spacing in millimeters."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {values.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @classmethod
    def from_flat(cls, dims, values, spacing=(1.0, 1.0, 1.0)) -> "VoxelGrid":
        """Build from row-major values; ``len(values)`` must equal the voxel count."""
        flat = np.asarray(values)
        if flat.size != int(np.prod(dims)):
            raise ValueError(f"{flat.size} values do not fill dims {tuple(dims)}")
        return cls(flat.reshape(tuple(dims)), spacing)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "wb") as fh:
            np.savez_compressed(fh, values=self.values, spacing=np.asarray(self.spacing))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "VoxelGrid":
        with np.load(path) as data:
            return cls(data["values"], tuple(data["spacing"]))


def _pair(a: VoxelGrid, b: VoxelGrid):
    if a.dims != b.dims:
        raise DimMismatch(f"dims differ: {a.dims} vs {b.dims}")
    return a.values, b.values


def compute_dice(a: VoxelGrid, b: VoxelGrid) -> float:
    """Dice overlap of two binary masks (nonzero voxels are foreground)."""
    va, vb = _pair(a, b)
    ma, mb = va != 0, vb != 0
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        raise BothEmpty("both masks are empty")
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def bin_codes(values: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bin index per voxel over the image's own min..max.

    A constant image puts every voxel in bin 0.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros(v.shape, dtype=np.int64)
    codes = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(codes, bins - 1)


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return -math.fsum(p * np.log(p))


def compute_nmi(a: VoxelGrid, b: VoxelGrid, bins: int = DEFAULT_BINS) -> float:
    """Normalized mutual information 2 I(A;B) / (H(A) + H(B)), in [0, 1]."""
    va, vb = _pair(a, b)
    if bins < 2:
        raise ValueError("bins must be >= 2")
    ca, cb = bin_codes(va, bins), bin_codes(vb, bins)
    n = ca.size
    h_a = _entropy(np.bincount(ca, minlength=bins), n)
    h_b = _entropy(np.bincount(cb, minlength=bins), n)
    if h_a + h_b == 0:
        raise DegenerateEntropy("both images are constant")
    h_ab = _entropy(np.bincount(ca * bins + cb, minlength=bins * bins), n)
    mi = (h_a + h_b) - h_ab
    return min(1.0, max(0.0, 2.0 * mi / (h_a + h_b)))


def compute_ncc(a: VoxelGrid, b: VoxelGrid, mask: VoxelGrid | None = None) -> float:
    """Pearson correlation over all voxels, or over ``mask`` when given."""
    va, vb = _pair(a, b)
    x = np.asarray(va, dtype=np.float64).ravel()
    y = np.asarray(vb, dtype=np.float64).ravel()
    if mask is not None:
        if mask.dims != a.dims:
            raise DimMismatch(f"mask dims {mask.dims} differ from {a.dims}")
        keep = mask.values.ravel() != 0
        x, y = x[keep], y[keep]
    if x.size == 0:
        raise ZeroVariance("no voxels to correlate")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ZeroVariance("an image is constant over the compared voxels")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def compute_volume_ml(grid: VoxelGrid, label: int | None = None) -> float:
    """Volume of nonzero voxels (or of ``label``) in milliliters."""
    if label is None:
        count = int(np.count_nonzero(grid.values))
    else:
        count = int(np.count_nonzero(grid.values == label))
        if count == 0:
            raise LabelAbsent(f"label {label} does not occur in the grid")
    sx, sy, sz = grid.spacing
    return count * sx * sy * sz / 1000.0


# -- metric tables -----------------------------------------------------------------------

@dataclass
class MetricVector:
    subject: str
    step: str = ""
    metrics: dict[str, float] = field(default_factory=dict)
    missing: set[str] = field(default_factory=set)

    def __post_init__(self):
        overlap = set(self.metrics) & set(self.missing)
        if overlap:
            raise ValueError(f"metrics both present and missing: {sorted(overlap)}")

    def get(self, name: str):
        return self.metrics.get(name)

    def to_record(self) -> dict:
        return {"subject": self.subject, "step": self.step, "metrics": dict(self.metrics), "missing": sorted(self.missing)}


def _vector_from_row(row: Mapping, step: str, where: str) -> MetricVector:
    subject = str(row[SUBJECT_COLUMN]).strip()
    metrics, missing = {}, set()
    for key, raw in row.items():
        if key == SUBJECT_COLUMN or key is None:
            continue
        if raw is None or (isinstance(raw, str) and not raw.strip()):
            missing.add(key)
            continue
        try:
            value = float(raw)
        except (TypeError, ValueError):
            raise ParseError(where, f"non-numeric value {raw!r} in column {key!r}") from None
        if math.isnan(value):
            missing.add(key)
        else:
            metrics[key] = value
    return MetricVector(subject, step, metrics, missing)


def ingest_metric_table(path: str | Path, step: str = "") -> list[MetricVector]:
    """Read a per-subject metric table (TSV, CSV or JSON list of rows)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(path, str(exc)) from exc
    if path.suffix.lower() == ".json":
        try:
            rows = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(path, str(exc)) from exc
        if isinstance(rows, dict):
            rows = rows.get("subjects", rows.get("rows"))
        if not isinstance(rows, list) or not all(isinstance(r, dict) for r in rows):
            raise ParseError(path, "expected a list of row objects")
        columns = set().union(*(r.keys() for r in rows)) if rows else set()
    else:
        delimiter = "," if path.suffix.lower() == ".csv" else "\t"
        reader = csv.DictReader(text.splitlines(), delimiter=delimiter)
        columns = set(reader.fieldnames or [])
        rows = list(reader)
    if SUBJECT_COLUMN not in columns:
        raise NoSubjectColumn(f"{path} has no {SUBJECT_COLUMN!r} column")
    if len(columns) < 2:
        raise ParseError(path, "no metric columns")
    return [_vector_from_row(row, step, str(path)) for row in rows]


def write_metric_table(vectors: Sequence[MetricVector], path: str | Path) -> Path:
    names = sorted(set().union(*(set(v.metrics) | v.missing for v in vectors))) if vectors else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow([SUBJECT_COLUMN, *names])
        for v in vectors:
            writer.writerow([v.subject, *("" if n not in v.metrics else repr(v.metrics[n]) for n in names)])
    return Path(path)
