"""Multi-turn visual inspection of QC montages.

A judge looks at a 2D raster and either asks for a crop with
``crop(x0, y0, x1, y1)`` or answers with a verdict object
``{"verdict": "ACCEPTABLE" | "REJECTED", "reject_reason": ...}``. Crop boxes are
half-open pixel ranges (x = column, y = row) relative to the current view.
"""

from __future__ import annotations

import base64
import io
import json
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol, Sequence

import numpy as np

from ..errors import MalformedJudgeOutput, PolicyFailure, TurnLimitWithoutVerdict
from ..roles import AgentRole, DecisionPoint


class VizKind(str, Enum):
    RAW_MOSAIC = "raw_mosaic"
    MASK_CONTOUR = "mask_contour_montage"
    SEGMENTATION_CONTOUR = "segmentation_contour_montage"
    TEMPLATE_CONTOUR = "template_contour_montage"


class Label(str, Enum):
    ACCEPTABLE = "ACCEPTABLE"
    REJECTED = "REJECTED"


@dataclass(frozen=True)
class ElementVerdict:
    verdict: Label
    reject_reason: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "verdict", Label(self.verdict))
        if self.verdict is Label.REJECTED and not (self.reject_reason or "").strip():
            raise ValueError("a REJECTED verdict needs a reason")

    @property
    def rejected(self) -> bool:
        return self.verdict is Label.REJECTED

    def to_record(self) -> dict:
        return {"verdict": self.verdict.value, "reject_reason": self.reject_reason}

    @classmethod
    def from_record(cls, record: dict) -> "ElementVerdict":
        return cls(Label(record["verdict"]), record.get("reject_reason"))


@dataclass(frozen=True, eq=False)
class Montage:
    """A 2D view with two binary overlay layers.

    ``reference`` is the contour region drawn from the reference (template,
    anatomical image or expected head region). ``mask`` is the subject's own
    region. A well-aligned montage has the two layers nearly coincide.
    """

    background: np.ndarray
    reference: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.ndim != 2 or bg.size == 0:
            raise ValueError("montage background must be a non-empty 2D array")
        object.__setattr__(self, "background", bg)
        for name in ("reference", "mask"):
            layer = getattr(self, name)
            if layer is not None:
                layer = np.asarray(layer) != 0
                if layer.shape != bg.shape:
                    raise ValueError(f"{name} layer shape {layer.shape} differs from {bg.shape}")
                object.__setattr__(self, name, layer)

    @property
    def shape(self) -> tuple[int, int]:
        return self.background.shape

    def subject_mask(self) -> np.ndarray:
        if self.mask is not None:
            return self.mask
        return self.background > self.background.mean()

    def crop(self, x0: int, y0: int, x1: int, y1: int) -> "Montage":
        h, w = self.shape
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise MalformedJudgeOutput(f"crop box ({x0},{y0},{x1},{y1}) outside a {w}x{h} view")
        sl = (slice(y0, y1), slice(x0, x1))
        pick = lambda layer: None if layer is None else layer[sl]
        return Montage(self.background[sl], pick(self.reference), pick(self.mask))

    def save(self, path) -> None:
        layers = {"background": self.background}
        if self.reference is not None:
            layers["reference"] = self.reference
        if self.mask is not None:
            layers["mask"] = self.mask
        with open(path, "wb") as fh:
            np.savez_compressed(fh, **layers)

    @classmethod
    def load(cls, path) -> "Montage":
        with np.load(path) as data:
            return cls(data["background"], data.get("reference"), data.get("mask"))

    def to_png(self) -> bytes:
        """RGB rendering: grey background, red reference, green subject mask."""
        from PIL import Image

        bg = self.background
        span = float(bg.max() - bg.min()) or 1.0
        grey = ((bg - bg.min()) / span * 255).astype(np.uint8)
        rgb = np.stack([grey, grey, grey], axis=-1)
        if self.reference is not None:
            rgb[self.reference] = (rgb[self.reference] * 0.5 + np.array([127, 0, 0])).astype(np.uint8)
        if self.mask is not None:
            rgb[self.mask] = (rgb[self.mask] * 0.5 + np.array([0, 127, 0])).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(rgb).save(buf, format="PNG")
        return buf.getvalue()


def _tiles(volume: np.ndarray, positions=(0.35, 0.5, 0.65)) -> list[np.ndarray]:
    nx, ny, nz = volume.shape
    tiles = []
    for axis, size in ((2, nz), (1, ny), (0, nx)):  # axial, coronal, sagittal
        for frac in positions:
            tiles.append(np.take(volume, min(size - 1, int(frac * size)), axis=axis))
    return tiles


def _grid(tiles: list[np.ndarray], cols: int = 3) -> np.ndarray:
    h = max(t.shape[0] for t in tiles)
    w = max(t.shape[1] for t in tiles)
    rows = []
    for r in range(0, len(tiles), cols):
        padded = [np.pad(t, ((0, h - t.shape[0]), (0, w - t.shape[1]))) for t in tiles[r : r + cols]]
        rows.append(np.concatenate(padded, axis=1))
    return np.concatenate(rows, axis=0)


def make_montage(background, reference=None, mask=None) -> Montage:
    """3x3 montage (axial, coronal, sagittal rows) from 3D volumes."""
    bg = _grid(_tiles(np.asarray(background, dtype=np.float64)))
    ref = None if reference is None else _grid(_tiles(np.asarray(reference) != 0))
    sub = None if mask is None else _grid(_tiles(np.asarray(mask) != 0))
    return Montage(bg, ref, sub)


@dataclass
class VisualizationDescriptor:
    subject: str
    step: str
    kind: VizKind
    image: Montage | None = None
    path: str | None = None

    def __post_init__(self):
        self.kind = VizKind(self.kind)
        if self.image is None and self.path is None:
            raise ValueError("a visualization needs an image or a path")

    def load(self) -> Montage:
        if self.image is None:
            self.image = Montage.load(self.path)
        return self.image

    @property
    def ref(self) -> str:
        return self.path or f"{self.subject}/{self.step}/{self.kind.value}"


@dataclass(frozen=True)
class JudgeProtocol:
    criteria: str = "Judge whether the overlay contours match the underlying anatomy."
    exemplars: Sequence[str] = ()
    max_turns: int = 4

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")


class Judge(Protocol):
    def respond(self, viz: VisualizationDescriptor, view: Montage, protocol: JudgeProtocol, history: list[str]) -> str: ...


_CROP = re.compile(r"crop\(\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\)", re.IGNORECASE)


def parse_verdict(text: str) -> ElementVerdict | None:
    """The verdict in a judge reply, or None if the reply carries no verdict."""
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = json.JSONDecoder().raw_decode(text[start:])
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict) and "verdict" in obj:
            try:
                return ElementVerdict(Label(str(obj["verdict"]).upper()), obj.get("reject_reason"))
            except ValueError as exc:
                raise MalformedJudgeOutput(f"bad verdict object {obj!r}: {exc}") from None
        start = text.find("{", start + 1)
    if re.search(r"\"verdict\"|\bverdict\s*[:=]", text, re.IGNORECASE):
        raise MalformedJudgeOutput(f"unparseable verdict in {text[:200]!r}")
    return None


def visual_inspect(viz: VisualizationDescriptor, judge: Judge, protocol: JudgeProtocol = JudgeProtocol()) -> ElementVerdict:
    view = viz.load()
    history: list[str] = []
    for _ in range(protocol.max_turns):
        reply = judge.respond(viz, view, protocol, history)
        history.append(reply)
        verdict = parse_verdict(reply)
        if verdict is not None:
            return verdict
        m = _CROP.search(reply)
        if m:
            view = view.crop(*(int(g) for g in m.groups()))
    raise TurnLimitWithoutVerdict(f"no verdict from judge after {protocol.max_turns} turns for {viz.subject}")


def contour_mismatch(view: Montage) -> float:
    """|reference XOR mask| / |reference OR mask| over the view (0 if both empty)."""
    ref = view.reference if view.reference is not None else np.zeros(view.shape, dtype=bool)
    sub = view.subject_mask()
    union = int(np.logical_or(ref, sub).sum())
    if union == 0:
        return 0.0
    return int(np.logical_xor(ref, sub).sum()) / union


def _bbox(layer: np.ndarray):
    rows = np.flatnonzero(layer.any(axis=1))
    cols = np.flatnonzero(layer.any(axis=0))
    if rows.size == 0:
        return None
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


class StubJudge:
    """Deterministic judge for tests and offline runs.

    On its first turn it zooms to the bounding box of the overlays (when that
    is smaller than the view), then rejects when the contour mismatch exceeds
    ``threshold``. Calls are recorded per subject.
    """

    def __init__(self, threshold: float = 0.05):
        self.threshold = threshold
        self.calls: list[str] = []
        self._lock = threading.Lock()

    def respond(self, viz, view, protocol, history):
        if not history:
            with self._lock:
                self.calls.append(viz.subject)
            ref = view.reference if view.reference is not None else np.zeros(view.shape, dtype=bool)
            box = _bbox(np.logical_or(ref, view.subject_mask()))
            full = (0, 0, view.shape[1], view.shape[0])
            if protocol.max_turns > 1 and box is not None and box != full:
                return "crop({}, {}, {}, {})".format(*box)
        mismatch = contour_mismatch(view)
        if mismatch > self.threshold:
            reason = f"contour mismatch {mismatch:.1%} exceeds {self.threshold:.0%}"
            return json.dumps({"verdict": "REJECTED", "reject_reason": reason})
        return json.dumps({"verdict": "ACCEPTABLE", "reject_reason": None})


class ModelJudge:
    """Visual judge backed by a policy backend at the ``visual_judge`` decision point."""

    def __init__(self, backend):
        self.backend = backend
        self.calls: list[str] = []
        self.usage = []
        self._lock = threading.Lock()

    def respond(self, viz, view, protocol, history):
        from ..policy import ModelRequest

        if not history:
            with self._lock:
                self.calls.append(viz.subject)
        system = protocol.criteria
        if protocol.exemplars:
            system += "\n\nReference cases:\n" + "\n".join(f"- {e}" for e in protocol.exemplars)
        system += (
            "\n\nReply with crop(x0, y0, x1, y1) to zoom in, or with a JSON object "
            '{"verdict": "ACCEPTABLE" | "REJECTED", "reject_reason": "..."}.'
        )
        transcript = []
        for i, reply in enumerate(history):
            transcript.append({"role": "user", "content": f"turn {i + 1}"})
            transcript.append({"role": "assistant", "content": reply})
        h, w = view.shape
        transcript.append({"role": "user", "content": f"{viz.step} {viz.kind.value} for {viz.subject}, view {w}x{h}, turn {len(history) + 1} of {protocol.max_turns}"})
        request = ModelRequest(
            agent=AgentRole.QUALITY_CONTROL,
            system_context=system,
            transcript=transcript,
            decision_point=DecisionPoint.VISUAL_JUDGE,
            images=[base64.b64encode(view.to_png()).decode("ascii")],
        )
        try:
            reply = self.backend.complete(request)
        except PolicyFailure:
            raise
        with self._lock:
            self.usage.append(reply.usage)
        return reply.content
