"""QC checkpoints: screen a cohort on metrics, inspect the flagged, aggregate verdicts."""

from __future__ import annotations

import csv
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from ..errors import ConfigError, NoSteps
from .metrics import MetricVector
from .screening import Direction, RuleKind, ScreeningRule, screen_cohort
from .visual import ElementVerdict, JudgeProtocol, Label, VisualizationDescriptor, VizKind, visual_inspect

SMALL_COHORT = 10
DEFAULT_WORKERS = 5


class Verdict(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"


@dataclass(frozen=True)
class StepEvidence:
    verdict: ElementVerdict
    triggering_metrics: Mapping[str, float | None] = field(default_factory=dict)
    viz_refs: tuple[str, ...] = ()

    def to_record(self) -> dict:
        return {
            **self.verdict.to_record(),
            "triggering_metrics": dict(sorted(self.triggering_metrics.items())),
            "viz_refs": list(self.viz_refs),
        }


@dataclass(frozen=True)
class EvidenceBundle:
    per_step: Mapping[str, StepEvidence]
    summary: str

    def rejected_steps(self) -> list[str]:
        return sorted(s for s, ev in self.per_step.items() if ev.verdict.rejected)


@dataclass(frozen=True)
class SubjectVerdict:
    subject: str
    y: Verdict
    evidence: EvidenceBundle

    @property
    def passed(self) -> bool:
        return self.y == Verdict.PASS

    def to_record(self) -> dict:
        return {
            "subject": self.subject,
            "verdict": self.y.value,
            "failed_steps": self.evidence.rejected_steps(),
            "summary": self.evidence.summary,
            "steps": {s: ev.to_record() for s, ev in sorted(self.evidence.per_step.items())},
        }


def aggregate_subject_verdicts(
    subject: str,
    per_step: Mapping[str, ElementVerdict],
    metrics: Mapping[str, Mapping[str, float | None]] | None = None,
    viz_refs: Mapping[str, Sequence[str]] | None = None,
) -> SubjectVerdict:
    """PASS iff every step is ACCEPTABLE; evidence names each rejected step."""
    if not per_step:
        raise NoSteps(f"no QC steps recorded for {subject}")
    metrics = metrics or {}
    viz_refs = viz_refs or {}
    evidence = {
        step: StepEvidence(v, dict(metrics.get(step, {})), tuple(viz_refs.get(step, ())))
        for step, v in per_step.items()
    }
    failed = sorted(s for s, v in per_step.items() if v.rejected)
    if failed:
        summary = "; ".join(f"{s}: {per_step[s].reject_reason}" for s in failed)
        return SubjectVerdict(subject, Verdict.FAIL, EvidenceBundle(evidence, summary))
    return SubjectVerdict(subject, Verdict.PASS, EvidenceBundle(evidence, "all steps acceptable"))


def merge_subject_verdicts(verdicts: Iterable[SubjectVerdict]) -> SubjectVerdict:
    """Combine one subject's verdicts from several checkpoints into one."""
    verdicts = list(verdicts)
    if not verdicts:
        raise NoSteps("nothing to merge")
    subject = verdicts[0].subject
    steps = {}
    for v in verdicts:
        if v.subject != subject:
            raise ValueError("cannot merge verdicts of different subjects")
        steps.update(v.evidence.per_step)
    return aggregate_subject_verdicts(
        subject,
        {s: ev.verdict for s, ev in steps.items()},
        {s: ev.triggering_metrics for s, ev in steps.items()},
        {s: ev.viz_refs for s, ev in steps.items()},
    )


@dataclass(frozen=True)
class CheckpointConfig:
    name: str
    metrics: Mapping[str, Direction]
    rule: ScreeningRule
    viz_kind: VizKind
    criteria: str = ""

    def screening_rule(self, rule: ScreeningRule | None = None) -> ScreeningRule:
        """``rule`` (or the checkpoint default) with this checkpoint's directions filled in."""
        base = rule or self.rule
        directions = {**dict(self.metrics), **dict(base.directions)}
        return ScreeningRule(base.kind, base.iqr_multiplier, base.fraction, directions)

    def to_record(self) -> dict:
        return {
            "metrics": {k: Direction(v).value for k, v in self.metrics.items()},
            "rule": self.rule.to_record(),
            "visualization": self.viz_kind.value,
            "criteria": self.criteria,
        }


_IQR = ScreeningRule(RuleKind.IQR)
_TOPK = ScreeningRule(RuleKind.TOPK, fraction=0.15)
_LOW, _HIGH, _BOTH = Direction.LOW_BAD, Direction.HIGH_BAD, Direction.BOTH

DEFAULT_CHECKPOINTS: dict[str, CheckpointConfig] = {
    "raw_t1w": CheckpointConfig(
        "raw_t1w",
        {"cjv": _HIGH, "cnr": _LOW, "efc": _HIGH, "fber": _LOW, "snr_total": _LOW, "qi_1": _HIGH, "wm2max": _BOTH},
        _IQR,
        VizKind.RAW_MOSAIC,
        "Look for motion ringing, ghosting, wrap-around and intensity dropout in the raw anatomical image.",
    ),
    "raw_bold": CheckpointConfig(
        "raw_bold",
        {"fd_mean": _HIGH, "dvars_std": _HIGH, "tsnr": _LOW, "snr": _LOW, "aor": _HIGH, "gcor": _BOTH},
        _IQR,
        VizKind.RAW_MOSAIC,
        "Look for signal dropout, ghosting and slice artifacts in the mean functional image.",
    ),
    "skull_strip": CheckpointConfig(
        "skull_strip",
        {"brain_volume_ml": _BOTH},
        _TOPK,
        VizKind.MASK_CONTOUR,
        "The brain mask outline should follow the brain surface without cutting cortex or keeping skull.",
    ),
    "tissue_segmentation": CheckpointConfig(
        "tissue_segmentation",
        {"csf_ml": _BOTH, "gm_ml": _BOTH, "wm_ml": _BOTH},
        _TOPK,
        VizKind.SEGMENTATION_CONTOUR,
        "Tissue boundaries should be smooth and anatomically placed, not fragmented or noisy.",
    ),
    "t1w_to_mni": CheckpointConfig(
        "t1w_to_mni",
        {"nmi": _LOW, "ncc": _LOW},
        _TOPK,
        VizKind.TEMPLATE_CONTOUR,
        "Template outlines should sit on the brain boundary and white matter of the warped image.",
    ),
    "bold_to_t1w": CheckpointConfig(
        "bold_to_t1w",
        {"nmi": _LOW, "dice": _LOW},
        _TOPK,
        VizKind.TEMPLATE_CONTOUR,
        "Anatomical outlines should sit on the brain boundary of the mean functional image.",
    ),
    "bold_to_mni": CheckpointConfig(
        "bold_to_mni",
        {"nmi": _LOW, "dice": _LOW},
        _TOPK,
        VizKind.TEMPLATE_CONTOUR,
        "Template outlines should sit on the brain boundary of the normalized functional image.",
    ),
}


def load_checkpoint_configs(path: str | Path) -> dict[str, CheckpointConfig]:
    """Checkpoint configs from a JSON or YAML file, keyed by checkpoint name.

    Layout: ``{"checkpoints": {name: {"metrics": {metric: direction},
    "rule": {...}, "visualization": kind, "criteria": text}}}``.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() in (".yaml", ".yml"):
            import yaml

            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
        out = {}
        for name, spec in (data.get("checkpoints") or {}).items():
            out[name] = CheckpointConfig(
                name,
                {k: Direction(v) for k, v in spec["metrics"].items()},
                ScreeningRule.from_record(spec.get("rule", {})),
                VizKind(spec["visualization"]),
                spec.get("criteria", ""),
            )
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"bad checkpoint config {path}: {exc}") from exc
    return out


@dataclass
class CohortMember:
    subject: str
    metrics: MetricVector | None = None
    viz: VisualizationDescriptor | None = None


@dataclass
class CheckpointResult:
    checkpoint: str
    mode: str
    verdicts: dict[str, SubjectVerdict]
    flagged: set[str]
    inspected: list[str]

    def pass_fail(self) -> dict[str, str]:
        return {s: v.y.value for s, v in sorted(self.verdicts.items())}

    def to_record(self) -> dict:
        return {
            "checkpoint": self.checkpoint,
            "mode": self.mode,
            "flagged": sorted(self.flagged),
            "inspected": list(self.inspected),
            "subjects": [v.to_record() for _, v in sorted(self.verdicts.items())],
        }


MODES = ("auto", "hierarchical", "visual_only", "metric_only")


def run_checkpoint(
    cohort: Sequence[CohortMember],
    checkpoint: CheckpointConfig,
    judge=None,
    rule: ScreeningRule | None = None,
    protocol: JudgeProtocol | None = None,
    mode: str = "auto",
    max_workers: int = DEFAULT_WORKERS,
) -> CheckpointResult:
    """Run one QC checkpoint over a cohort.

    ``auto`` inspects everyone visually when the cohort has fewer than 10
    subjects and screens first otherwise. ``hierarchical`` always screens and
    inspects only the flagged set. ``metric_only`` fails flagged subjects
    without looking. ``visual_only`` inspects everyone.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    step = checkpoint.name
    subjects = [m.subject for m in cohort]
    if len(set(subjects)) != len(subjects):
        raise ValueError("duplicate subjects in cohort")
    members = {m.subject: m for m in cohort}
    if mode == "auto":
        mode = "visual_only" if len(cohort) < SMALL_COHORT else "hierarchical"
    protocol = protocol or JudgeProtocol(checkpoint.criteria or JudgeProtocol.criteria)

    if mode == "visual_only":
        flagged, triggers = set(subjects), {}
    else:
        vectors = [m.metrics or MetricVector(m.subject, step) for m in cohort]
        screen = screen_cohort(vectors, list(checkpoint.metrics), checkpoint.screening_rule(rule))
        flagged, triggers = screen.flagged, screen.triggers

    def metric_evidence(subject):
        vec = members[subject].metrics
        names = triggers.get(subject, [])
        out = {}
        for name in names:
            key = name.split(":", 1)[1] if name.startswith("missing:") else name
            out[key] = None if vec is None else vec.metrics.get(key)
        return out

    per_subject: dict[str, ElementVerdict] = {}
    inspected: list[str] = []
    if mode == "metric_only":
        for s in subjects:
            if s in flagged:
                per_subject[s] = ElementVerdict(Label.REJECTED, "metric outlier: " + ", ".join(triggers.get(s, [])))
            else:
                per_subject[s] = ElementVerdict(Label.ACCEPTABLE)
    else:
        if judge is None:
            raise ValueError("visual inspection needs a judge")
        to_inspect = [s for s in subjects if s in flagged]
        missing_viz = [s for s in to_inspect if members[s].viz is None]
        if missing_viz:
            raise ValueError(f"no visualization for flagged subjects {missing_viz}")
        lock = threading.Lock()

        def inspect(subject):
            with lock:
                inspected.append(subject)
            return subject, visual_inspect(members[subject].viz, judge, protocol)

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = dict(pool.map(inspect, to_inspect))
        for s in subjects:
            per_subject[s] = results.get(s, ElementVerdict(Label.ACCEPTABLE))

    verdicts = {}
    for s in subjects:
        refs = (members[s].viz.ref,) if s in flagged and members[s].viz is not None and mode != "metric_only" else ()
        verdicts[s] = aggregate_subject_verdicts(s, {step: per_subject[s]}, {step: metric_evidence(s)}, {step: refs})
    return CheckpointResult(step, mode, verdicts, flagged, sorted(inspected))


def write_qc_report(results: Sequence[CheckpointResult], json_path: str | Path, tsv_path: str | Path | None = None) -> dict:
    """Per-cohort JSON report (checkpoints plus merged subject verdicts) and a TSV summary."""
    by_subject: dict[str, list[SubjectVerdict]] = {}
    for res in results:
        for s, v in res.verdicts.items():
            by_subject.setdefault(s, []).append(v)
    merged = {s: merge_subject_verdicts(vs) for s, vs in sorted(by_subject.items())}
    report = {
        "checkpoints": [r.to_record() for r in results],
        "subjects": [v.to_record() for v in merged.values()],
    }
    Path(json_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if tsv_path is not None:
        with open(tsv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(["subject_id", "verdict", "failed_steps", "reasons"])
            for s, v in merged.items():
                failed = v.evidence.rejected_steps()
                writer.writerow([s, v.y.value, ",".join(failed), v.evidence.summary if failed else ""])
    return report


def compute_cohort_metrics(subjects: Sequence[str], fn: Callable[[str], MetricVector], max_workers: int = DEFAULT_WORKERS) -> list[MetricVector]:
    """Apply a per-subject metric function across a worker pool, in subject order."""
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, subjects))
