"""Append-only episode ledger, error taxonomy and run statistics.

Each step is one JSON line in ``trace.jsonl``. Every line carries a SHA-256
checksum over the previous line's checksum and its own canonical body, so any
rewrite of an earlier line breaks the chain from that line on. A closed ledger
ends with a ``close`` record holding the completion flag and halt reason.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import re
from dataclasses import dataclass, field, fields
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from ._fmt import fixed
from .errors import CorruptLedger, ImmutabilityViolation, IndexGap, LedgerOpen, Unclassifiable
from .policy import Usage
from .roles import ACTION_KINDS, EXECUTE_PROGRAM, SEND_MESSAGE, SYNTHESIZE_PROGRAM

GENESIS = "0" * 64


class ErrorCategory(str, Enum):
    TOOL_PRIMITIVE_MISUSE = "ToolPrimitiveMisuse"
    CODEGEN_EXECUTION = "CodeGenExecutionError"
    STATE_DRIFT = "StateDrift"
    INSTRUCTION_VIOLATION = "InstructionViolation"
    SCALABILITY_RESOURCE = "ScalabilityResourceFailure"
    HALLUCINATION = "HallucinationFabrication"
    FILE_PATH = "FilePathError"
    WORKFLOW_ORCHESTRATION = "WorkflowOrchestrationError"


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class TraceStep:
    index: int
    agent: str
    action: dict
    observation: str
    usage: Usage | None = None
    timestamp: float = 0.0
    error: dict | None = None  # {"category": ..., "note": ...}
    recovers: tuple[int, ...] = ()

    @property
    def kind(self) -> str:
        return self.action.get("kind", "")

    def body(self) -> dict:
        return {
            "type": "step",
            "index": self.index,
            "agent": self.agent,
            "action": self.action,
            "observation": self.observation,
            "usage": self.usage.to_record() if self.usage else None,
            "timestamp": self.timestamp,
            "error": self.error,
            "recovers": list(self.recovers),
        }

    @classmethod
    def from_body(cls, body: dict) -> "TraceStep":
        return cls(
            index=body["index"],
            agent=body["agent"],
            action=body["action"],
            observation=body["observation"],
            usage=Usage.from_record(body["usage"]) if body.get("usage") else None,
            timestamp=body.get("timestamp", 0.0),
            error=body.get("error"),
            recovers=tuple(body.get("recovers", ())),
        )


@dataclass(frozen=True)
class Receipt:
    index: int
    checksum: str


@dataclass(frozen=True)
class ErrorEvent:
    step_index: int
    category: ErrorCategory
    recovered: bool
    note: str


def chain(prev: str, body: dict) -> str:
    return hashlib.sha256((prev + canonical_json(body)).encode("utf-8")).hexdigest()


class TraceLedger:
    """Single-writer, append-only step log, optionally mirrored to a file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.steps: list[TraceStep] = []
        self.checksums: list[str] = []
        self.footer: dict | None = None
        self._lines: list[str] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    @property
    def closed(self) -> bool:
        return self.footer is not None

    @property
    def next_index(self) -> int:
        return len(self.steps) + 1

    @property
    def head(self) -> str:
        return self.checksums[-1] if self.checksums else GENESIS

    def _emit(self, body: dict) -> str:
        checksum = chain(self.head, body)
        line = canonical_json({**body, "checksum": checksum})
        self._lines.append(line)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        return checksum

    def append_step(self, step: TraceStep) -> Receipt:
        if step.index <= len(self.steps) and step.index >= 1:
            existing = self.steps[step.index - 1]
            if existing.body() == step.body():
                return Receipt(step.index, self.checksums[step.index - 1])
            raise ImmutabilityViolation(f"step {step.index} is already recorded with different content")
        if self.closed:
            raise ImmutabilityViolation("ledger is closed")
        if step.index != self.next_index:
            raise IndexGap(f"expected step index {self.next_index}, got {step.index}")
        checksum = self._emit(step.body())
        self.steps.append(step)
        self.checksums.append(checksum)
        return Receipt(step.index, checksum)

    def close(self, completed: bool, halt_reason: str | None, runtime_seconds: float) -> None:
        if self.closed:
            raise ImmutabilityViolation("ledger is already closed")
        body = {
            "type": "close",
            "completed": bool(completed),
            "halt_reason": halt_reason,
            "runtime_seconds": runtime_seconds,
            "n_steps": len(self.steps),
        }
        self._emit(body)
        self.footer = body

    def dumps(self) -> str:
        return "".join(line + "\n" for line in self._lines)

    def error_events(self) -> list[ErrorEvent]:
        recovered = {i for step in self.steps for i in step.recovers}
        return [
            ErrorEvent(s.index, ErrorCategory(s.error["category"]), s.index in recovered, s.error.get("note", ""))
            for s in self.steps
            if s.error
        ]

    def unrecovered_errors(self, agent: str | None = None) -> list[TraceStep]:
        recovered = {i for step in self.steps for i in step.recovers}
        return [s for s in self.steps if s.error and s.index not in recovered and (agent is None or s.agent == agent)]


def parse_ledger_text(text: str, source: str = "<ledger>") -> TraceLedger:
    """Rebuild a ledger from its JSONL text, verifying the checksum chain."""
    ledger = TraceLedger()
    prev = GENESIS
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if ledger.closed:
            raise CorruptLedger(line_no, "record after close")
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptLedger(line_no, f"invalid JSON ({exc.msg})") from exc
        checksum = record.pop("checksum", None)
        if checksum != chain(prev, record):
            raise CorruptLedger(line_no, "checksum chain broken")
        if record.get("type") == "close":
            ledger.footer = record
        else:
            step = TraceStep.from_body(record)
            if step.index != len(ledger.steps) + 1:
                raise CorruptLedger(line_no, f"index {step.index} out of sequence")
            ledger.steps.append(step)
            ledger.checksums.append(checksum)
        ledger._lines.append(line)
        prev = checksum
    return ledger


def load_ledger(path: str | Path) -> TraceLedger:
    return parse_ledger_text(Path(path).read_text(encoding="utf-8"), str(path))


def verify_chain(path: str | Path) -> None:
    load_ledger(path)


# -- error classification ---------------------------------------------------------

@dataclass(frozen=True)
class ErrorRule:
    pattern: re.Pattern
    category: ErrorCategory


def load_rules(path: str | Path | None = None) -> list[ErrorRule]:
    if path is None:
        text = (resources.files("neuroagent") / "error_rules.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    rows = csv.DictReader(text.splitlines(), delimiter="\t", quoting=csv.QUOTE_NONE)
    return [ErrorRule(re.compile(r["pattern"], re.IGNORECASE), ErrorCategory(r["category"])) for r in rows]


_DEFAULT_RULES: list[ErrorRule] | None = None


def default_rules() -> list[ErrorRule]:
    global _DEFAULT_RULES
    if _DEFAULT_RULES is None:
        _DEFAULT_RULES = load_rules()
    return _DEFAULT_RULES


def classify_error(
    observation: str,
    rules: Sequence[ErrorRule] | None = None,
    fallback: Callable[[str], "ErrorCategory | str"] | None = None,
) -> ErrorCategory:
    for rule in default_rules() if rules is None else rules:
        if rule.pattern.search(observation):
            return rule.category
    if fallback is not None:
        return ErrorCategory(fallback(observation))
    raise Unclassifiable(f"no rule matches: {observation[:120]!r}")


# -- statistics ----------------------------------------------------------------------

@dataclass
class RunStats:
    completed: bool = False
    runtime: float = 0.0
    api_cost: float = 0.0
    n_interactions: int = 0
    n_actions: int = 0
    n_scripts: int = 0
    n_pipelines_explored: int = 0
    n_refinement_rounds: int = 0
    n_errors: int = 0
    n_recovered: int = 0

    @property
    def recovery_rate(self) -> float | None:
        return self.n_recovered / self.n_errors if self.n_errors else None

    def __add__(self, other: "RunStats") -> "RunStats":
        return RunStats(
            completed=self.completed and other.completed,
            **{
                f.name: getattr(self, f.name) + getattr(other, f.name)
                for f in fields(self)
                if f.name != "completed"
            },
        )

    def to_record(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


COUNT_FIELDS = (
    "n_interactions",
    "n_actions",
    "n_scripts",
    "n_pipelines_explored",
    "n_refinement_rounds",
    "n_errors",
    "n_recovered",
)
REAL_FIELDS = ("runtime", "api_cost")


def compute_run_stats(ledger: TraceLedger) -> RunStats:
    if not ledger.closed:
        raise LedgerOpen("run statistics need a closed ledger")
    stats = RunStats(completed=bool(ledger.footer.get("completed")), runtime=float(ledger.footer.get("runtime_seconds") or 0.0))
    costs = []
    pipelines: set[str] = set()
    programs: set[str] = set()
    recovered = set()
    for step in ledger.steps:
        recovered.update(step.recovers)
        if step.usage is not None:
            costs.append(step.usage.cost)
        kind = step.kind
        if kind in ACTION_KINDS:
            stats.n_actions += 1
        if kind == SEND_MESSAGE and not step.error:
            stats.n_interactions += 1
        args = step.action.get("args") or {}
        if kind == EXECUTE_PROGRAM:
            stats.n_scripts += 1
        if kind in (SYNTHESIZE_PROGRAM, EXECUTE_PROGRAM) and args.get("pipeline"):
            pipelines.add(str(args["pipeline"]))
        if kind == SYNTHESIZE_PROGRAM and not step.error:
            name = str(args.get("name", ""))
            if name in programs:
                stats.n_refinement_rounds += 1
            programs.add(name)
        if step.error:
            stats.n_errors += 1
    stats.n_recovered = sum(1 for s in ledger.steps if s.error and s.index in recovered)
    stats.n_pipelines_explored = len(pipelines)
    stats.api_cost = math.fsum(costs)
    return stats


def concat_ledgers(first: TraceLedger, second: TraceLedger) -> TraceLedger:
    """Join two closed ledgers into one, renumbering the second one's steps."""
    out = TraceLedger()
    offset = len(first)
    for step in first.steps:
        out.append_step(step)
    for step in second.steps:
        out.append_step(
            TraceStep(
                step.index + offset, step.agent, step.action, step.observation, step.usage,
                step.timestamp, step.error, tuple(i + offset for i in step.recovers),
            )
        )
    runtime = sum(float((l.footer or {}).get("runtime_seconds") or 0.0) for l in (first, second))
    completed = all(bool((l.footer or {}).get("completed")) for l in (first, second))
    out.close(completed, None, runtime)
    return out


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def summarize_field(values: Sequence[float], integer_range: bool) -> str:
    """``mean (min–max)`` with the mean at one decimal."""
    lo, hi = min(values), max(values)
    if integer_range:
        rng = f"{int(lo)}–{int(hi)}"
    else:
        rng = f"{fixed(float(lo))}–{fixed(float(hi))}"
    return f"{fixed(_mean([float(v) for v in values]))} ({rng})"


def export_tables(stats: Sequence[RunStats], runtime_unit: str = "h") -> str:
    """TSV summary across runs: one row per statistic, formatted ``mean (min–max)``."""
    if not stats:
        raise ValueError("need at least one run")
    scale = {"h": 3600.0, "s": 1.0, "min": 60.0}[runtime_unit]
    rows = [("field", "summary")]
    done = sum(1 for s in stats if s.completed)
    rows.append(("completed", f"{done}/{len(stats)}"))
    rows.append((f"runtime_{runtime_unit}", summarize_field([s.runtime / scale for s in stats], False)))
    rows.append(("api_cost", summarize_field([s.api_cost for s in stats], False)))
    for name in COUNT_FIELDS:
        rows.append((name, summarize_field([getattr(s, name) for s in stats], True)))
    return "".join("\t".join(r) + "\n" for r in rows)


def stats_tsv(stats: RunStats) -> str:
    record = stats.to_record()
    header = "\t".join(record)
    values = "\t".join(str(v).lower() if isinstance(v, bool) else str(v) for v in record.values())
    return header + "\n" + values + "\n"


def errors_tsv(ledgers: Iterable[tuple[str, TraceLedger]]) -> str:
    """Per-run error counts by category, for stacked-bar plotting elsewhere."""
    cats = list(ErrorCategory)
    lines = ["run\t" + "\t".join(c.value for c in cats) + "\trecovered"]
    for name, ledger in ledgers:
        events = ledger.error_events()
        counts = [sum(1 for e in events if e.category is c) for c in cats]
        lines.append("\t".join([name, *map(str, counts), str(sum(e.recovered for e in events))]))
    return "\n".join(lines) + "\n"
