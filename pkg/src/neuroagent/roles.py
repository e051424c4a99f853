"""Agent roles, decision points and the action vocabulary."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any


class AgentRole(str, Enum):
    SUPERVISOR = "Supervisor"
    DATA_AWARENESS = "DataAwareness"
    QUALITY_CONTROL = "QualityControl"
    PROCESSING = "Processing"
    DOWNSTREAM_ANALYSIS = "DownstreamAnalysis"

    @classmethod
    def parse(cls, value: "str | AgentRole") -> "AgentRole":
        if isinstance(value, AgentRole):
            return value
        for member in cls:
            if value in (member.value, member.name):
                return member
        raise ValueError(f"unknown agent role {value!r}")


SUB_AGENTS = (
    AgentRole.DATA_AWARENESS,
    AgentRole.QUALITY_CONTROL,
    AgentRole.PROCESSING,
    AgentRole.DOWNSTREAM_ANALYSIS,
)


class DecisionPoint(str, Enum):
    SELECT_TOOLS = "select_tools"
    REACT_STEP = "react_step"
    VISUAL_JUDGE = "visual_judge"


SEND_MESSAGE = "send_message"
WRITE_TODOS = "write_todos"
SYNTHESIZE_PROGRAM = "synthesize_program"
EXECUTE_PROGRAM = "execute_program"
INVOKE_PRIMITIVE = "invoke_primitive"
READ_FILE = "read_file"
WRITE_FILE = "write_file"
RUN_COMMAND = "run_command"
REPORT_FINAL = "report_final"

ACTION_KINDS = (
    SEND_MESSAGE,
    WRITE_TODOS,
    SYNTHESIZE_PROGRAM,
    EXECUTE_PROGRAM,
    INVOKE_PRIMITIVE,
    READ_FILE,
    WRITE_FILE,
    RUN_COMMAND,
    REPORT_FINAL,
)

# Ledger-only step kinds written by the runtime itself, never chosen by a policy.
SELECT_TOOLS_EVENT = "select_tools"
MALFORMED_EVENT = "malformed_action"


@dataclass(frozen=True)
class Action:
    kind: str
    args: dict[str, Any] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"kind": self.kind, "args": self.args}

    @classmethod
    def from_record(cls, record: dict) -> "Action":
        return cls(record["kind"], dict(record.get("args") or {}))


def parse_action(text: str) -> Action:
    """Parse a policy reply into an :class:`Action`.

    The reply must contain a JSON object with an ``action`` key; the remaining
    keys (or a nested ``args`` object) become the arguments. Leading prose
    before the object is tolerated.
    """
    start = text.find("{")
    if start < 0:
        raise ValueError("reply contains no JSON action object")
    try:
        obj, _ = json.JSONDecoder().raw_decode(text[start:])
    except json.JSONDecodeError as exc:
        raise ValueError(f"reply is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or "action" not in obj:
        raise ValueError("action object lacks an 'action' key")
    kind = obj.pop("action")
    args = obj.pop("args") if isinstance(obj.get("args"), dict) else None
    if args is None:
        args = obj
    elif obj:
        args = {**obj, **args}
    if not isinstance(kind, str) or kind not in ACTION_KINDS:
        raise ValueError(f"unknown action kind {kind!r}")
    return Action(kind, dict(args))
