"""The supervisor loop: hub-and-spoke routing, ReAct stepping and hard budgets.

One episode turns an objective and a dataset into deliverables. The Supervisor
acts one step at a time. When it sends a message to a specialist, that agent
gets a primitive selection for the instruction and runs its own ReAct loop
until it messages the Supervisor back. Every decision and its observation is
appended to the trace ledger. Time is read from an injected clock so a
scripted episode replays to a byte-identical ledger.
"""

from __future__ import annotations

import json
import re
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Sequence

from .errors import (
    BudgetExhausted,
    DisallowedAction,
    EmptyProgram,
    FanoutViolation,
    NeuroAgentError,
    PolicyFailure,
    RoutingViolation,
    SandboxTimeout,
    SpawnFailure,
    SubjectsFileMissing,
    UndeclaredPrimitive,
    UnknownName,
    WorkspaceViolation,
)
from .jit import (
    EmptySelector,
    FullLibrarySelector,
    LexicalSelector,
    ModelSelector,
    SelectionRequest,
    SelectionResult,
    select_tools,
)
from .ledger import ErrorCategory, TraceLedger, TraceStep, classify_error, compute_run_stats, RunStats
from .policy import ModelRequest, Usage
from .prompts import system_prompt
from .registry import CompactIndexEntry, Family, Registry, compact_index, list_by_family, render_index
from .roles import (
    ACTION_KINDS,
    EXECUTE_PROGRAM,
    INVOKE_PRIMITIVE,
    MALFORMED_EVENT,
    READ_FILE,
    REPORT_FINAL,
    RUN_COMMAND,
    SELECT_TOOLS_EVENT,
    SEND_MESSAGE,
    SYNTHESIZE_PROGRAM,
    SUB_AGENTS,
    WRITE_FILE,
    WRITE_TODOS,
    Action,
    AgentRole,
    DecisionPoint,
    parse_action,
)
from .sandbox import (
    JobArraySpec,
    Limits,
    Program,
    WorkspaceLayout,
    dispatch_job_array,
    execute_program,
    run_command,
    validate_program,
)

log = logging.getLogger(__name__)

OBSERVATION_TAIL = 1500
READ_LIMIT = 4000


class Ablation(str, Enum):
    FULL = "full"
    SINGLE_AGENT = "single_agent"
    NO_JIT = "no_jit"
    NO_CODE_CENTRIC = "no_code_centric"
    NO_PRIMITIVES = "no_primitives"


class HaltReason(str, Enum):
    STEP_LIMIT = "StepLimit"
    TIME_LIMIT = "TimeLimit"
    COST_LIMIT = "CostLimit"


@dataclass(frozen=True)
class Budget:
    max_react_steps: int = 500
    max_wall_clock_seconds: float = 12 * 3600.0
    max_cost: float | None = None

    def __post_init__(self):
        if self.max_react_steps <= 0 or self.max_wall_clock_seconds <= 0:
            raise ValueError("budget limits must be positive")
        if self.max_cost is not None and self.max_cost <= 0:
            raise ValueError("max_cost must be positive")


# -- clocks ------------------------------------------------------------------------------

class SystemClock:
    def now(self) -> float:
        return time.time()


class TickClock:
    """Deterministic clock: every read advances by ``tick`` seconds."""

    def __init__(self, start: float = 0.0, tick: float = 1.0):
        self.t = start
        self.tick = tick

    def now(self) -> float:
        value = self.t
        self.t += self.tick
        return value


def enforce_budget(trace: TraceLedger | int, budget: Budget, elapsed: float, cost: float | None = None) -> HaltReason | None:
    """The reason to halt now, or None to continue.

    ``trace`` is a ledger (its ReAct steps are counted, selection events are
    not) or a plain step count.
    """
    if isinstance(trace, int):
        steps = trace
    else:
        steps = sum(1 for s in trace.steps if s.kind != SELECT_TOOLS_EVENT)
        if cost is None:
            cost = sum(s.usage.cost for s in trace.steps if s.usage is not None)
    if steps >= budget.max_react_steps:
        return HaltReason.STEP_LIMIT
    if elapsed >= budget.max_wall_clock_seconds:
        return HaltReason.TIME_LIMIT
    if budget.max_cost is not None and (cost or 0.0) >= budget.max_cost:
        return HaltReason.COST_LIMIT
    return None


# -- capabilities ------------------------------------------------------------------------

_WORKER = frozenset({SEND_MESSAGE, WRITE_TODOS, SYNTHESIZE_PROGRAM, EXECUTE_PROGRAM, READ_FILE, WRITE_FILE, RUN_COMMAND})

CAPABILITIES: dict[AgentRole, frozenset[str]] = {
    AgentRole.SUPERVISOR: frozenset({SEND_MESSAGE, WRITE_TODOS, READ_FILE, REPORT_FINAL}),
    AgentRole.DATA_AWARENESS: frozenset({SEND_MESSAGE, WRITE_TODOS, READ_FILE, RUN_COMMAND}),
    AgentRole.QUALITY_CONTROL: _WORKER,
    AgentRole.PROCESSING: _WORKER,
    AgentRole.DOWNSTREAM_ANALYSIS: _WORKER,
}

LIBRARY: dict[AgentRole, Family | None] = {
    AgentRole.SUPERVISOR: None,
    AgentRole.DATA_AWARENESS: None,
    AgentRole.QUALITY_CONTROL: Family.QC,
    AgentRole.PROCESSING: Family.PROCESSING,
    AgentRole.DOWNSTREAM_ANALYSIS: Family.ANALYSIS,
}


def allowed_actions(role: AgentRole | str, ablation: Ablation | str = Ablation.FULL) -> frozenset[str]:
    """The action set a role may emit under an ablation setting."""
    role, ablation = AgentRole.parse(role), Ablation(ablation)
    if ablation is Ablation.SINGLE_AGENT:
        return frozenset(ACTION_KINDS) - {SEND_MESSAGE, INVOKE_PRIMITIVE}
    allowed = set(CAPABILITIES[role])
    if ablation is Ablation.NO_CODE_CENTRIC and {SYNTHESIZE_PROGRAM, EXECUTE_PROGRAM} & allowed:
        allowed -= {SYNTHESIZE_PROGRAM, EXECUTE_PROGRAM}
        allowed.add(INVOKE_PRIMITIVE)
    return frozenset(allowed)


# -- domain types ------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetRef:
    root_path: Path
    subject_ids: tuple[str, ...]
    labels_path: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "root_path", Path(self.root_path).resolve())
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids))
        if len(set(self.subject_ids)) != len(self.subject_ids):
            raise ValueError("subject ids must be unique")

    @classmethod
    def from_directory(cls, root: str | Path) -> "DatasetRef":
        """Subjects from ``participants.tsv`` if present, else from ``sub-*`` folders."""
        root = Path(root)
        table = root / "participants.tsv"
        if table.is_file():
            lines = table.read_text(encoding="utf-8").splitlines()
            ids = [line.split("\t")[0] for line in lines[1:] if line.strip()]
            return cls(root, ids, table)
        return cls(root, sorted(p.name for p in root.glob("sub-*") if p.is_dir()))


@dataclass(frozen=True)
class Objective:
    goal_text: str
    dataset: DatasetRef
    deliverable_spec: tuple[str, ...]

    def __post_init__(self):
        if not self.goal_text.strip():
            raise ValueError("objective goal text is empty")
        if not self.deliverable_spec:
            raise ValueError("objective lists no deliverables")
        object.__setattr__(self, "deliverable_spec", tuple(self.deliverable_spec))

    @classmethod
    def from_file(cls, path: str | Path, dataset: DatasetRef) -> "Objective":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data["goal"], dataset, tuple(data["deliverables"]))


@dataclass(frozen=True)
class Message:
    sender: AgentRole
    recipient: AgentRole
    body: str
    turn_index: int


class TodoPlan:
    """Ordered todo items whose status may only move from pending to done."""

    def __init__(self):
        self.items: list[tuple[str, str]] = []

    def update(self, items: Sequence[Any]) -> None:
        new = []
        for item in items:
            if isinstance(item, str):
                text, status = item, "pending"
            else:
                text, status = str(item["text"]), str(item.get("status", "pending"))
            if status not in ("pending", "done"):
                raise ValueError(f"unknown todo status {status!r}")
            new.append((text, status))
        old = dict(self.items)
        for text, status in new:
            if old.get(text) == "done" and status == "pending":
                raise ValueError(f"todo item {text!r} already completed cannot go back to pending")
        self.items = new

    def render(self) -> str:
        return "\n".join(f"[{'x' if s == 'done' else ' '}] {t}" for t, s in self.items)


@dataclass(frozen=True)
class Deliverable:
    kind: str
    path: str
    provenance: tuple[int, ...] = ()

    def to_record(self) -> dict:
        return {"kind": self.kind, "path": self.path, "provenance": list(self.provenance)}


@dataclass
class EpisodeResult:
    completed: bool
    halt_reason: str | None
    deliverables: list[Deliverable]
    ledger: TraceLedger
    workspace: WorkspaceLayout
    messages: list[Message] = field(default_factory=list)

    @property
    def stats(self) -> RunStats:
        return compute_run_stats(self.ledger)

    def deliverables_record(self) -> dict:
        return {
            "completed": self.completed,
            "halt_reason": self.halt_reason,
            "manifest": [d.to_record() for d in self.deliverables],
        }


# -- routing -----------------------------------------------------------------------------

class Router:
    """Hub-and-spoke message routing with one dispatch per Supervisor turn."""

    def __init__(self):
        self.turn = 0
        self.dispatched_this_turn = False
        self.delivered: list[Message] = []
        self.inboxes: dict[AgentRole, list[Message]] = {}

    def new_turn(self) -> None:
        self.turn += 1
        self.dispatched_this_turn = False

    def route(self, message: Message) -> Message:
        s, r = message.sender, message.recipient
        if s is r:
            raise RoutingViolation(f"RoutingViolation: {s.value} cannot message itself")
        if s is not AgentRole.SUPERVISOR and r is not AgentRole.SUPERVISOR:
            raise RoutingViolation(f"RoutingViolation: {s.value} cannot message {r.value}; sub-agents only talk to the Supervisor")
        if s is AgentRole.SUPERVISOR:
            if self.dispatched_this_turn:
                raise FanoutViolation("FanoutViolation: the Supervisor already dispatched a sub-agent this turn")
            self.dispatched_this_turn = True
        self.delivered.append(message)
        self.inboxes.setdefault(r, []).append(message)
        return message


def route_message(message: Message, router: Router) -> Message:
    return router.route(message)


def react_step(
    agent: AgentRole,
    request: ModelRequest,
    policy,
    ablation: Ablation | str = Ablation.FULL,
    allowed: frozenset[str] | None = None,
):
    """One policy decision for ``agent``.

    Returns ``(action, response)``. Raises ValueError for replies that hold no
    valid action and DisallowedAction for actions outside the role's set.
    """
    response = policy.complete(request)
    action = response.parsed_action or parse_action(response.content)
    allowed = allowed if allowed is not None else allowed_actions(agent, ablation)
    if action.kind not in allowed:
        raise DisallowedAction(agent.value, action.kind)
    return action, response


# -- episode -----------------------------------------------------------------------------

class _StepError(Exception):
    """An action failed; the message becomes the (flagged) observation."""

    def __init__(self, observation: str, category: ErrorCategory | None = None):
        super().__init__(observation)
        self.observation = observation
        self.category = category


class _EndTurn(Exception):
    def __init__(self, body: str):
        self.body = body


class Episode:
    def __init__(
        self,
        objective: Objective,
        registry: Registry,
        policy,
        budget: Budget = Budget(),
        ablation: Ablation | str = Ablation.FULL,
        workspace: str | Path | WorkspaceLayout = "workspace",
        clock=None,
        ledger_path: str | Path | None = None,
        selector: str = "lexical",
        executor: str = "local_pool",
        limits: Limits = Limits(wall_seconds=600.0),
        rules=None,
    ):
        self.objective = objective
        self.registry = registry
        self.policy = policy
        self.budget = budget
        self.ablation = Ablation(ablation)
        self.workspace = workspace if isinstance(workspace, WorkspaceLayout) else WorkspaceLayout(workspace)
        self.workspace.prepare()
        self.clock = clock or SystemClock()
        self.ledger = TraceLedger(ledger_path)
        self.selector_kind = selector
        self.executor = executor
        self.limits = limits
        self.rules = rules
        self.router = Router()
        self.transcripts: dict[AgentRole, list[dict]] = {}
        self.todos: dict[AgentRole, TodoPlan] = {}
        self.selections: dict[AgentRole, SelectionResult] = {}
        self.programs: dict[str, Program] = {}
        self.react_steps = 0
        self.cost = 0.0
        self.start = None
        self.elapsed = 0.0
        self.now = 0.0
        self.completed = False
        self.deliverables: list[Deliverable] = []
        self._pending: Message | None = None

    # ---- helpers

    @property
    def single_agent(self) -> bool:
        return self.ablation is Ablation.SINGLE_AGENT

    def _sanitize(self, text: str) -> str:
        pairs = [
            (str(self.workspace.root), "<workspace>"),
            (str(self.objective.dataset.root_path), "<dataset>"),
        ]
        for real, token in sorted(pairs, key=lambda p: -len(p[0])):
            text = text.replace(real, token)
        return text

    def _expand(self, path: str) -> Path:
        path = str(path)
        if path.startswith("<dataset>"):
            return Path(str(self.objective.dataset.root_path) + path[len("<dataset>"):]).resolve()
        if path.startswith("<workspace>"):
            path = path[len("<workspace>"):].lstrip("/") or "."
        p = Path(path)
        return (p if p.is_absolute() else self.workspace.root / p).resolve()

    def _rel(self, path: str | Path) -> str:
        return self._sanitize(str(Path(path)))

    def _index_for(self, agent: AgentRole) -> list[CompactIndexEntry]:
        if self.ablation is Ablation.NO_PRIMITIVES:
            return []
        if self.ablation in (Ablation.NO_JIT, Ablation.SINGLE_AGENT):
            return compact_index(self.registry)
        family = LIBRARY[agent]
        if family is None:
            return []
        return compact_index(Registry(list_by_family(self.registry, family)))

    def _selector(self):
        if self.ablation is Ablation.NO_PRIMITIVES:
            return EmptySelector()
        if self.ablation is Ablation.NO_JIT:
            return FullLibrarySelector()
        if self.selector_kind == "model":
            return ModelSelector(self.policy)
        return LexicalSelector()

    def _tick(self) -> None:
        self.now = self.clock.now()
        self.elapsed = self.now - self.start

    def _check_budget(self) -> None:
        reason = enforce_budget(self.react_steps, self.budget, self.elapsed, self.cost)
        if reason is not None:
            raise BudgetExhausted(reason.value)

    def _record(self, agent: AgentRole, action: dict, observation: str, usage: Usage | None, error: dict | None) -> TraceStep:
        recovers: tuple[int, ...] = ()
        if error is None:
            recovers = self._recoverable(agent.value, action.get("kind"))
        step = TraceStep(
            index=self.ledger.next_index,
            agent=agent.value,
            action=action,
            observation=observation,
            usage=usage,
            timestamp=self.now,
            error=error,
            recovers=recovers,
        )
        self.ledger.append_step(step)
        if usage is not None:
            self.cost += usage.cost
        return step

    def _recoverable(self, agent: str, kind: str) -> tuple[int, ...]:
        """Open errors of ``agent`` that a success of ``kind`` resolves.

        A failed action is resolved by the next success of the same kind. Errors
        of actions the agent could not perform at all (disallowed, malformed,
        misrouted) are resolved by its next success of any kind.
        """
        allowed = allowed_actions(agent, self.ablation)
        out = []
        for s in self.ledger.unrecovered_errors(agent):
            if s.kind == kind or s.kind not in allowed:
                out.append(s.index)
        return tuple(out)

    def _classify(self, observation: str, category: ErrorCategory | None) -> dict:
        if category is None:
            try:
                category = classify_error(observation, self.rules)
            except NeuroAgentError:
                category = ErrorCategory.CODEGEN_EXECUTION
        lines = observation.strip().splitlines() or [""]
        telling = [l for l in lines if re.search(r"\w+(Error|Violation|Timeout|Exhausted)\b|exit status [1-9]", l)]
        note = (telling or lines)[-1].strip()[:200]
        return {"category": category.value, "note": note}

    # ---- top level

    def run(self) -> EpisodeResult:
        self.start = self.clock.now()
        self.now = self.start
        try:
            if self.single_agent:
                self._run_single_agent()
            else:
                self._run_supervisor()
        except BudgetExhausted as exc:
            self.ledger.close(False, exc.reason, self.elapsed)
            exc.result = self._result(exc.reason)
            raise
        except PolicyFailure as exc:
            reason = f"PolicyFailure: {exc}"
            self.ledger.close(False, reason, self.elapsed)
            exc.result = self._result(reason)
            raise
        self._tick()
        self.ledger.close(True, None, self.elapsed)
        return self._result(None)

    def _result(self, halt_reason):
        return EpisodeResult(self.completed, halt_reason, list(self.deliverables), self.ledger, self.workspace, list(self.router.delivered))

    def _opening(self) -> str:
        ds = self.objective.dataset
        return (
            f"Objective: {self.objective.goal_text}\n"
            f"Dataset: <dataset> with {len(ds.subject_ids)} subjects ({', '.join(ds.subject_ids[:3])}"
            f"{', ...' if len(ds.subject_ids) > 3 else ''}).\n"
            f"Workspace: <workspace>\n"
            f"Required deliverables: {', '.join(self.objective.deliverable_spec)}"
        )

    def _system(self, agent: AgentRole) -> str:
        allowed = allowed_actions(agent, self.ablation)
        text = system_prompt(agent, allowed, self.single_agent)
        if agent is AgentRole.SUPERVISOR and not self.single_agent:
            for role in SUB_AGENTS:
                index = self._index_for(role)
                if index:
                    text += f"\n\nPrimitives available to {role.value}:\n" + render_index(index)
        selection = self.selections.get(agent)
        if selection is not None and selection.injected_context:
            text += "\n\nPrimitive schemas for this task:\n" + selection.injected_context
        return text

    def _run_supervisor(self) -> None:
        sup = AgentRole.SUPERVISOR
        self.transcripts[sup] = [{"role": "user", "content": self._opening()}]
        while not self.completed:
            self.router.new_turn()
            self._agent_step(sup)

    def _run_single_agent(self) -> None:
        agent = AgentRole.SUPERVISOR
        self.transcripts[agent] = [{"role": "user", "content": self._opening()}]
        self._select(agent, self.objective.goal_text)
        while not self.completed:
            self._agent_step(agent)

    def _run_subagent(self, agent: AgentRole, instruction: str) -> str:
        self.transcripts.setdefault(agent, []).append({"role": "user", "content": f"Message from Supervisor:\n{instruction}"})
        self._select(agent, instruction)
        while True:
            try:
                self._agent_step(agent)
            except _EndTurn as end:
                return end.body

    def _select(self, agent: AgentRole, instruction: str) -> None:
        index = self._index_for(agent)
        request = SelectionRequest(instruction, index, self._selector(), agent)
        selector = request.policy
        try:
            result = select_tools(request, self.registry)
            error = None
        except UnknownName as exc:
            result = SelectionResult((), "", None)
            error = {"category": ErrorCategory.TOOL_PRIMITIVE_MISUSE.value, "note": str(exc)[:200]}
        self.selections[agent] = result
        usage = getattr(selector, "last_usage", None)
        observation = f"selected {len(result.selected_names)} of {len(index)}: {', '.join(result.selected_names) or '(none)'}"
        if error:
            observation = f"{error['note']}; no primitives injected"
        action = {"kind": SELECT_TOOLS_EVENT, "args": {"index": [e.name for e in index], "selected": list(result.selected_names)}}
        self._record(agent, action, observation, usage, error)

    def _agent_step(self, agent: AgentRole) -> None:
        self._tick()
        self._check_budget()
        transcript = self.transcripts[agent]
        request = ModelRequest(agent, self._system(agent), list(transcript), DecisionPoint.REACT_STEP)
        self.react_steps += 1
        response = self.policy.complete(request)
        transcript.append({"role": "assistant", "content": response.content})
        try:
            action = response.parsed_action or parse_action(response.content)
        except ValueError as exc:
            self._fail(agent, {"kind": MALFORMED_EVENT, "args": {}}, f"malformed action: {exc}", response.usage, ErrorCategory.TOOL_PRIMITIVE_MISUSE)
            return
        record = action.to_record()
        if action.kind not in allowed_actions(agent, self.ablation):
            self._fail(agent, record, str(DisallowedAction(agent.value, action.kind)), response.usage, ErrorCategory.TOOL_PRIMITIVE_MISUSE)
            return
        try:
            observation = self._dispatch(agent, action)
        except _StepError as err:
            self._fail(agent, record, err.observation, response.usage, err.category)
            return
        except _EndTurn:
            observation = f"delivered to {AgentRole.SUPERVISOR.value}"
            transcript.append({"role": "user", "content": f"Observation:\n{observation}"})
            self._record(agent, record, observation, response.usage, None)
            raise
        observation = self._sanitize(observation)
        transcript.append({"role": "user", "content": f"Observation:\n{observation}"})
        self._record(agent, record, observation, response.usage, None)
        if action.kind == SEND_MESSAGE and agent is AgentRole.SUPERVISOR:
            self._deliver_reply()

    def _fail(self, agent, record, observation, usage, category) -> None:
        observation = self._sanitize(observation)
        self.transcripts[agent].append({"role": "user", "content": f"Observation (error):\n{observation}"})
        self._record(agent, record, observation, usage, self._classify(observation, category))

    # ---- actions

    def _dispatch(self, agent: AgentRole, action: Action) -> str:
        handler = {
            SEND_MESSAGE: self._do_send,
            WRITE_TODOS: self._do_todos,
            READ_FILE: self._do_read,
            WRITE_FILE: self._do_write,
            SYNTHESIZE_PROGRAM: self._do_synthesize,
            EXECUTE_PROGRAM: self._do_execute,
            INVOKE_PRIMITIVE: self._do_invoke,
            RUN_COMMAND: self._do_command,
            REPORT_FINAL: self._do_report,
        }[action.kind]
        return handler(agent, action.args)

    def _do_send(self, agent, args) -> str:
        to = args.get("to")
        recipients = to if isinstance(to, list) else [to]
        if len(recipients) != 1:
            raise _StepError(f"FanoutViolation: one recipient per message, got {recipients}", ErrorCategory.INSTRUCTION_VIOLATION)
        try:
            recipient = AgentRole.parse(recipients[0])
        except ValueError:
            raise _StepError(f"RoutingViolation: unknown recipient {recipients[0]!r}", ErrorCategory.INSTRUCTION_VIOLATION) from None
        body = str(args.get("body", ""))
        try:
            message = self.router.route(Message(agent, recipient, body, self.router.turn))
        except (RoutingViolation, FanoutViolation) as exc:
            raise _StepError(str(exc), ErrorCategory.INSTRUCTION_VIOLATION) from None
        if agent is not AgentRole.SUPERVISOR:
            raise _EndTurn(message.body)
        self._pending = message
        return f"delivered to {recipient.value}"

    def _deliver_reply(self) -> None:
        message = self._pending
        reply = self._run_subagent(message.recipient, message.body)
        self.transcripts[AgentRole.SUPERVISOR].append({"role": "user", "content": f"Message from {message.recipient.value}:\n{reply}"})

    def _do_todos(self, agent, args) -> str:
        plan = self.todos.setdefault(agent, TodoPlan())
        try:
            plan.update(args.get("items", []))
        except (ValueError, KeyError, TypeError) as exc:
            raise _StepError(f"StateDrift: {exc}", ErrorCategory.STATE_DRIFT) from None
        return plan.render() or "(empty plan)"

    def _readable(self, path: Path) -> bool:
        roots = (self.workspace.root, self.objective.dataset.root_path)
        return any(path == r or r in path.parents for r in roots)

    def _do_read(self, agent, args) -> str:
        raw = str(args.get("path", ""))
        path = self._expand(raw)
        if not self._readable(path):
            raise _StepError(f"WorkspaceViolation: {raw} is outside the workspace and dataset", ErrorCategory.INSTRUCTION_VIOLATION)
        if path.is_dir():
            entries = sorted(p.name + ("/" if p.is_dir() else "") for p in path.iterdir())
            return f"{self._rel(path)}:\n" + "\n".join(entries)
        if not path.is_file():
            raise _StepError(f"FileNotFoundError: No such file: {self._rel(path)}", ErrorCategory.FILE_PATH)
        text = path.read_text(encoding="utf-8", errors="replace")
        if len(text) > READ_LIMIT:
            text = text[:READ_LIMIT] + f"\n[... {len(text) - READ_LIMIT} more characters]"
        return text

    def _do_write(self, agent, args) -> str:
        raw = str(args.get("path", ""))
        try:
            path = self.workspace.resolve(self._expand(raw))
        except WorkspaceViolation as exc:
            raise _StepError(str(exc), ErrorCategory.INSTRUCTION_VIOLATION) from None
        path.parent.mkdir(parents=True, exist_ok=True)
        content = str(args.get("content", ""))
        path.write_text(content, encoding="utf-8")
        return f"wrote {len(content)} characters to {self._rel(path)}"

    def _do_synthesize(self, agent, args) -> str:
        try:
            program = Program(
                str(args.get("source", "")),
                frozenset(args.get("primitives", ())),
                args.get("entry_kind", "single_run"),
                str(args.get("name", "program")),
            )
            program = validate_program(program, self.selections.get(agent), self.registry.names)
        except (EmptyProgram, UndeclaredPrimitive) as exc:
            raise _StepError(str(exc), ErrorCategory.TOOL_PRIMITIVE_MISUSE) from None
        except ValueError as exc:
            raise _StepError(f"invalid argument for primitive program: {exc}", ErrorCategory.TOOL_PRIMITIVE_MISUSE) from None
        self.programs[program.name] = program
        path = self.workspace.subdirs["scripts"] / program.filename
        path.write_text(program.source, encoding="utf-8")
        used = ", ".join(sorted(program.declared_primitives)) or "none"
        return f"program {program.name} saved to {self._rel(path)} (primitives: {used})"

    def _env(self) -> dict[str, str]:
        return {"DATASET_ROOT": str(self.objective.dataset.root_path)}

    def _do_execute(self, agent, args) -> str:
        name = str(args.get("name", ""))
        program = self.programs.get(name)
        if program is None:
            raise _StepError(f"FileNotFoundError: program {name!r} has not been synthesized", ErrorCategory.FILE_PATH)
        if args.get("subjects_file"):
            return self._run_array(program, args)
        try:
            record = execute_program(program, self.workspace, self.limits, [str(a) for a in args.get("args", [])], self._env())
        except SandboxTimeout as exc:
            raise _StepError(f"SandboxTimeout: {exc}", ErrorCategory.SCALABILITY_RESOURCE) from None
        except SpawnFailure as exc:
            raise _StepError(str(exc)) from None
        text = self._sanitize(record.read_log())
        tail = text[-OBSERVATION_TAIL:]
        produced = ", ".join(record.produced_paths[:20]) or "none"
        obs = f"exit status {record.exit_status}\n{tail.rstrip()}\nproduced: {produced}"
        if record.violations:
            raise _StepError(obs + f"\nWorkspaceViolation: {len(record.violations)} write(s) outside the workspace were blocked", ErrorCategory.INSTRUCTION_VIOLATION)
        if record.exit_status != 0:
            raise _StepError(obs)
        return obs

    def _run_array(self, program: Program, args) -> str:
        subjects_file = self._expand(str(args["subjects_file"]))
        script = f"scripts/{program.filename}"
        spec = JobArraySpec(subjects_file, f"python {script} {{subject}}", int(args.get("max_parallel", 4)), Path("logs") / program.name, program.name)
        try:
            records = dispatch_job_array(spec, self.executor, self.workspace, self.limits, self._env())
        except SubjectsFileMissing as exc:
            raise _StepError(f"FileNotFoundError: {self._sanitize(str(exc))}", ErrorCategory.FILE_PATH) from None
        except NeuroAgentError as exc:
            raise _StepError(self._sanitize(str(exc))) from None
        failed = [r for r in records if r.exit_status != 0]
        lines = [f"job array {program.name}: {len(records) - len(failed)}/{len(records)} subjects succeeded; logs in <workspace>/logs/{program.name}/<subject>.log"]
        for r in failed:
            tail = self._sanitize(r.read_log()).strip().splitlines()[-3:]
            lines.append(f"{r.subject}: exit status {r.exit_status}: " + " | ".join(tail))
        obs = "\n".join(lines)
        if any(r.violations for r in records):
            raise _StepError(obs + "\nWorkspaceViolation: writes outside the workspace were blocked", ErrorCategory.INSTRUCTION_VIOLATION)
        if failed:
            raise _StepError(obs)
        return obs

    def _do_invoke(self, agent, args) -> str:
        name = str(args.get("name", ""))
        selection = self.selections.get(agent)
        if selection is None or name not in selection.selected_names:
            raise _StepError(f"UndeclaredPrimitive: {name!r} was not selected for this task", ErrorCategory.TOOL_PRIMITIVE_MISUSE)
        params = json.dumps(args.get("params", {}), sort_keys=True)
        source = f"import json\nfrom neuroagent import mocklib\nprint(json.dumps(mocklib.{name}(**json.loads({params!r})), default=str, sort_keys=True))\n"
        program = Program(source, frozenset({name}), name=f"invoke_{name}")
        record = execute_program(program, self.workspace, self.limits, (), self._env())
        obs = f"exit status {record.exit_status}\n" + self._sanitize(record.read_log())[-OBSERVATION_TAIL:].rstrip()
        if record.exit_status != 0 or record.violations:
            raise _StepError(obs)
        return obs

    def _do_command(self, agent, args) -> str:
        command = str(args.get("command", "")).replace("<dataset>", str(self.objective.dataset.root_path)).replace("<workspace>", str(self.workspace.root))
        try:
            record = run_command(command, self.workspace, self.limits, log_name=f"command_{self.ledger.next_index}.log")
        except SpawnFailure as exc:
            raise _StepError(f"FileNotFoundError: {exc}", ErrorCategory.FILE_PATH) from None
        except SandboxTimeout as exc:
            raise _StepError(f"SandboxTimeout: {exc}", ErrorCategory.SCALABILITY_RESOURCE) from None
        obs = f"exit status {record.exit_status}\n" + self._sanitize(record.read_log())[-OBSERVATION_TAIL:].rstrip()
        if record.exit_status != 0:
            raise _StepError(obs)
        return obs

    def _do_report(self, agent, args) -> str:
        items = args.get("deliverables") or []
        problems, manifest = [], []
        for item in items:
            kind, raw = str(item.get("kind", "")), str(item.get("path", ""))
            path = self._expand(raw)
            inside = path == self.workspace.root or self.workspace.root in path.parents
            if not inside:
                problems.append(f"{kind}: path {raw} is outside the workspace")
            elif not path.exists():
                problems.append(f"{kind}: nonexistent output {self._rel(path)}")
            else:
                rel = self.workspace.relative(path)
                manifest.append(Deliverable(kind, rel, self._provenance(rel)))
        missing = [k for k in self.objective.deliverable_spec if k not in {d.kind for d in manifest}]
        if missing:
            problems.append(f"missing deliverable kinds: {', '.join(missing)} (nonexistent output)")
        if problems:
            raise _StepError("report rejected: " + "; ".join(problems), ErrorCategory.HALLUCINATION)
        self.deliverables = manifest
        self.completed = True
        return "accepted deliverables: " + ", ".join(f"{d.kind}={d.path}" for d in manifest)

    def _provenance(self, rel: str) -> tuple[int, ...]:
        name = Path(rel).name
        out = []
        for s in self.ledger.steps:
            if s.error or s.kind not in (SYNTHESIZE_PROGRAM, EXECUTE_PROGRAM, WRITE_FILE, INVOKE_PRIMITIVE):
                continue
            if rel in s.observation or name in json.dumps(s.action.get("args", {})):
                out.append(s.index)
        return tuple(out)


def run_episode(
    objective: Objective,
    registry: Registry,
    policy,
    budget: Budget = Budget(),
    config: Ablation | str = Ablation.FULL,
    workspace: str | Path = "workspace",
    clock=None,
    ledger_path: str | Path | None = None,
    **kwargs,
) -> EpisodeResult:
    """Run one episode and return its deliverables and closed ledger.

    Raises BudgetExhausted or PolicyFailure with ``.result`` attached; the
    ledger is closed with the halt reason in either case.
    """
    return Episode(objective, registry, policy, budget, config, workspace, clock, ledger_path, **kwargs).run()


def load_episode_config(path: str | Path) -> dict:
    """Episode config from JSON or YAML, with defaults filled in and keys checked."""
    from .errors import ConfigError

    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() in (".yaml", ".yml"):
            import yaml

            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    known = {"budget", "ablation", "workspace_root", "policy", "selector", "executor"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    budget = data.get("budget") or {}
    try:
        out = {
            "budget": Budget(
                int(budget.get("max_react_steps", 500)),
                float(budget.get("max_wall_clock_seconds", 43200)),
                None if budget.get("max_cost") is None else float(budget["max_cost"]),
            ),
            "ablation": Ablation(data.get("ablation", "full")),
            "workspace_root": data.get("workspace_root"),
            "policy": data.get("policy"),
            "selector": data.get("selector", "lexical"),
            "executor": data.get("executor", "local_pool"),
        }
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config {path}: {exc}") from exc
    if out["selector"] not in ("lexical", "model"):
        raise ConfigError(f"selector must be lexical or model, got {out['selector']!r}")
    return out
