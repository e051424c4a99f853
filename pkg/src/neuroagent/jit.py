"""Just-in-time primitive selection and schema injection.

An agent sees only the compact ``(name, description)`` index up front. A
selector picks the subset relevant to the current instruction and only those
cards have their full schemas rendered into the agent's context.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

from .errors import PolicyFailure, UnknownName
from .registry import CompactIndexEntry, Registry, render_card, render_index
from .roles import AgentRole, DecisionPoint

_SPLIT = re.compile(r"[^0-9A-Za-z]+")


def tokenize(text: str) -> list[str]:
    return [tok.casefold() for tok in _SPLIT.split(text) if tok]


def lexical_rank(instruction: str, index: Sequence[CompactIndexEntry], k: int) -> list[tuple[str, int]]:
    """Top ``k`` entries by token overlap with ``instruction``.

    The score of an entry counts the instruction tokens (with repetition) that
    occur anywhere in the entry's name or description. Ties go to the
    lexicographically smaller name.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    words = tokenize(instruction)
    scored = []
    for entry in index:
        vocab = set(tokenize(entry.name)) | set(tokenize(entry.description))
        scored.append((entry.name, sum(1 for w in words if w in vocab)))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:k]


def mentioned_names(instruction: str, names: Iterable[str]) -> set[str]:
    """Card names quoted verbatim in the instruction."""
    text = instruction.casefold()
    found = set()
    for name in names:
        if re.search(rf"(?<![0-9a-z_]){re.escape(name)}(?![0-9a-z_])", text):
            found.add(name)
    return found


@dataclass(frozen=True)
class SelectionRequest:
    instruction: str
    index: Sequence[CompactIndexEntry]
    policy: "Selector"
    agent: AgentRole = AgentRole.PROCESSING

    def __post_init__(self):
        if not self.instruction or not self.instruction.strip():
            raise ValueError("instruction must be non-empty")


@dataclass(frozen=True)
class SelectionResult:
    selected_names: tuple[str, ...]
    injected_context: str
    rationale: str | None = None

    def to_record(self) -> dict:
        return {"selected": list(self.selected_names), "rationale": self.rationale}


class Selector(Protocol):
    def choose(self, request: SelectionRequest) -> tuple[Iterable[str], str | None]: ...


class LexicalSelector:
    """Deterministic selector.

    Takes every card named verbatim in the instruction, then the best lexical
    matches: entries scoring at least ``relative_threshold`` of the top score,
    at most ``max_k`` of them, never zero-score entries.
    """

    def __init__(self, max_k: int = 5, relative_threshold: float = 0.75):
        if max_k < 1:
            raise ValueError("max_k must be >= 1")
        self.max_k = max_k
        self.relative_threshold = relative_threshold

    def choose(self, request: SelectionRequest):
        names = [e.name for e in request.index]
        forced = mentioned_names(request.instruction, names)
        ranked = lexical_rank(request.instruction, request.index, max(1, len(names))) if names else []
        best = ranked[0][1] if ranked else 0
        floor = max(1, math.ceil(best * self.relative_threshold))
        picked = [name for name, score in ranked if score >= floor][: self.max_k]
        chosen = forced | set(picked)
        rationale = f"lexical: forced={sorted(forced)} top_score={best}"
        return chosen, rationale


class FullLibrarySelector:
    """Selects the whole index; used when JIT injection is switched off."""

    def choose(self, request: SelectionRequest):
        return [e.name for e in request.index], "full library"


class EmptySelector:
    """Selects nothing; used when primitives are hidden from the agents."""

    def choose(self, request: SelectionRequest):
        return [], "primitives hidden"


class ModelSelector:
    """One model call that picks names from the compact index.

    The reply may be a JSON list of names, a JSON object with a ``selected``
    list (and optional ``rationale``), or names separated by commas/newlines.
    """

    PROMPT = (
        "Choose the primitives needed for the instruction below. Reply with a JSON object "
        '{"selected": [names...], "rationale": "..."} using only names from this index.\n\n'
    )

    def __init__(self, backend):
        self.backend = backend

    def choose(self, request: SelectionRequest):
        from .policy import ModelRequest

        model_request = ModelRequest(
            agent=request.agent,
            system_context=self.PROMPT + render_index(request.index),
            transcript=[{"role": "user", "content": request.instruction}],
            decision_point=DecisionPoint.SELECT_TOOLS,
        )
        try:
            reply = self.backend.complete(model_request)
        except PolicyFailure:
            raise
        except Exception as exc:
            raise PolicyFailure(f"selector call failed: {exc}") from exc
        self.last_usage = reply.usage
        return parse_selection(reply.content)


def parse_selection(content: str) -> tuple[list[str], str | None]:
    text = content.strip()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        obj = None
    if isinstance(obj, list):
        return [str(x) for x in obj], None
    if isinstance(obj, dict):
        return [str(x) for x in obj.get("selected", [])], obj.get("rationale")
    return [tok.strip() for tok in re.split(r"[,\n]", text) if tok.strip()], None


def select_tools(request: SelectionRequest, registry: Registry) -> SelectionResult:
    index_names = {e.name for e in request.index}
    unresolved = [n for n in index_names if n not in registry]
    if unresolved:
        raise UnknownName(unresolved)
    chosen, rationale = request.policy.choose(request)
    chosen = set(chosen)
    stray = chosen - index_names
    if stray:
        raise UnknownName(stray)
    names = tuple(sorted(chosen))
    return SelectionResult(names, render_injection(names, registry), rationale)


def render_injection(selected: Iterable[str], registry: Registry) -> str:
    names = sorted(set(selected))
    missing = [n for n in names if n not in registry]
    if missing:
        raise UnknownName(missing)
    return "\n".join(render_card(registry.lookup(n)) for n in names)
