"""Decision sources: a scripted replay backend, a live chat-completions adapter,
and a recorder that turns live sessions into replayable scripts.

Script files are JSON lines with the keys ``agent``, ``decision_point``,
``match``, ``response`` and ``usage``. Replay is strictly sequential: the next
line must match the incoming request or the call fails.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol

from .errors import ScriptExhausted, ScriptMismatch, TransportError
from .roles import Action, AgentRole, DecisionPoint, parse_action

ENDPOINT_ENV = "NEXUS_MODEL_ENDPOINT"
KEY_ENV = "NEXUS_MODEL_KEY"


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost: float = 0.0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0 or self.cost < 0:
            raise ValueError("usage counts must be non-negative")

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
            self.cost + other.cost,
        )

    def to_record(self) -> dict:
        return {"prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens, "cost": self.cost}

    @classmethod
    def from_record(cls, record: dict | None) -> "Usage":
        if not record:
            return cls()
        return cls(int(record.get("prompt_tokens", 0)), int(record.get("completion_tokens", 0)), float(record.get("cost", 0.0)))


@dataclass(frozen=True)
class PriceTable:
    """Dollar price per thousand tokens."""

    prompt_per_1k: float = 0.0
    completion_per_1k: float = 0.0

    def cost(self, prompt_tokens: int, completion_tokens: int) -> float:
        return prompt_tokens / 1000 * self.prompt_per_1k + completion_tokens / 1000 * self.completion_per_1k


@dataclass
class ModelRequest:
    agent: AgentRole
    system_context: str
    transcript: list[dict[str, str]]
    decision_point: DecisionPoint
    images: list[str] = field(default_factory=list)  # base64 PNG payloads

    def __post_init__(self):
        self.agent = AgentRole.parse(self.agent)
        self.decision_point = DecisionPoint(self.decision_point)
        if self.decision_point is DecisionPoint.REACT_STEP and not self.transcript:
            raise ValueError("react_step requests need a non-empty transcript")

    def text(self) -> str:
        if self.transcript:
            return "\n".join(m.get("content", "") for m in self.transcript)
        return self.system_context


@dataclass
class ModelResponse:
    content: str
    usage: Usage = field(default_factory=Usage)
    parsed_action: Action | None = None
    correlation_id: str | None = None

    def to_record(self) -> dict:
        return {"content": self.content, "usage": self.usage.to_record()}


class PolicyBackend(Protocol):
    def complete(self, request: ModelRequest) -> ModelResponse: ...


def _try_parse(request: ModelRequest, content: str) -> Action | None:
    if request.decision_point is not DecisionPoint.REACT_STEP:
        return None
    try:
        return parse_action(content)
    except ValueError:
        return None


@dataclass(frozen=True)
class ScriptEntry:
    agent: AgentRole
    decision_point: DecisionPoint
    match: str
    response: str
    usage: Usage = Usage()

    @classmethod
    def from_record(cls, record: dict) -> "ScriptEntry":
        response = record["response"]
        if not isinstance(response, str):
            response = json.dumps(response, sort_keys=True)
        return cls(
            AgentRole.parse(record["agent"]),
            DecisionPoint(record["decision_point"]),
            record.get("match", "") or "",
            response,
            Usage.from_record(record.get("usage")),
        )

    def to_record(self) -> dict:
        return {
            "agent": self.agent.value,
            "decision_point": self.decision_point.value,
            "match": self.match,
            "response": self.response,
            "usage": self.usage.to_record(),
        }

    def matches(self, request: ModelRequest) -> bool:
        return (
            self.agent is request.agent
            and self.decision_point is request.decision_point
            and self.match.casefold() in request.text().casefold()
        )


def load_script(path: str | Path) -> list[ScriptEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entries.append(ScriptEntry.from_record(json.loads(line)))
    return entries


def write_script(entries: Iterable[ScriptEntry], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry.to_record(), sort_keys=True) + "\n")
    return path


class ScriptedPolicy:
    """Replays canned responses in order; one outstanding call at a time."""

    def __init__(self, entries: Iterable[ScriptEntry | dict]):
        self.entries = [e if isinstance(e, ScriptEntry) else ScriptEntry.from_record(e) for e in entries]
        self.cursor = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedPolicy":
        return cls(load_script(path))

    @property
    def remaining(self) -> int:
        return len(self.entries) - self.cursor

    def complete(self, request: ModelRequest) -> ModelResponse:
        with self._lock:
            if self.cursor >= len(self.entries):
                raise ScriptExhausted(f"script exhausted after {len(self.entries)} responses")
            entry = self.entries[self.cursor]
            if not entry.matches(request):
                snippet = request.text()[-120:].replace("\n", " ")
                raise ScriptMismatch(
                    (entry.agent.value, entry.decision_point.value, entry.match),
                    (request.agent.value, request.decision_point.value, snippet),
                )
            self.cursor += 1
        return ModelResponse(entry.response, entry.usage, _try_parse(request, entry.response), f"script-{self.cursor}")


class LivePolicy:
    """Provider-agnostic chat-completions client.

    Posts ``{"model", "messages"}`` to ``endpoint`` and reads
    ``choices[0].message.content`` plus the ``usage`` block. Decoding
    parameters are passed through untouched via ``options``.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        model: str | None = None,
        prices: PriceTable = PriceTable(),
        timeout: float = 120.0,
        options: dict[str, Any] | None = None,
        client=None,
    ):
        import httpx

        self.endpoint = endpoint
        self.model = model
        self.prices = prices
        self.options = dict(options or {})
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        self._ids = itertools.count(1)
        self._id_lock = threading.Lock()

    @classmethod
    def from_env(cls, **kwargs) -> "LivePolicy":
        endpoint = os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise TransportError(f"{ENDPOINT_ENV} is not set")
        return cls(endpoint, os.environ.get(KEY_ENV), **kwargs)

    def _payload(self, request: ModelRequest) -> dict:
        messages = [{"role": "system", "content": request.system_context}]
        for i, msg in enumerate(request.transcript):
            content: Any = msg.get("content", "")
            if request.images and i == len(request.transcript) - 1:
                content = [{"type": "text", "text": content}] + [
                    {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{img}"}}
                    for img in request.images
                ]
            messages.append({"role": msg.get("role", "user"), "content": content})
        payload = {"messages": messages, **self.options}
        if self.model:
            payload["model"] = self.model
        return payload

    def complete(self, request: ModelRequest) -> ModelResponse:
        import httpx

        with self._id_lock:
            corr = f"live-{next(self._ids)}"
        try:
            reply = self._client.post(self.endpoint, json=self._payload(request), headers={"X-Correlation-Id": corr})
            reply.raise_for_status()
            body = reply.json()
            content = body["choices"][0]["message"]["content"] or ""
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransportError(f"model call failed: {exc}") from exc
        raw = body.get("usage") or {}
        p, c = int(raw.get("prompt_tokens", 0)), int(raw.get("completion_tokens", 0))
        usage = Usage(p, c, self.prices.cost(p, c))
        return ModelResponse(content, usage, _try_parse(request, content), corr)


def match_key(request: ModelRequest, width: int = 60) -> str:
    """A short substring of the request that a replayed request will contain."""
    if request.transcript:
        text = request.transcript[-1].get("content", "")
    else:
        text = request.system_context
    return text.strip()[:width]


def record_session(exchanges: Iterable[tuple[ModelRequest, ModelResponse]], path: str | Path) -> Path:
    """Write request/response pairs as a replayable script file."""
    entries = [
        ScriptEntry(req.agent, req.decision_point, match_key(req), resp.content, resp.usage)
        for req, resp in exchanges
    ]
    try:
        return write_script(entries, path)
    except OSError as exc:
        raise TransportError(f"cannot write script {path}: {exc}") from exc


class RecordingPolicy:
    """Forwards to ``inner`` and appends every exchange to a script file."""

    def __init__(self, inner: PolicyBackend, path: str | Path):
        self.inner = inner
        self.path = Path(path)
        self.path.write_text("", encoding="utf-8")
        self._lock = threading.Lock()

    def complete(self, request: ModelRequest) -> ModelResponse:
        response = self.inner.complete(request)
        entry = ScriptEntry(request.agent, request.decision_point, match_key(request), response.content, response.usage)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry.to_record(), sort_keys=True) + "\n")
        return response


def accumulate_usage(items: Iterable[Any]) -> tuple[int, int, float]:
    """Component-wise usage totals over trace steps, responses or raw records."""
    prompt = completion = 0
    costs = []
    for item in items:
        usage = item.get("usage") if isinstance(item, dict) else getattr(item, "usage", item)
        if usage is None:
            continue
        if isinstance(usage, dict):
            usage = Usage.from_record(usage)
        prompt += usage.prompt_tokens
        completion += usage.completion_tokens
        costs.append(usage.cost)
    return prompt, completion, math.fsum(costs)
