"""Primitive cards and the registry that indexes them.

A card is the agent-facing description of one atomic domain operation: its
name, where to import it from, a one-line description and a free-text schema.
Cards live one per file as JSON under ``cards/<family>/<name>.json``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .errors import DuplicateName, EmptySchema, InvalidName, MissingField, NotFound, ParseError

NAME_PATTERN = re.compile(r"[a-z0-9_]+")
REQUIRED_FIELDS = ("name", "module", "description", "detailed_schema")


class Family(str, Enum):
    PROCESSING = "Processing"
    QC = "QC"
    ANALYSIS = "Analysis"

    @classmethod
    def parse(cls, value: "str | Family") -> "Family":
        if isinstance(value, Family):
            return value
        for member in cls:
            if member.value.lower() == str(value).strip().lower():
                return member
        raise ValueError(f"unknown primitive family {value!r}")


@dataclass(frozen=True)
class PrimitiveCard:
    name: str
    module: str
    description: str
    detailed_schema: str
    family: Family
    command_template: str | None = None
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def to_record(self) -> dict:
        record = dict(self.extra)
        record.update(
            name=self.name,
            module=self.module,
            description=self.description,
            detailed_schema=self.detailed_schema,
            family=self.family.value,
        )
        if self.command_template is not None:
            record["command_template"] = self.command_template
        return record


@dataclass(frozen=True)
class CompactIndexEntry:
    name: str
    description: str


def validate_card(raw: Mapping[str, Any] | PrimitiveCard, family: "Family | str | None" = None) -> PrimitiveCard:
    """Check a raw card record and return a :class:`PrimitiveCard`.

    ``family`` is the fallback used when the record carries no ``family`` key
    (the loader passes the name of the containing directory). Unknown keys are
    kept on ``extra``.
    """
    if isinstance(raw, PrimitiveCard):
        raw = raw.to_record()
    for key in ("name", "module", "description"):
        if key not in raw or raw[key] is None:
            raise MissingField(key)
    name = raw["name"]
    if not isinstance(name, str) or not NAME_PATTERN.fullmatch(name):
        raise InvalidName(f"invalid primitive name {name!r}; expected [a-z0-9_]+")
    schema = raw.get("detailed_schema")
    if not isinstance(schema, str) or not schema.strip():
        raise EmptySchema(f"card {name!r} has an empty or missing detailed_schema")
    description = raw["description"]
    if not isinstance(description, str) or not description.strip():
        raise MissingField("description")
    module = raw["module"]
    if not isinstance(module, str) or not module.strip():
        raise MissingField("module")

    fam = raw.get("family", family)
    if fam is None:
        raise MissingField("family")
    fam = Family.parse(fam)

    command = raw.get("command_template")
    if command is not None and not isinstance(command, str):
        raise ParseError(name, "command_template must be a string")
    extra = {k: v for k, v in raw.items() if k not in (*REQUIRED_FIELDS, "family", "command_template")}
    return PrimitiveCard(
        name=name,
        module=module,
        description=description,
        detailed_schema=schema,
        family=fam,
        command_template=command,
        extra=extra,
    )


class Registry:
    """Immutable, name-ordered collection of cards."""

    def __init__(self, cards: Iterable[PrimitiveCard] = ()):
        by_name: dict[str, PrimitiveCard] = {}
        for card in cards:
            if card.name in by_name:
                raise DuplicateName(card.name)
            by_name[card.name] = card
        self._cards = {name: by_name[name] for name in sorted(by_name)}

    def __len__(self) -> int:
        return len(self._cards)

    def __iter__(self) -> Iterator[PrimitiveCard]:
        return iter(self._cards.values())

    def __contains__(self, name: object) -> bool:
        return name in self._cards

    def __repr__(self) -> str:
        return f"Registry({len(self)} cards)"

    @property
    def names(self) -> list[str]:
        return list(self._cards)

    def lookup(self, name: str) -> PrimitiveCard:
        try:
            return self._cards[name]
        except KeyError:
            raise NotFound(f"no primitive named {name!r}") from None

    def subset(self, names: Iterable[str]) -> "Registry":
        return Registry(self.lookup(n) for n in set(names))


def _infer_family(path: Path) -> Family | None:
    try:
        return Family.parse(path.parent.name)
    except ValueError:
        return None


def load_registry(card_files: Iterable[str | Path]) -> Registry:
    cards = []
    for path in card_files:
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(path, str(exc)) from exc
        if not isinstance(raw, dict):
            raise ParseError(path, "card file must hold a JSON object")
        cards.append(validate_card(raw, family=_infer_family(path)))
    return Registry(cards)


def card_files(directory: str | Path) -> list[Path]:
    """All ``*.json`` card files below ``directory``, in sorted order."""
    return sorted(Path(directory).rglob("*.json"))


def load_directory(directory: str | Path) -> Registry:
    return load_registry(card_files(directory))


def default_library() -> Registry:
    """The shipped card library (processing, QC and analysis families)."""
    root = resources.files("neuroagent") / "cards"
    with resources.as_file(root) as path:
        return load_directory(path)


def write_card(card: PrimitiveCard, root: str | Path) -> Path:
    path = Path(root) / card.family.value.lower() / f"{card.name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(card.to_record(), indent=4) + "\n", encoding="utf-8")
    return path


def compact_index(registry: Registry) -> list[CompactIndexEntry]:
    return [CompactIndexEntry(card.name, card.description) for card in registry]


def list_by_family(registry: Registry, family: Family | str) -> list[PrimitiveCard]:
    family = Family.parse(family)
    return [card for card in registry if card.family is family]


def render_card(card: PrimitiveCard) -> str:
    """Full prompt rendering of one card, schema included."""
    return (
        f"### {card.name}\n"
        f"module: {card.module}\n"
        f"description: {card.description}\n"
        f"detailed_schema:\n{card.detailed_schema.rstrip()}\n"
    )


def render_index(index: Iterable[CompactIndexEntry]) -> str:
    return "".join(f"- {entry.name}: {entry.description}\n" for entry in index)
