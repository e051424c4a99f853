"""Exception hierarchy shared across the package.

Every failure named in a module contract has a class here so callers can catch
precisely. Groupings follow the subsystem that raises them.
"""

from __future__ import annotations


class NeuroAgentError(Exception):
    """Base class for all package errors."""


# -- primitive registry -------------------------------------------------------

class CardError(NeuroAgentError):
    pass


class MissingField(CardError):
    def __init__(self, field: str):
        super().__init__(f"card is missing required field {field!r}")
        self.field = field


class InvalidName(CardError):
    pass


class EmptySchema(CardError):
    pass


class DuplicateName(CardError):
    def __init__(self, name: str):
        super().__init__(f"duplicate primitive name {name!r}")
        self.name = name


class ParseError(NeuroAgentError):
    def __init__(self, path, reason: str = ""):
        msg = f"cannot parse {path}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.path = path


class NotFound(NeuroAgentError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


# -- JIT selection / policy ---------------------------------------------------

class UnknownName(NeuroAgentError):
    def __init__(self, names):
        names = sorted(set(names))
        super().__init__(f"unknown primitive name(s): {', '.join(names)}")
        self.names = names


class PolicyFailure(NeuroAgentError):
    pass


class ScriptExhausted(PolicyFailure):
    pass


class ScriptMismatch(PolicyFailure):
    def __init__(self, expected, got):
        super().__init__(f"script expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class TransportError(PolicyFailure):
    pass


# -- agent runtime -------------------------------------------------------------

class BudgetExhausted(NeuroAgentError):
    def __init__(self, reason, result=None):
        super().__init__(f"budget exhausted: {reason}")
        self.reason = reason
        self.result = result


class RoutingViolation(NeuroAgentError):
    pass


class FanoutViolation(NeuroAgentError):
    pass


class DisallowedAction(NeuroAgentError):
    def __init__(self, role, action: str):
        super().__init__(f"DisallowedAction: {role} may not perform {action!r}")
        self.role = role
        self.action = action


class WorkspaceViolation(NeuroAgentError):
    pass


class ConfigError(NeuroAgentError):
    pass


# -- sandbox ------------------------------------------------------------------

class UndeclaredPrimitive(NeuroAgentError):
    def __init__(self, name: str):
        super().__init__(f"UndeclaredPrimitive: {name!r} was not selected for this instruction")
        self.name = name


class EmptyProgram(NeuroAgentError):
    pass


class SandboxTimeout(NeuroAgentError):
    pass


class OutputOverflow(NeuroAgentError):
    pass


class SpawnFailure(NeuroAgentError):
    pass


class ExecutorUnavailable(NeuroAgentError):
    pass


class SubjectsFileMissing(NeuroAgentError):
    pass


class SampleTooLarge(NeuroAgentError):
    pass


# -- QC -------------------------------------------------------------------------

class DimMismatch(NeuroAgentError):
    pass


class BothEmpty(NeuroAgentError):
    pass


class DegenerateEntropy(NeuroAgentError):
    pass


class ZeroVariance(NeuroAgentError):
    pass


class LabelAbsent(NeuroAgentError):
    pass


class NoSubjectColumn(NeuroAgentError):
    pass


class TooFewValues(NeuroAgentError):
    pass


class MalformedJudgeOutput(NeuroAgentError):
    pass


class TurnLimitWithoutVerdict(NeuroAgentError):
    pass


class NoSteps(NeuroAgentError):
    pass


# -- agreement ------------------------------------------------------------------

class LengthMismatch(NeuroAgentError):
    pass


class Empty(NeuroAgentError):
    pass


# -- trace ledger -----------------------------------------------------------------

class IndexGap(NeuroAgentError):
    pass


class ImmutabilityViolation(NeuroAgentError):
    pass


class Unclassifiable(NeuroAgentError):
    pass


class LedgerOpen(NeuroAgentError):
    pass


class CorruptLedger(NeuroAgentError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"ledger line {line_no}: {reason}")
        self.line_no = line_no
