"""Decimal rounding shared by the report writers."""

from __future__ import annotations

from decimal import ROUND_HALF_EVEN, Decimal, localcontext
from fractions import Fraction


def to_decimal(value) -> Decimal:
    if isinstance(value, Fraction):
        with localcontext() as ctx:
            ctx.prec = 50
            return Decimal(value.numerator) / Decimal(value.denominator)
    if isinstance(value, float):
        # repr gives the shortest string that round-trips, i.e. the value as printed
        return Decimal(repr(value))
    return Decimal(value)


def round_decimal(value, places: int = 1) -> Decimal:
    """Round half-to-even at ``places`` decimals, working from the exact value."""
    quantum = Decimal(1).scaleb(-places)
    return to_decimal(value).quantize(quantum, rounding=ROUND_HALF_EVEN)


def fixed(value, places: int = 1) -> str:
    return f"{round_decimal(value, places):.{places}f}"
