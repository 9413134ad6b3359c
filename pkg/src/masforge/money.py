"""Exact currency arithmetic in integer micro-units.

All costs in the engine are integer counts of one-millionth of a currency
unit, so sums and comparisons are exact. Reward math divides costs and is
done with ``fractions.Fraction`` downstream; nothing here ever touches
floats.
"""

from __future__ import annotations

from decimal import Decimal, InvalidOperation

MICRO = 10**6


class CurrencyError(ValueError):
    """Raised for unrepresentable prices or amounts."""


def to_micro(value: str | int | float | Decimal) -> int:
    """Convert a currency amount to integer micro-units.

    The amount must be exactly representable at micro precision
    (six decimal places); anything finer raises CurrencyError.
    """
    try:
        dec = Decimal(str(value))
    except InvalidOperation as exc:
        raise CurrencyError(f"not a currency amount: {value!r}") from exc
    scaled = dec * MICRO
    if scaled != scaled.to_integral_value():
        raise CurrencyError(f"amount {value!r} is finer than micro precision")
    return int(scaled)


def micro_to_decimal(micro: int) -> Decimal:
    return Decimal(micro) / MICRO


def format_micro(micro: int) -> str:
    """Render micro-units as a fixed six-decimal currency string."""
    sign = "-" if micro < 0 else ""
    whole, frac = divmod(abs(micro), MICRO)
    return f"{sign}{whole}.{frac:06d}"


def _div_round_half_even(numerator: int, denominator: int) -> int:
    q, r = divmod(numerator, denominator)
    double = r * 2
    if double > denominator or (double == denominator and q % 2 == 1):
        q += 1
    return q


def exchange_cost_micro(
    prompt_tokens: int,
    completion_tokens: int,
    price_in_micro: int,
    price_out_micro: int,
) -> int:
    """Cost of one exchange, in micro-units.

    Prices are micro-units per one million tokens, so the exact cost is
    ``(p*in + c*out) / 1e6`` micro-units; the single division rounds
    half-to-even. Token counts and prices must be non-negative.
    """
    if min(prompt_tokens, completion_tokens, price_in_micro, price_out_micro) < 0:
        raise CurrencyError("token counts and prices must be non-negative")
    raw = prompt_tokens * price_in_micro + completion_tokens * price_out_micro
    return _div_round_half_even(raw, MICRO)
