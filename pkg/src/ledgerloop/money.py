"""Integer-cent money helpers.

All ledger state is held in signed integer cents. Floats only appear at the
edges (gaussian bill draws, interest) and are converted exactly once with
half-up rounding.
"""

from __future__ import annotations

from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from fractions import Fraction

CENT = Decimal("0.01")


class MoneyFormatError(ValueError):
    pass


def to_cents(value: str | int | float | Decimal) -> int:
    """Parse a decimal dollar amount into cents, rounding half-up to the cent.

    Strings are parsed as decimals, never through float. Floats go through
    ``repr`` so ``15.49`` becomes 1549 rather than 1548.
    """
    if isinstance(value, bool):
        raise MoneyFormatError(f"not a money amount: {value!r}")
    if isinstance(value, int):
        return value * 100
    if isinstance(value, float):
        value = repr(value)
    try:
        d = Decimal(str(value).strip())
    except InvalidOperation as exc:
        raise MoneyFormatError(f"not a money amount: {value!r}") from exc
    if not d.is_finite():
        raise MoneyFormatError(f"not a money amount: {value!r}")
    return int((d * 100).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def round_half_up(x: Fraction | Decimal | float) -> int:
    """Round a cent-denominated quantity to an integer, ties away from zero."""
    if isinstance(x, float):
        x = Decimal(repr(x))
    if isinstance(x, Fraction):
        x = Decimal(x.numerator) / Decimal(x.denominator)
    return int(Decimal(x).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def percent_of(cents: int, rate: str | float | Decimal) -> int:
    """``rate * cents`` rounded half-up; ``rate`` is a fraction (0.02 == 2%)."""
    r = Decimal(repr(rate)) if isinstance(rate, float) else Decimal(str(rate))
    return round_half_up(r * cents)


def format_cents(cents: int) -> str:
    """Signed decimal string with exactly two places, e.g. ``-60.00``."""
    sign = "-" if cents < 0 else ""
    q, r = divmod(abs(cents), 100)
    return f"{sign}{q}.{r:02d}"


def format_dollars(cents: int) -> str:
    """Human display form used in prompts: ``$1,234.56`` / ``-$3.50``."""
    sign = "-" if cents < 0 else ""
    q, r = divmod(abs(cents), 100)
    return f"{sign}${q:,}.{r:02d}"


def cents_to_float(cents: int) -> float:
    return float(Decimal(cents) / 100)
