"""Calendar helpers: month arithmetic, clamped charge days, US holiday table."""

from __future__ import annotations

import calendar
from datetime import date, timedelta
from functools import lru_cache

WEEKDAYS = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")


def month_length(year: int, month: int) -> int:
    return calendar.monthrange(year, month)[1]


def add_months(year: int, month: int, n: int) -> tuple[int, int]:
    idx = year * 12 + (month - 1) + n
    return idx // 12, idx % 12 + 1


def clamped_day(year: int, month: int, day: int) -> date:
    """``day`` of the given month, clamped to the month's last day (29-31 -> Feb 28/29)."""
    return date(year, month, min(day, month_length(year, month)))


def month_start(d: date) -> date:
    return d.replace(day=1)


def month_end(d: date) -> date:
    return d.replace(day=month_length(d.year, d.month))


def is_month_end(d: date) -> bool:
    return d.day == month_length(d.year, d.month)


def shift_months(d: date, n: int) -> date:
    y, m = add_months(d.year, d.month, n)
    return clamped_day(y, m, d.day)


def _nth_weekday(year: int, month: int, weekday: int, n: int) -> date:
    first = date(year, month, 1)
    offset = (weekday - first.weekday()) % 7
    return first + timedelta(days=offset + 7 * (n - 1))


def _last_weekday(year: int, month: int, weekday: int) -> date:
    last = date(year, month, month_length(year, month))
    return last - timedelta(days=(last.weekday() - weekday) % 7)


@lru_cache(maxsize=None)
def holidays_for_year(year: int) -> dict[date, str]:
    """US federal holidays (unobserved dates) plus Christmas Eve and New Year's Eve."""
    return {
        date(year, 1, 1): "New Year's Day",
        _nth_weekday(year, 1, 0, 3): "Martin Luther King Jr. Day",
        _nth_weekday(year, 2, 0, 3): "Presidents' Day",
        _last_weekday(year, 5, 0): "Memorial Day",
        date(year, 6, 19): "Juneteenth",
        date(year, 7, 4): "Independence Day",
        _nth_weekday(year, 9, 0, 1): "Labor Day",
        _nth_weekday(year, 10, 0, 2): "Columbus Day",
        date(year, 11, 11): "Veterans Day",
        _nth_weekday(year, 11, 3, 4): "Thanksgiving",
        date(year, 12, 24): "Christmas Eve",
        date(year, 12, 25): "Christmas",
        date(year, 12, 31): "New Year's Eve",
    }


def holiday_name(d: date) -> str | None:
    return holidays_for_year(d.year).get(d)


def is_holiday(d: date) -> bool:
    return d in holidays_for_year(d.year)


def daterange(start: date, stop: date):
    """Dates in ``[start, stop)``."""
    d = start
    while d < stop:
        yield d
        d += timedelta(days=1)
