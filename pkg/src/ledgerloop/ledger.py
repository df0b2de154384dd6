"""Per-user ledger state and its deterministic transitions.

Every amount is an integer number of cents. The two accounting identities
hold exactly across every accepted event::

    cash'    = cash + income - payment
    balance' = balance + spending - payment + interest + fees

and ``0 <= balance <= limit`` after each one. Purchases and scheduled
charges land on the credit card; payments move money from checking cash to
the card. Engine-initiated payments (over-limit cures) may overdraw cash,
which is how users become illiquid.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from typing import Any

from .config import EngineConfig
from .dates import clamped_day
from .money import format_dollars, percent_of, round_half_up
from .persona import FinancialProfile, ScheduledCharge

KINDS = (
    "purchase",
    "payment",
    "subscription_charge",
    "recurring_bill",
    "interest",
    "fee",
    "income_deposit",
    "cancel_subscription",
)
CHARGE_KINDS = frozenset({"purchase", "subscription_charge", "recurring_bill", "interest", "fee"})
SPENDING_KINDS = frozenset({"purchase", "subscription_charge", "recurring_bill"})
SCHEDULED_KINDS = frozenset({"subscription_charge", "recurring_bill"})
# Kinds written to the public event stream; income and cancels stay in the audit log.
EXPORT_KINDS = CHARGE_KINDS | {"payment"}

PAYMENT_MERCHANT = ("Credit Card Payment", "payment")
INCOME_MERCHANT = ("Payroll Direct Deposit", "income")

_CATEGORY_BY_TYPE = {
    "grocery": "grocery",
    "supermarket": "grocery",
    "grocery_store": "grocery",
    "gas_station": "fuel",
    "fuel": "fuel",
    "gas": "fuel",
}

# Which rule owns each ledger-level violation code.
CODE_OWNER = {
    "INSUFFICIENT_CASH": "cash_conservation",
    "INCOME_NOT_PROPOSABLE": "cash_conservation",
    "CREDIT_LIMIT_EXCEEDED": "credit_balance",
    "OVERPAYMENT": "credit_balance",
    "INVALID_AMOUNT": "credit_balance",
    "DATE_MISMATCH": "credit_balance",
    "TERMINATED": "credit_balance",
    "PROGRAM_SCHEDULED_KIND": "subscription_carryover",
    "SCHEDULE_MISMATCH": "subscription_carryover",
    "UNKNOWN_SUBSCRIPTION": "subscription_carryover",
}


class ContractViolation(RuntimeError):
    """apply_event was handed an event that check_event rejects (an engine bug)."""


def event_category(merchant_type: str) -> str | None:
    return _CATEGORY_BY_TYPE.get(merchant_type.lower())


@dataclass(frozen=True)
class Violation:
    rule_id: str
    code: str
    message: str
    offending_event_index: int | None = None
    suggested_remedy: str | None = None
    data: tuple[tuple[str, Any], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "code": self.code,
            "message": self.message,
            "offending_event_index": self.offending_event_index,
            "suggested_remedy": self.suggested_remedy,
            "data": dict(self.data),
        }

    def get(self, key: str, default=None):
        return dict(self.data).get(key, default)


@dataclass(frozen=True)
class TransactionEvent:
    timestamp: datetime
    merchant_name: str
    merchant_type: str
    card_present_or_not: bool
    amount: int
    kind: str
    seq: int | None = None
    origin: str = "plan"
    ref: str | None = None

    @property
    def date(self) -> date:
        return self.timestamp.date()

    def with_seq(self, seq: int) -> "TransactionEvent":
        return dataclasses.replace(self, seq=seq)

    def to_dict(self) -> dict[str, Any]:
        return {
            "timestamp": self.timestamp.strftime("%Y-%m-%dT%H:%M:00Z"),
            "merchant_name": self.merchant_name,
            "merchant_type": self.merchant_type,
            "card_present_or_not": self.card_present_or_not,
            "amount": self.amount,
            "kind": self.kind,
            "seq": self.seq,
            "origin": self.origin,
            "ref": self.ref,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TransactionEvent":
        return cls(
            timestamp=parse_timestamp(d["timestamp"]),
            merchant_name=d["merchant_name"],
            merchant_type=d["merchant_type"],
            card_present_or_not=bool(d["card_present_or_not"]),
            amount=int(d["amount"]),
            kind=d["kind"],
            seq=d.get("seq"),
            origin=d.get("origin", "plan"),
            ref=d.get("ref"),
        )


def parse_timestamp(s: str) -> datetime:
    return datetime.strptime(s.rstrip("Z")[:16], "%Y-%m-%dT%H:%M")


def at(d: date, hh: int, mm: int = 0) -> datetime:
    return datetime.combine(d, time(hh, mm))


@dataclass(frozen=True)
class ScheduleEntry:
    schedule_id: str
    kind: str  # "subscription" | "bill"
    charge: ScheduledCharge
    month_index: int  # year*12 + month-1 of the next charge

    @property
    def next_date(self) -> date:
        y, m = divmod(self.month_index, 12)
        return clamped_day(y, m + 1, self.charge.date_to_charge)

    def advanced(self) -> "ScheduleEntry":
        return dataclasses.replace(self, month_index=self.month_index + self.charge.charge_frequency_month)

    def to_dict(self) -> dict[str, Any]:
        c = self.charge
        return {
            "schedule_id": self.schedule_id,
            "kind": self.kind,
            "month_index": self.month_index,
            "date_to_charge": c.date_to_charge,
            "amount": c.amount,
            "charge_frequency_month": c.charge_frequency_month,
            "std": c.std,
            "merchant_name": c.merchant_name,
            "product_description": c.product_description,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScheduleEntry":
        c = ScheduledCharge(d["date_to_charge"], d["amount"], d["charge_frequency_month"], d["std"],
                            d["merchant_name"], d["product_description"])
        return cls(d["schedule_id"], d["kind"], c, d["month_index"])


def first_month_index(start: date, day: int) -> int:
    idx = start.year * 12 + start.month - 1
    if clamped_day(start.year, start.month, day) < start:
        idx += 1
    return idx


def schedule_dates(charge: ScheduledCharge, start: date, stop: date) -> list[date]:
    """Charge dates in ``[start, stop)`` enumerated month by month."""
    out = []
    idx = first_month_index(start, charge.date_to_charge)
    while True:
        y, m = divmod(idx, 12)
        d = clamped_day(y, m + 1, charge.date_to_charge)
        if d >= stop:
            return out
        out.append(d)
        idx += charge.charge_frequency_month


def next_pay_date(after: date, pay_days: tuple[int, ...], inclusive: bool) -> date:
    d = after if inclusive else after + timedelta(days=1)
    for _ in range(62):
        if d.day in pay_days:
            return d
        d += timedelta(days=1)
    raise ValueError("no pay day within two months")


@dataclass
class LedgerState:
    cash: int
    credit_balance: int
    credit_limit: int
    current_date: date
    paycheck: int
    pay_days: tuple[int, ...]
    next_income_date: date
    schedules: tuple[ScheduleEntry, ...] = ()
    statement_amount: int = 0
    statement_balance_due: int = 0
    min_payment_due: int = 0
    due_date: date | None = None
    paid_by_due: int = 0
    last_purchase_dates: dict[str, date] = field(default_factory=dict)
    accrued_interest_this_cycle: int = 0
    accrued_fees_this_cycle: int = 0
    terminated_illiquid: bool = False
    day_spending: int = 0
    day_payment: int = 0
    day_income: int = 0
    day_interest: int = 0
    day_fees: int = 0
    next_seq: int = 0

    @property
    def available_credit(self) -> int:
        return self.credit_limit - self.credit_balance

    def copy(self) -> "LedgerState":
        return dataclasses.replace(self, last_purchase_dates=dict(self.last_purchase_dates))

    def schedule(self, ref: str) -> ScheduleEntry | None:
        for s in self.schedules:
            if s.schedule_id == ref:
                return s
        return None

    def active_subscription(self, ref: str | None, merchant_name: str) -> ScheduleEntry | None:
        for s in self.schedules:
            if s.kind != "subscription":
                continue
            if (ref is not None and s.schedule_id == ref) or (ref is None and s.charge.merchant_name == merchant_name):
                return s
        return None

    def next_income_dates(self, until: date) -> list[date]:
        out, d = [], self.next_income_date
        while d < until:
            out.append(d)
            d = next_pay_date(d, self.pay_days, inclusive=False)
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "cash": self.cash,
            "credit_balance": self.credit_balance,
            "credit_limit": self.credit_limit,
            "current_date": self.current_date.isoformat(),
            "paycheck": self.paycheck,
            "pay_days": list(self.pay_days),
            "next_income_date": self.next_income_date.isoformat(),
            "schedules": [s.to_dict() for s in self.schedules],
            "statement_amount": self.statement_amount,
            "statement_balance_due": self.statement_balance_due,
            "min_payment_due": self.min_payment_due,
            "due_date": self.due_date.isoformat() if self.due_date else None,
            "paid_by_due": self.paid_by_due,
            "last_purchase_dates": {k: v.isoformat() for k, v in sorted(self.last_purchase_dates.items())},
            "accrued_interest_this_cycle": self.accrued_interest_this_cycle,
            "accrued_fees_this_cycle": self.accrued_fees_this_cycle,
            "terminated_illiquid": self.terminated_illiquid,
            "day_spending": self.day_spending,
            "day_payment": self.day_payment,
            "day_income": self.day_income,
            "day_interest": self.day_interest,
            "day_fees": self.day_fees,
            "next_seq": self.next_seq,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LedgerState":
        d = dict(d)
        d["current_date"] = date.fromisoformat(d["current_date"])
        d["next_income_date"] = date.fromisoformat(d["next_income_date"])
        d["due_date"] = date.fromisoformat(d["due_date"]) if d["due_date"] else None
        d["pay_days"] = tuple(d["pay_days"])
        d["schedules"] = tuple(ScheduleEntry.from_dict(s) for s in d["schedules"])
        d["last_purchase_dates"] = {k: date.fromisoformat(v) for k, v in d["last_purchase_dates"].items()}
        return cls(**d)


def canonical_bytes(state: LedgerState) -> bytes:
    return json.dumps(state.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def state_hash(state: LedgerState) -> str:
    """64-bit hash of the canonical snapshot, hex encoded."""
    return hashlib.blake2b(canonical_bytes(state), digest_size=8).hexdigest()


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------


def paycheck_for(profile: FinancialProfile, config: EngineConfig) -> int:
    return round_half_up(config.paychecks[profile.income_level] * config.income_scale)


def init_state(profile: FinancialProfile, start_date: date, config: EngineConfig) -> LedgerState:
    paycheck = paycheck_for(profile, config)
    schedules = []
    for i, c in enumerate(profile.subscriptions):
        schedules.append(ScheduleEntry(f"sub:{i}", "subscription", c, first_month_index(start_date, c.date_to_charge)))
    for i, c in enumerate(profile.recurring_variable_bills):
        schedules.append(ScheduleEntry(f"bill:{i}", "bill", c, first_month_index(start_date, c.date_to_charge)))
    return LedgerState(
        cash=round_half_up(paycheck * config.starting_cash_multiple),
        credit_balance=0,
        credit_limit=round_half_up(profile.credit_limit * 100 * config.credit_limit_scale),
        current_date=start_date,
        paycheck=paycheck,
        pay_days=tuple(config.pay_days),
        next_income_date=next_pay_date(start_date, tuple(config.pay_days), inclusive=True),
        schedules=tuple(schedules),
    )


# --------------------------------------------------------------------------
# checks and transitions
# --------------------------------------------------------------------------


def _v(code: str, message: str, remedy: str | None = None, **data) -> Violation:
    return Violation(CODE_OWNER[code], code, message, None, remedy, tuple(sorted(data.items())))


def check_event(state: LedgerState, event: TransactionEvent) -> list[Violation]:
    """Every ledger-level constraint ``event`` would break if applied to ``state``."""
    out: list[Violation] = []
    amt, kind = event.amount, event.kind
    if state.terminated_illiquid:
        out.append(_v("TERMINATED", "user is terminated as illiquid; no further events are accepted"))
    if event.date != state.current_date:
        out.append(_v("DATE_MISMATCH", f"event dated {event.date} but the ledger is on {state.current_date}",
                      f"Date every transaction {state.current_date.isoformat()}."))
    if kind not in KINDS:
        out.append(_v("INVALID_AMOUNT", f"unknown event kind {kind!r}"))
        return out
    if (kind in CHARGE_KINDS and amt <= 0) or (kind == "payment" and amt >= 0) or \
            (kind == "income_deposit" and amt <= 0) or (kind == "cancel_subscription" and amt != 0):
        out.append(_v("INVALID_AMOUNT", f"amount {amt} has the wrong sign for kind {kind}"))
        return out
    if kind in CHARGE_KINDS and state.credit_balance + amt > state.credit_limit:
        out.append(_v(
            "CREDIT_LIMIT_EXCEEDED",
            f"{event.merchant_name} charge of {format_dollars(amt)} would raise the balance to "
            f"{format_dollars(state.credit_balance + amt)}, above the {format_dollars(state.credit_limit)} limit",
            f"Keep today's card charges within the available credit of {format_dollars(state.available_credit)}.",
            available_credit=state.available_credit,
        ))
    if kind == "payment":
        p = -amt
        if p > state.credit_balance:
            out.append(_v(
                "OVERPAYMENT",
                f"payment of {format_dollars(p)} exceeds the current balance of {format_dollars(state.credit_balance)}",
                f"Make the credit card payment at most {format_dollars(state.credit_balance)} (the current balance).",
                max_payment=state.credit_balance,
            ))
        if event.origin == "plan" and p > state.cash:
            out.append(_v(
                "INSUFFICIENT_CASH",
                f"payment of {format_dollars(p)} exceeds checking cash of {format_dollars(state.cash)}",
                f"Pay no more than the {format_dollars(max(state.cash, 0))} available in checking.",
                max_payment=max(state.cash, 0),
            ))
    if kind == "income_deposit" and event.origin == "plan":
        out.append(_v("INCOME_NOT_PROPOSABLE", "income is posted by the payroll schedule, not by the daily plan",
                      "Remove income deposits from the plan; paychecks arrive automatically."))
    if kind in SCHEDULED_KINDS:
        if event.origin == "plan":
            out.append(_v("PROGRAM_SCHEDULED_KIND",
                          f"{event.merchant_name} is a scheduled charge and is posted by the program",
                          f"Do not include {event.merchant_name}; scheduled charges are applied automatically.",
                          merchant_name=event.merchant_name))
        else:
            s = state.schedule(event.ref) if event.ref else None
            if s is None or s.next_date != state.current_date or s.charge.merchant_name != event.merchant_name:
                out.append(_v("SCHEDULE_MISMATCH", f"no schedule {event.ref!r} due on {state.current_date}"))
    if kind == "cancel_subscription" and state.active_subscription(event.ref, event.merchant_name) is None:
        out.append(_v("UNKNOWN_SUBSCRIPTION", f"no active subscription named {event.merchant_name!r} to cancel",
                      "Only cancel subscriptions that are currently active.", merchant_name=event.merchant_name))
    return out


def apply_event(state: LedgerState, event: TransactionEvent) -> LedgerState:
    """Return the successor state; ``state`` is not modified."""
    problems = check_event(state, event)
    if problems:
        raise ContractViolation(f"apply_event on a violating event: {[v.code for v in problems]}")
    if event.seq is not None and event.seq != state.next_seq:
        raise ContractViolation(f"event seq {event.seq} != expected {state.next_seq}")
    s = state.copy()
    s.next_seq += 1
    amt, kind = event.amount, event.kind
    if kind in CHARGE_KINDS:
        s.credit_balance += amt
        if kind == "interest":
            s.day_interest += amt
            s.accrued_interest_this_cycle += amt
        elif kind == "fee":
            s.day_fees += amt
            s.accrued_fees_this_cycle += amt
        else:
            s.day_spending += amt
        if kind in SCHEDULED_KINDS:
            s.schedules = tuple(x.advanced() if x.schedule_id == event.ref else x for x in s.schedules)
        cat = event_category(event.merchant_type)
        if kind == "purchase" and cat is not None:
            s.last_purchase_dates[cat] = event.date
    elif kind == "payment":
        p = -amt
        s.cash -= p
        s.credit_balance -= p
        s.day_payment += p
        s.statement_balance_due = max(0, s.statement_balance_due - p)
        if s.due_date is not None and s.current_date <= s.due_date:
            s.paid_by_due += p
    elif kind == "income_deposit":
        s.cash += amt
        s.day_income += amt
        if event.date >= s.next_income_date:
            s.next_income_date = next_pay_date(event.date, s.pay_days, inclusive=False)
    elif kind == "cancel_subscription":
        target = state.active_subscription(event.ref, event.merchant_name)
        s.schedules = tuple(x for x in s.schedules if x.schedule_id != target.schedule_id)
    return s


def advance_day(state: LedgerState, new_date: date | None = None) -> LedgerState:
    new_date = new_date or state.current_date + timedelta(days=1)
    if new_date != state.current_date + timedelta(days=1):
        raise ContractViolation(f"cannot advance from {state.current_date} to {new_date}")
    s = state.copy()
    s.current_date = new_date
    s.day_spending = s.day_payment = s.day_income = s.day_interest = s.day_fees = 0
    return s


def terminate(state: LedgerState) -> LedgerState:
    s = state.copy()
    s.terminated_illiquid = True
    return s


def credit_room_payment(state: LedgerState, amount: int, ts: datetime) -> TransactionEvent | None:
    """Engine-initiated payment that makes room on the card for a mandatory charge.

    Drawn from checking even if that overdraws it.
    """
    excess = state.credit_balance + amount - state.credit_limit
    if excess <= 0:
        return None
    return TransactionEvent(ts, *PAYMENT_MERCHANT, False, -excess, "payment", origin="engine", ref="credit_room")


def _post(state: LedgerState, ev: TransactionEvent, out: list[TransactionEvent]) -> LedgerState:
    ev = ev.with_seq(state.next_seq)
    out.append(ev)
    return apply_event(state, ev)


def _post_charge(state: LedgerState, ev: TransactionEvent, out: list[TransactionEvent]) -> LedgerState:
    room = credit_room_payment(state, ev.amount, ev.timestamp)
    if room is not None:
        state = _post(state, room, out)
    return _post(state, ev, out)


def sample_bill_amount(charge: ScheduledCharge, rng, limit: int) -> int:
    z = float(rng.standard_normal())
    cents = round_half_up(charge.amount + charge.std * z) if charge.std else charge.amount
    return min(max(1, cents), limit)


def post_scheduled_items(state: LedgerState, day: date, rng, *, schedules: bool = True) -> tuple[LedgerState, list[TransactionEvent]]:
    """Post today's paycheck, subscription charges, and bills, in that order.

    With ``schedules=False`` only the paycheck posts.
    """
    if day != state.current_date:
        raise ContractViolation(f"post_scheduled_items for {day} on a ledger at {state.current_date}")
    out: list[TransactionEvent] = []
    if day == state.next_income_date:
        state = _post(state, TransactionEvent(at(day, 3, 0), *INCOME_MERCHANT, False, state.paycheck,
                                              "income_deposit", origin="engine", ref="payroll"), out)
    minute = 1
    for kind in ("subscription", "bill") if schedules else ():
        for entry in [s for s in state.schedules if s.kind == kind and s.next_date == day]:
            c = entry.charge
            if kind == "subscription":
                amount, ev_kind = c.amount, "subscription_charge"
            else:
                amount, ev_kind = sample_bill_amount(c, rng, state.credit_limit), "recurring_bill"
            ev = TransactionEvent(at(day, 3, minute), c.merchant_name, _schedule_type(c), False, amount, ev_kind,
                                  origin="engine", ref=entry.schedule_id)
            state = _post_charge(state, ev, out)
            minute += 1
    return state, out


def _schedule_type(c: ScheduledCharge) -> str:
    return c.product_description.lower().replace("'", "").replace(" ", "_") or "subscription"


def statement_charges(state: LedgerState, day: date, config: EngineConfig) -> list[TransactionEvent]:
    """Late fee and interest owed on the prior statement, as unposted events."""
    if state.statement_amount <= 0 or state.paid_by_due >= state.statement_amount:
        return []
    carried = state.statement_amount - state.paid_by_due
    out = []
    if state.paid_by_due < state.min_payment_due:
        out.append(TransactionEvent(at(day, 23, 58), "Late Payment Fee", "fee", False, config.late_fee, "fee",
                                    origin="engine", ref="late_fee"))
    interest = max(1, percent_of(carried, config.monthly_interest_rate))
    out.append(TransactionEvent(at(day, 23, 59), "Interest Charge", "interest", False, interest, "interest",
                                origin="engine", ref="interest"))
    return out


def roll_statement(state: LedgerState, day: date, grace_days: int, min_fraction: float) -> LedgerState:
    s = state.copy()
    bal = s.credit_balance
    s.statement_amount = bal
    s.statement_balance_due = bal
    s.min_payment_due = minimum_payment(bal, min_fraction)
    s.due_date = day + timedelta(days=grace_days)
    s.paid_by_due = 0
    s.accrued_interest_this_cycle = 0
    s.accrued_fees_this_cycle = 0
    return s


def minimum_payment(statement: int, min_fraction: float) -> int:
    return min(statement, max(1, percent_of(statement, min_fraction))) if statement > 0 else 0


def close_statement(state: LedgerState, day: date, config: EngineConfig) -> tuple[LedgerState, list[TransactionEvent]]:
    """Charge fee/interest on an unpaid prior statement, then open a new statement."""
    out: list[TransactionEvent] = []
    for ev in statement_charges(state, day, config):
        state = _post_charge(state, ev, out)
    return roll_statement(state, day, config.grace_days, config.min_payment_fraction), out


def with_room(state: LedgerState, ev: TransactionEvent) -> list[TransactionEvent]:
    """``ev`` preceded by the credit-room payment it needs, if any."""
    room = credit_room_payment(state, ev.amount, ev.timestamp) if ev.kind in CHARGE_KINDS else None
    return [room, ev] if room else [ev]


def scheduled_outflows(state: LedgerState, start: date, stop: date) -> int:
    """Expected scheduled charges (subscriptions and mean bill amounts) dated in ``[start, stop)``."""
    total = 0
    for entry in state.schedules:
        idx = entry.month_index
        while True:
            y, m = divmod(idx, 12)
            d = clamped_day(y, m + 1, entry.charge.date_to_charge)
            if d >= stop:
                break
            if d >= start:
                total += entry.charge.amount
            idx += entry.charge.charge_frequency_month
    return total


def month_index(d: date) -> int:
    return d.year * 12 + d.month - 1


def months_between(a: date, b: date) -> int:
    return month_index(b) - month_index(a)

