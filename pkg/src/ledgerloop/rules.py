"""Declarative rules: each supplies ``check``, ``update`` and ``prompt_fragment``.

Invariant rules block acceptance of a plan; realism rules only shape the
next prompt (unless ``strict_cadence`` promotes cadence to blocking).
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta
from typing import Any

from . import catalog
from .dates import WEEKDAYS, holiday_name
from .ledger import (
    CHARGE_KINDS,
    SCHEDULED_KINDS,
    LedgerState,
    TransactionEvent,
    Violation,
    apply_event,
    at,
    check_event,
    event_category,
    post_scheduled_items,
    scheduled_outflows,
)
from .money import format_dollars, to_cents

INVARIANT = "invariant"
REALISM = "realism"

# Closed code sets per rule.
RULE_CODES = {
    "cash_conservation": ("INSUFFICIENT_CASH", "INCOME_NOT_PROPOSABLE"),
    "credit_balance": ("CREDIT_LIMIT_EXCEEDED", "OVERPAYMENT", "INVALID_AMOUNT", "DATE_MISMATCH", "TERMINATED"),
    "due_date": ("DUE_PAYMENT_MISSING",),
    "subscription_carryover": ("PROGRAM_SCHEDULED_KIND", "SCHEDULE_MISMATCH", "UNKNOWN_SUBSCRIPTION"),
    "liquidity": ("LIQUIDITY",),
    "temporal_cadence": ("CADENCE_GROCERY", "CADENCE_FUEL", "FUEL_WITHOUT_CAR"),
    "random_events": (),
}


class DuplicateRuleError(ValueError):
    pass


@dataclass(frozen=True)
class PromptFragment:
    rule_id: str
    kind: str  # calendar | cadence | notify | due | require | remedy
    text: str
    event: TransactionEvent | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"rule_id": self.rule_id, "kind": self.kind, "text": self.text,
                "event": self.event.to_dict() if self.event else None}


@dataclass(frozen=True)
class RuleContext:
    """What checks may read besides the state: the dry run of the plan and a few persona facts."""

    events: tuple[TransactionEvent, ...]
    ledger_violations: tuple[tuple[Violation, ...], ...]
    owns_car: bool = True
    params: dict[str, dict[str, Any]] = field(default_factory=dict)

    def p(self, rule_id: str, key: str, default):
        return self.params.get(rule_id, {}).get(key, default)


@dataclass
class RuleOutcome:
    violations: list[Violation] = field(default_factory=list)
    forced_events: list[TransactionEvent] = field(default_factory=list)
    fragments: list[PromptFragment] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "violations": [v.to_dict() for v in self.violations],
            "forced_events": [e.to_dict() for e in self.forced_events],
            "fragments": [f.to_dict() for f in self.fragments],
        }


def _no_update(state, day, rng, ctx):
    return []


def _no_fragments(state, day, outcome, ctx):
    return []


@dataclass(frozen=True)
class Rule:
    rule_id: str
    kind: str
    check: Callable[[LedgerState, RuleContext], list[Violation]]
    update: Callable[..., list[TransactionEvent]] = _no_update
    prompt_fragment: Callable[..., list[PromptFragment]] = _no_fragments


@dataclass(frozen=True)
class RuleRegistry:
    rules: tuple[Rule, ...] = ()

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.ordered())

    @property
    def ids(self) -> list[str]:
        return [r.rule_id for r in self.ordered()]

    def get(self, rule_id: str) -> Rule:
        for r in self.rules:
            if r.rule_id == rule_id:
                return r
        raise KeyError(rule_id)

    def ordered(self) -> tuple[Rule, ...]:
        inv = tuple(r for r in self.rules if r.kind == INVARIANT)
        return inv + tuple(r for r in self.rules if r.kind != INVARIANT)


def register_rule(registry: RuleRegistry, rule: Rule) -> RuleRegistry:
    if any(r.rule_id == rule.rule_id for r in registry.rules):
        raise DuplicateRuleError(f"rule {rule.rule_id!r} already registered")
    if rule.kind not in (INVARIANT, REALISM):
        raise ValueError(f"rule kind must be invariant or realism, got {rule.kind!r}")
    return RuleRegistry(registry.rules + (rule,))


# --------------------------------------------------------------------------
# built-in rules
# --------------------------------------------------------------------------


def _ledger_codes(rule_id: str):
    codes = set(RULE_CODES[rule_id])

    def check(state: LedgerState, ctx: RuleContext) -> list[Violation]:
        out = []
        for i, vs in enumerate(ctx.ledger_violations):
            out += [replace(v, offending_event_index=i) for v in vs if v.code in codes]
        return out

    return check


def _due_check(state: LedgerState, ctx: RuleContext) -> list[Violation]:
    if state.due_date != state.current_date:
        return []
    remaining = state.min_payment_due - state.paid_by_due
    if remaining <= 0 or state.cash < remaining:
        return []
    paid = sum(-e.amount for e, vs in zip(ctx.events, ctx.ledger_violations) if e.kind == "payment" and not vs)
    if paid >= remaining:
        return []
    return [Violation(
        "due_date", "DUE_PAYMENT_MISSING",
        f"the statement minimum of {format_dollars(state.min_payment_due)} is due today and only "
        f"{format_dollars(state.paid_by_due + paid)} has been paid",
        None,
        f"Include a credit card payment of at least {format_dollars(remaining)} today; the minimum is due today.",
        (("min_payment", remaining),),
    )]


def _due_fragments(state: LedgerState, day: date, outcome, ctx) -> list[PromptFragment]:
    if state.due_date is None or state.statement_amount <= 0:
        return []
    remaining_min = state.min_payment_due - state.paid_by_due
    if day > state.due_date:
        if remaining_min > 0 and state.statement_balance_due > 0:
            return [PromptFragment("due_date", "due", (
                f"The payment due {state.due_date.isoformat()} was missed. A late fee and interest will post at "
                f"statement close; pay at least {format_dollars(remaining_min)} as soon as cash allows."))]
        return []
    if (state.due_date - day).days <= 5 and state.statement_balance_due > 0:
        return [PromptFragment("due_date", "due", (
            f"Statement balance {format_dollars(state.statement_balance_due)} is due {state.due_date.isoformat()} "
            f"(minimum {format_dollars(max(remaining_min, 0))})."))]
    return []


def _carryover_update(state: LedgerState, day: date, rng, ctx) -> list[TransactionEvent]:
    _, events = post_scheduled_items(state, day, rng)
    return events


def _carryover_fragments(state: LedgerState, day: date, outcome, ctx) -> list[PromptFragment]:
    if outcome is None:
        return []
    out = []
    for e in outcome.forced_events:
        if e.kind in SCHEDULED_KINDS:
            out.append(PromptFragment("subscription_carryover", "notify",
                                      f"{e.merchant_name} charged {format_dollars(e.amount)} to the card today."))
        elif e.kind == "income_deposit":
            out.append(PromptFragment("subscription_carryover", "notify",
                                      f"Paycheck of {format_dollars(e.amount)} deposited to checking today."))
        elif e.kind == "payment" and e.ref == "credit_room":
            out.append(PromptFragment("subscription_carryover", "notify",
                                      f"{format_dollars(-e.amount)} was drafted from checking to keep the card under its limit."))
    return out


def liquidity_check(state: LedgerState, window: int, planned: Sequence[TransactionEvent]) -> Violation | None:
    """Reject if outflows over the window exceed inflows + starting cash + available credit.

    Outflows are the plan's card charges plus scheduled charges due in the
    window; inflows are paychecks due after today within the window. The
    comparison is strict. The violation points at the first plan event at
    which the running outflow total crosses the line.
    """
    if window < 1:
        raise ValueError("window must be >= 1 day")
    stop = state.current_date + timedelta(days=window)
    inflows = state.paycheck * len([d for d in state.next_income_dates(stop) if d > state.current_date])
    resources = inflows + state.cash + state.available_credit
    outflow = scheduled_outflows(state, state.current_date, stop)
    for i, e in enumerate(planned):
        if e.kind not in CHARGE_KINDS:
            continue
        outflow += e.amount
        if outflow > resources:
            excess = outflow - resources
            return Violation(
                "liquidity", "LIQUIDITY",
                f"planned and scheduled outflows of {format_dollars(outflow)} over the next {window} days exceed "
                f"expected income, cash and available credit of {format_dollars(resources)}",
                i,
                f"Cut planned spending by at least {format_dollars(excess)}; funds over the next {window} days cannot cover it.",
                (("excess", excess), ("resources", resources)),
            )
    return None


def _liquidity(window_days: int):
    def check(state: LedgerState, ctx: RuleContext) -> list[Violation]:
        w = ctx.p("liquidity", "window_days", window_days)
        v = liquidity_check(state, w, ctx.events)
        return [v] if v else []

    return check


def _cadence_check(state: LedgerState, ctx: RuleContext) -> list[Violation]:
    gaps = {"grocery": ctx.p("temporal_cadence", "grocery", 3), "fuel": ctx.p("temporal_cadence", "fuel", 5)}
    last = dict(state.last_purchase_dates)
    out = []
    for i, e in enumerate(ctx.events):
        cat = event_category(e.merchant_type)
        if e.kind != "purchase" or cat is None:
            continue
        if cat == "fuel" and not ctx.owns_car:
            out.append(Violation("temporal_cadence", "FUEL_WITHOUT_CAR", f"fuel purchase at {e.merchant_name} but the user owns no car", i,
                                 "Drop fuel purchases; this user does not own a car."))
            continue
        prev = last.get(cat)
        if prev is not None and (e.date - prev).days < gaps[cat]:
            code = "CADENCE_GROCERY" if cat == "grocery" else "CADENCE_FUEL"
            days = (e.date - prev).days
            out.append(Violation(
                "temporal_cadence", code,
                f"{cat} purchase at {e.merchant_name} only {days} day(s) after the previous one",
                i,
                f"Space {cat} purchases at least {gaps[cat]} days apart (last one {prev.isoformat()}).",
                (("category", cat), ("days", days)),
            ))
        last[cat] = e.date
    return out


def _cadence_fragments(state: LedgerState, day: date, outcome, ctx) -> list[PromptFragment]:
    out = []
    for cat in sorted(state.last_purchase_dates):
        days = (day - state.last_purchase_dates[cat]).days
        out.append(PromptFragment("temporal_cadence", "cadence", f"Days since last {cat} purchase: {days}."))
    return out


def calendar_line(day: date) -> str:
    line = f"Date: {WEEKDAYS[day.weekday()]}, {day.isoformat()}."
    name = holiday_name(day)
    if name:
        line += f" Today is {name}."
    return line


def builtin_rules(params: dict[str, dict[str, Any]] | None = None) -> dict[str, Rule]:
    params = params or {}
    window = params.get("liquidity", {}).get("window_days", 30)
    return {
        "cash_conservation": Rule("cash_conservation", INVARIANT, _ledger_codes("cash_conservation")),
        "credit_balance": Rule("credit_balance", INVARIANT, _ledger_codes("credit_balance")),
        "due_date": Rule("due_date", INVARIANT, _due_check, prompt_fragment=_due_fragments),
        "subscription_carryover": Rule("subscription_carryover", INVARIANT, _ledger_codes("subscription_carryover"),
                                       update=_carryover_update, prompt_fragment=_carryover_fragments),
        "liquidity": Rule("liquidity", INVARIANT, _liquidity(window)),
        "temporal_cadence": Rule("temporal_cadence", REALISM, _cadence_check, prompt_fragment=_cadence_fragments),
        "random_events": Rule("random_events", REALISM, lambda state, ctx: []),
    }


BUILTIN_ORDER = ("cash_conservation", "credit_balance", "due_date", "subscription_carryover", "liquidity",
                 "temporal_cadence", "random_events")


def default_registry(rule_ids: Sequence[str] | None = None, params: dict[str, dict[str, Any]] | None = None) -> RuleRegistry:
    rules = builtin_rules(params)
    reg = RuleRegistry()
    for rid in rule_ids or BUILTIN_ORDER:
        if rid not in rules:
            raise KeyError(f"unknown built-in rule {rid!r}")
        reg = register_rule(reg, rules[rid])
    return reg


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def dry_run(state: LedgerState, events: Sequence[TransactionEvent]) -> tuple[tuple[Violation, ...], ...]:
    """Ledger violations per event, applying only the events that pass."""
    out = []
    s = state
    for e in events:
        vs = tuple(check_event(s, e))
        out.append(vs)
        if not vs:
            s = apply_event(s, e)
    return tuple(out)


def evaluate_plan(registry: RuleRegistry, state: LedgerState, plan, *, owns_car: bool = True,
                  params: dict[str, dict[str, Any]] | None = None) -> RuleOutcome:
    """Run every rule's check over ``plan`` applied hypothetically; never mutates ``state``."""
    events = tuple(getattr(plan, "proposed_events", plan))
    ctx = RuleContext(events, dry_run(state, events), owns_car, params or {})
    violations: list[Violation] = []
    for rule in registry:
        violations += rule.check(state, ctx)
    return RuleOutcome(violations=violations)


def blocking(registry: RuleRegistry, violations: Sequence[Violation], strict_cadence: bool = False) -> list[Violation]:
    kinds = {r.rule_id: r.kind for r in registry.rules}
    return [v for v in violations if kinds.get(v.rule_id) == INVARIANT or (strict_cadence and v.rule_id == "temporal_cadence")]


def maybe_random_event(state: LedgerState, day: date, rng, prob: float = 0.10, tags: set[str] | None = None) -> PromptFragment | None:
    """With probability ``prob``, instruct the proposer to include a large unexpected expense."""
    if rng.random() >= prob:
        return None
    tags = tags or set()
    cands = [e for e in catalog.load()["random_events"] if "*" in e["tags"] or tags & set(e["tags"])]
    ev = cands[int(rng.integers(len(cands)))]
    lo, hi = to_cents(ev["amount_low"]), to_cents(ev["amount_high"])
    amount = int(rng.integers(lo, hi + 1))
    event = TransactionEvent(at(day, 12, 0), ev["merchant_name"], ev["merchant_type"], True, amount, "purchase")
    text = (f"Unexpected expense today: {ev['description']} at {ev['merchant_name']} for {format_dollars(amount)}. "
            f"Include it in today's plan.")
    return PromptFragment("random_events", "require", text, event)


# --------------------------------------------------------------------------
# next_prompt assembly
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptSpec:
    system: str
    user: str
    fragments: tuple[PromptFragment, ...] = ()
    violations: tuple[Violation, ...] = ()

    @property
    def required_events(self) -> list[TransactionEvent]:
        return [f.event for f in self.fragments if f.kind == "require" and f.event is not None]


def state_block(state: LedgerState) -> str:
    lines = [
        "Account status:",
        f"- Checking cash: {format_dollars(state.cash)}",
        f"- Credit card balance: {format_dollars(state.credit_balance)} of {format_dollars(state.credit_limit)} limit "
        f"(available {format_dollars(state.available_credit)})",
    ]
    if state.due_date is not None and state.statement_balance_due > 0:
        lines.append(f"- Statement due: {format_dollars(state.statement_balance_due)} by {state.due_date.isoformat()} "
                     f"(minimum {format_dollars(max(state.min_payment_due - state.paid_by_due, 0))})")
    else:
        lines.append("- Statement due: nothing outstanding")
    return "\n".join(lines)


def history_block(history) -> str:
    entries = list(history.entries) if history is not None else []
    if not entries:
        return "Recent days: none yet."
    lines = ["Recent days:"]
    for day, _prompt, plan in entries:
        evs = plan.proposed_events if plan is not None else ()
        if not evs:
            lines.append(f"- {day.isoformat()}: no transactions")
            continue
        total = sum(e.amount for e in evs if e.amount > 0)
        names = ", ".join(e.merchant_name for e in evs[:6]) + (", ..." if len(evs) > 6 else "")
        lines.append(f"- {day.isoformat()}: {len(evs)} transaction(s), {format_dollars(total)} charged ({names})")
    return "\n".join(lines)


def build_next_prompt(registry: RuleRegistry, state: LedgerState, day: date, outcome: RuleOutcome | None,
                      history=None, *, system: str = "", owns_car: bool = True,
                      params: dict[str, dict[str, Any]] | None = None) -> PromptSpec:
    """Assemble the rule- and state-aware user prompt for ``day``; byte-stable for identical inputs."""
    ctx = RuleContext((), (), owns_car, params or {})
    fragments: list[PromptFragment] = []
    for rule in registry:
        fragments += rule.prompt_fragment(state, day, outcome, ctx)
    if outcome is not None:
        fragments += outcome.fragments
    violations = tuple(outcome.violations) if outcome is not None else ()
    for v in violations:
        if v.suggested_remedy:
            fragments.append(PromptFragment(v.rule_id, "remedy", v.suggested_remedy))

    blocks = [calendar_line(day), state_block(state)]
    by_kind: dict[str, list[str]] = {}
    for f in fragments:
        by_kind.setdefault(f.kind, []).append(f.text)
    headers = (("cadence", "Purchase cadence:"), ("notify", "Scheduled today:"), ("due", "Payment reminders:"),
               ("require", "Required today:"))
    for kind, header in headers:
        if by_kind.get(kind):
            blocks.append("\n".join([header] + [f"- {t}" for t in by_kind[kind]]))
    if violations:
        lines = ["Corrections needed:"]
        for v in violations:
            line = f"- [{v.code}] {v.message}."
            if v.suggested_remedy:
                line += f" {v.suggested_remedy}"
            lines.append(line)
        blocks.append("\n".join(lines))
    blocks.append(history_block(history))
    return PromptSpec(system, "\n\n".join(blocks), tuple(fragments), violations)
