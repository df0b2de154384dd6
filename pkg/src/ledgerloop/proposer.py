"""Proposal sources: the deterministic mock and the external chat backend.

Both return a :class:`DailyPlan` of draft events for the current day. The
engine never trusts a plan; it checks every draft against the rules.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from decimal import Decimal
from typing import Any

import numpy as np

from . import catalog
from .config import EngineConfig
from .dates import is_holiday
from .ledger import KINDS, SCHEDULED_KINDS, LedgerState, TransactionEvent, event_category
from .money import MoneyFormatError, format_cents, format_dollars, round_half_up, to_cents
from .persona import AugmentedPersona, persona_tags
from .rules import PromptSpec

HISTORY_DAYS = 7
PLAN_KINDS = ("purchase", "payment", "cancel_subscription", "subscription_charge", "recurring_bill",
              "income_deposit", "fee", "interest")

ARCHETYPE_SPEND = {"survivor": 0.55, "saver": 0.8, "balancer": 1.05, "comfortable": 1.35, "spender": 1.75}
ARCHETYPE_COUNT = {"survivor": 0.65, "saver": 0.82, "balancer": 1.0, "comfortable": 1.2, "spender": 1.4}
INCOME_SPEND = {"low income": 0.75, "med income": 1.0, "high income": 1.4}
WEEKDAY_COUNT = (0.95, 0.95, 0.95, 1.0, 1.15, 1.25, 0.9)
BASE_DAILY_COUNT = 1.1
NAIVE_BUDGET_RATE = 0.1
PAYDOWN_UTILIZATION = 0.6
PAYDOWN_PROB = 0.35


class ParseError(ValueError):
    """A plan response that cannot be used; ``code`` drives the reprompt text."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class PlanUnavailable(RuntimeError):
    """No usable plan today; ``permanent`` means the backend itself is gone."""

    def __init__(self, message: str, raw: str | None = None, permanent: bool = False):
        super().__init__(message)
        self.raw = raw
        self.permanent = permanent


@dataclass(frozen=True)
class DailyPlan:
    proposed_events: tuple[TransactionEvent, ...] = ()
    reasoning: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"reasoning": self.reasoning, "transactions": [_draft_dict(e) for e in self.proposed_events]}


def _draft_dict(e: TransactionEvent) -> dict[str, Any]:
    return {
        "time": e.timestamp.strftime("%H:%M"),
        "merchant_name": e.merchant_name,
        "merchant_type": e.merchant_type,
        "card_present_or_not": e.card_present_or_not,
        "amount": format_cents(abs(e.amount)),
        "kind": e.kind,
    }


def serialize_plan(plan: DailyPlan) -> str:
    return json.dumps(plan.to_dict(), ensure_ascii=False, separators=(",", ":"))


def _signed(kind: str, cents: int) -> int:
    if kind == "payment":
        return -abs(cents)
    if kind == "cancel_subscription":
        return 0
    return abs(cents)


def parse_plan(raw: str, day: date, max_events: int = 25) -> DailyPlan:
    """Strictly parse a JSON plan ``{"reasoning"?, "transactions": [...]}``.

    Amounts are decimal strings or numbers (never routed through float);
    the sign comes from ``kind``. Unknown keys are ignored.
    """
    text = raw.strip()
    if text.startswith("```"):
        text = text.strip("`")
        text = text[text.find("{"):] if "{" in text else text
    try:
        obj = json.loads(text, parse_float=Decimal)
    except json.JSONDecodeError as exc:
        raise ParseError("MALFORMED_JSON", str(exc)) from exc
    if not isinstance(obj, dict):
        raise ParseError("MALFORMED_JSON", "top level must be an object")
    txs = obj.get("transactions")
    if txs is None:
        raise ParseError("MISSING_FIELD", "transactions")
    if not isinstance(txs, list):
        raise ParseError("MALFORMED_JSON", "transactions must be a list")
    if len(txs) > max_events:
        raise ParseError("TOO_MANY_EVENTS", f"{len(txs)} transactions > {max_events}")
    reasoning = obj.get("reasoning")
    events = []
    for i, t in enumerate(txs):
        if not isinstance(t, dict):
            raise ParseError("MALFORMED_JSON", f"transactions[{i}] must be an object")
        for key in ("merchant_name", "merchant_type", "card_present_or_not", "amount", "kind"):
            if key not in t:
                raise ParseError("MISSING_FIELD", f"transactions[{i}].{key}")
        kind = t["kind"]
        if kind not in PLAN_KINDS:
            raise ParseError("INVALID_KIND", f"transactions[{i}].kind={kind!r}")
        amt = t["amount"]
        if isinstance(amt, bool) or not isinstance(amt, (str, int, Decimal)):
            raise ParseError("NON_NUMERIC_AMOUNT", f"transactions[{i}].amount={amt!r}")
        try:
            cents = to_cents(amt)
        except MoneyFormatError as exc:
            raise ParseError("NON_NUMERIC_AMOUNT", f"transactions[{i}].amount={amt!r}") from exc
        name, mtype = t["merchant_name"], t["merchant_type"]
        if not isinstance(name, str) or not name.strip() or not isinstance(mtype, str) or not mtype.strip():
            raise ParseError("INVALID_FIELD", f"transactions[{i}] merchant_name/merchant_type must be non-empty strings")
        cp = t["card_present_or_not"]
        if not isinstance(cp, bool):
            raise ParseError("INVALID_FIELD", f"transactions[{i}].card_present_or_not must be true/false")
        ts = _parse_time(t.get("time"), day, i)
        events.append(TransactionEvent(ts, name, mtype, cp, _signed(kind, cents), kind))
    events.sort(key=lambda e: e.timestamp)
    return DailyPlan(tuple(events), reasoning if isinstance(reasoning, str) else None)


def _parse_time(value, day: date, i: int) -> datetime:
    if value is None:
        minutes = min(8 * 60 + 30 * i, 22 * 60 + 59)
        return datetime.combine(day, time(minutes // 60, minutes % 60))
    try:
        hh, mm = str(value).split(":")[:2]
        return datetime.combine(day, time(int(hh), int(mm)))
    except (ValueError, TypeError) as exc:
        raise ParseError("INVALID_FIELD", f"transactions[{i}].time={value!r}") from exc


class ConversationWindow:
    """The trailing seven days of (prompt, plan) pairs; oldest evicted first."""

    def __init__(self, days: int = HISTORY_DAYS):
        self._items: deque[tuple[date, str, DailyPlan | None]] = deque(maxlen=days)

    def push(self, day: date, prompt: str, plan: DailyPlan | None) -> None:
        self._items.append((day, prompt, plan))

    @property
    def entries(self) -> list[tuple[date, str, DailyPlan | None]]:
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def messages(self) -> list[dict[str, str]]:
        out = []
        for _day, prompt, plan in self._items:
            out.append({"role": "user", "content": prompt})
            out.append({"role": "assistant", "content": serialize_plan(plan) if plan else '{"transactions":[]}'})
        return out


def system_prompt(persona: AugmentedPersona) -> str:
    """Persona plus financial status; schedules are executed by the program and left out."""
    p, f = persona.user_persona, persona.user_financial_profile
    lines = [
        "You are simulating the day-to-day credit card activity of the following person.",
        f"Persona: {p.persona}",
        f"Work: {p.professional_persona}",
        f"Sports: {p.sports_persona}",
        f"Arts: {p.arts_persona}",
        f"Travel: {p.travel_persona}",
        f"Food: {p.culinary_persona}",
        f"Hobbies: {', '.join(p.hobbies_and_interests_list)}",
        f"Age {p.age}, {p.sex}, {p.marital_status}, education {p.education_level}, occupation {p.occupation}.",
        "Financial status:",
        f"- Income level: {f.income_level}",
        f"- Credit limit: ${f.credit_limit:,}",
        f"- Payment habit: {f.payment_habit}",
        f"- Car ownership: {f.car_ownership}",
        f"- Spending pattern: {f.spending_patterns}",
        "Each day you receive the account status and must reply with JSON only:",
        '{"reasoning": "...", "transactions": [{"time": "HH:MM", "merchant_name": "...", "merchant_type": "...", '
        '"card_present_or_not": true, "amount": "12.34", "kind": "purchase" | "payment" | "cancel_subscription"}]}',
        "Subscriptions, bills and paychecks are handled automatically; do not include them.",
    ]
    return "\n".join(lines)


def _stable_int(*parts: Any) -> int:
    return int.from_bytes(hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest(), "big")


@dataclass
class _Profile:
    """Per-user merchant preferences derived once from the persona."""

    types: list[dict[str, Any]]
    weights: np.ndarray
    favorites: dict[str, list[str]]
    grocery: dict[str, Any] | None
    fuel: dict[str, Any] | None
    tags: set[str]


def _lognormal_params(lo: float, hi: float) -> tuple[float, float]:
    mu = (math.log(lo) + math.log(hi)) / 2
    sigma = (math.log(hi) - math.log(lo)) / (2 * 1.645)
    return mu, sigma


class MockProposer:
    """Deterministic stand-in for the persona-conditioned LLM.

    Given (persona, prompt, rng stream) the plan is fully determined. It
    honors required-event fragments and correction feedback carried in the
    prompt, and occasionally makes the mistakes a naive model makes
    (overpaying, ignoring purchase cadence) so the repair loop gets exercised.
    """

    variant = "mock"

    def __init__(self, config: EngineConfig | None = None):
        self.config = config or EngineConfig()
        self._profiles: dict[str, _Profile] = {}

    # -- persona preferences --------------------------------------------
    def _profile(self, persona: AugmentedPersona) -> _Profile:
        prof = self._profiles.get(persona.user_id)
        if prof is not None:
            return prof
        fp = persona.user_financial_profile
        tags = persona_tags(persona.user_persona, owns_car=fp.owns_car)
        types, weights = [], []
        grocery = fuel = None
        for mt in catalog.load()["merchant_types"]:
            if mt["category"] == "grocery":
                grocery = mt
                continue
            if mt["category"] == "fuel":
                fuel = mt if fp.owns_car else None
                continue
            mtags = set(mt["tags"])
            if "car" in mtags and not fp.owns_car:
                continue
            if "*" in mtags:
                w = 1.0
            elif mtags & tags:
                w = 0.8 if mtags & {"no_car", "car"} else 0.6
            else:
                continue
            types.append(mt)
            weights.append(w)
        favorites = {}
        for mt in types + [m for m in (grocery, fuel) if m]:
            names = list(mt["merchants"])
            k = min(len(names), 2 if mt.get("category") else 3)
            start = _stable_int(persona.user_id, mt["merchant_type"]) % len(names)
            favorites[mt["merchant_type"]] = [names[(start + j) % len(names)] for j in range(k)]
        w = np.asarray(weights, dtype=float)
        prof = _Profile(types, w / w.sum(), favorites, grocery, fuel, tags)
        self._profiles[persona.user_id] = prof
        return prof

    def expected_event_count(self, persona: AugmentedPersona, day: date) -> float:
        fp = persona.user_financial_profile
        lam = BASE_DAILY_COUNT * ARCHETYPE_COUNT[fp.archetype] * WEEKDAY_COUNT[day.weekday()]
        if is_holiday(day):
            lam *= 1.2
        return lam

    def spend_multiplier(self, persona: AugmentedPersona) -> float:
        fp = persona.user_financial_profile
        return ARCHETYPE_SPEND[fp.archetype] * INCOME_SPEND[fp.income_level] * self.config.spend_scale

    # -- plan construction -------------------------------------------------
    def _amount(self, mt: dict[str, Any], mult: float, rng: np.random.Generator) -> int:
        mu, sigma = _lognormal_params(mt["band_low"], mt["band_high"])
        dollars = math.exp(mu + sigma * float(rng.standard_normal())) * mult
        return max(50, round_half_up(dollars * 100))

    def _purchase(self, mt, prof: _Profile, mult, day, minute, rng) -> TransactionEvent:
        favs = prof.favorites[mt["merchant_type"]]
        if rng.random() < 0.85:
            name = favs[int(rng.integers(len(favs)))]
        else:
            name = mt["merchants"][int(rng.integers(len(mt["merchants"])))]
        cp = bool(rng.random() < mt["card_present_prob"])
        ts = datetime.combine(day, time(minute // 60, minute % 60))
        return TransactionEvent(ts, name, mt["merchant_type"], cp, self._amount(mt, mult, rng), "purchase")

    def _base_plan(self, persona: AugmentedPersona, state: LedgerState, rng: np.random.Generator) -> list[TransactionEvent]:
        cfg = self.config
        day = state.current_date
        prof = self._profile(persona)
        mult = self.spend_multiplier(persona)
        holiday = is_holiday(day)
        if holiday:
            mult *= 1.1
        events: list[TransactionEvent] = []

        def minute():
            return int(rng.integers(7 * 60, 22 * 60 + 30))

        # Cadence-tracked staples first; a naive slip ignores the gap now and then.
        slip = rng.random() < cfg.cadence_slip_rate
        for cat, mt, p in (("grocery", prof.grocery, 0.45), ("fuel", prof.fuel, 0.4)):
            draw = rng.random()
            if mt is None:
                continue
            last = state.last_purchase_dates.get(cat)
            gap_ok = last is None or (day - last).days >= cfg.cadence_min_days.get(cat, 0)
            if (gap_ok or slip) and draw < p:
                events.append(self._purchase(mt, prof, mult, day, minute(), rng))

        n = int(rng.poisson(self.expected_event_count(persona, day)))
        for _ in range(n):
            mt = prof.types[int(rng.choice(len(prof.types), p=prof.weights))]
            events.append(self._purchase(mt, prof, mult, day, minute(), rng))

        pay = self._payment(persona, state, rng)
        if pay is None:
            pay = self._paydown(persona, state, rng)
        naive = rng.random() < NAIVE_BUDGET_RATE
        if not naive:
            room = state.available_credit + (-pay.amount if pay is not None and pay.amount < 0 else 0)
            events = _fit_budget(events, [], room)
        if pay is not None:
            events.append(pay)

        if rng.random() < cfg.cancel_prob:
            subs = [s for s in state.schedules if s.kind == "subscription"]
            if subs:
                s = subs[int(rng.integers(len(subs)))]
                ts = datetime.combine(day, time(minute() // 60, 0))
                events.append(TransactionEvent(ts, s.charge.merchant_name, "subscription_cancellation", False, 0,
                                               "cancel_subscription", ref=s.schedule_id))
        return events

    def _paydown(self, persona: AugmentedPersona, state: LedgerState, rng) -> TransactionEvent | None:
        """Extra mid-cycle payment when the card runs hot and checking has slack."""
        coin = rng.random()
        if persona.user_financial_profile.payment_habit == "irregular" or state.credit_limit <= 0:
            return None
        if state.credit_balance < PAYDOWN_UTILIZATION * state.credit_limit or coin >= PAYDOWN_PROB:
            return None
        amount = min(state.credit_balance, state.cash - state.paycheck // 2)
        if amount <= 0:
            return None
        return TransactionEvent(datetime.combine(state.current_date, time(9, 0)), "Credit Card Payment", "payment",
                                False, -amount, "payment")

    def _payment(self, persona: AugmentedPersona, state: LedgerState, rng) -> TransactionEvent | None:
        fp = persona.user_financial_profile
        day = state.current_date
        err = rng.random() < self.config.payment_error_rate
        coin = rng.random()
        if state.due_date is None or state.statement_balance_due <= 0 or day > state.due_date:
            return None
        habit = fp.payment_habit
        if habit == "automatic_payment":
            pay_day = state.due_date
            amount = state.statement_balance_due
        elif habit == "manual_on_due_date":
            pay_day = state.due_date - timedelta(days=1 + _stable_int(persona.user_id, state.due_date) % 3)
            amount = state.statement_balance_due
        else:
            pay_day = state.due_date
            amount = max(state.min_payment_due - state.paid_by_due, 0) if coin < 0.3 else 0
        if day != pay_day or amount <= 0:
            return None
        amount = min(amount, max(state.cash, 0))
        if err:
            # Miscomputed balance: pays the statement again on top of what is owed.
            amount = state.credit_balance + state.statement_amount // 4 + 100
        if amount <= 0:
            return None
        ts = datetime.combine(day, time(9, 0))
        return TransactionEvent(ts, "Credit Card Payment", "payment", False, -amount, "payment")

    def _apply_feedback(self, events: list[TransactionEvent], required: list[TransactionEvent], prompt: PromptSpec,
                        state: LedgerState) -> list[TransactionEvent]:
        codes = {}
        for v in prompt.violations:
            codes.setdefault(v.code, []).append(v)
        out = list(events)
        if "INCOME_NOT_PROPOSABLE" in codes:
            out = [e for e in out if e.kind != "income_deposit"]
        if "PROGRAM_SCHEDULED_KIND" in codes:
            out = [e for e in out if e.kind not in SCHEDULED_KINDS]
        if "UNKNOWN_SUBSCRIPTION" in codes:
            out = [e for e in out if e.kind != "cancel_subscription"]
        if "FUEL_WITHOUT_CAR" in codes:
            out = [e for e in out if event_category(e.merchant_type) != "fuel"]
        for code, cat in (("CADENCE_GROCERY", "grocery"), ("CADENCE_FUEL", "fuel")):
            if code in codes:
                out = [e for e in out if event_category(e.merchant_type) != cat]
        caps = [v.get("max_payment") for c in ("OVERPAYMENT", "INSUFFICIENT_CASH") for v in codes.get(c, [])]
        cap = min([state.credit_balance, max(state.cash, 0)] + [c for c in caps if c is not None]) if caps else None
        if "DUE_PAYMENT_MISSING" in codes:
            need = max(v.get("min_payment", 0) for v in codes["DUE_PAYMENT_MISSING"])
            pays = [e for e in out if e.kind == "payment"]
            have = sum(-e.amount for e in pays)
            if have < need:
                out = [e for e in out if e.kind != "payment"]
                amount = min(max(need, have), state.credit_balance, max(state.cash, 0))
                if amount > 0:
                    out.append(TransactionEvent(datetime.combine(state.current_date, time(9, 0)), "Credit Card Payment",
                                                "payment", False, -amount, "payment"))
        if cap is not None:
            fixed = []
            for e in out:
                if e.kind == "payment":
                    if cap <= 0:
                        continue
                    e = TransactionEvent(e.timestamp, e.merchant_name, e.merchant_type, e.card_present_or_not,
                                         -min(-e.amount, cap), "payment")
                fixed.append(e)
            out = fixed
        budget = None
        if "CREDIT_LIMIT_EXCEEDED" in codes:
            budget = state.available_credit + sum(-e.amount for e in out if e.kind == "payment")
        if "LIQUIDITY" in codes:
            excess = max(v.get("excess", 0) for v in codes["LIQUIDITY"])
            charged = sum(e.amount for e in out if e.kind == "purchase")
            b = charged - excess
            budget = b if budget is None else min(budget, b)
        if budget is not None:
            out = _fit_budget(out, required, budget)
        return out

    def propose(self, prompt: PromptSpec, persona: AugmentedPersona, state: LedgerState, rng: np.random.Generator) -> DailyPlan:
        events = self._base_plan(persona, state, rng)
        required = prompt.required_events
        for r in required:
            if r not in events:
                events.append(r)
        if prompt.violations:
            events = self._apply_feedback(events, required, prompt, state)
        events = sorted(events, key=lambda e: e.timestamp)[: self.config.max_events_per_day]
        n_req = sum(1 for e in events if e in required)
        reasoning = f"{len(events)} planned transaction(s)" + (f", including {n_req} required expense(s)" if n_req else "")
        return DailyPlan(tuple(events), reasoning)


def _fit_budget(events: list[TransactionEvent], required: list[TransactionEvent], budget: int) -> list[TransactionEvent]:
    """Drop purchases, latest discretionary first, until card charges fit ``budget``."""
    out = list(events)
    order = [e for e in reversed(out) if e.kind == "purchase" and e not in required]
    order += [e for e in reversed(out) if e.kind == "purchase" and e in required]
    total = sum(e.amount for e in out if e.kind == "purchase")
    for e in order:
        if total <= budget:
            break
        out.remove(e)
        total -= e.amount
    return out


class ExternalProposer:
    """Asks a chat-completion backend for the plan; reprompts on parse errors."""

    variant = "external"

    def __init__(self, client, config: EngineConfig | None = None):
        self.client = client
        self.config = config or EngineConfig()

    def propose(self, prompt: PromptSpec, persona: AugmentedPersona, state: LedgerState, rng=None,
                history: ConversationWindow | None = None) -> DailyPlan:
        messages = [{"role": "system", "content": prompt.system or system_prompt(persona)}]
        if history is not None:
            messages += history.messages()
        messages.append({"role": "user", "content": prompt.user})
        raw = ""
        for attempt in range(self.config.parse_retries + 1):
            try:
                raw = self.client.complete(messages)
            except Exception as exc:  # backend outage of any kind degrades the day
                raise PlanUnavailable(f"backend error: {exc}", permanent=True) from exc
            try:
                return parse_plan(raw, state.current_date, self.config.max_events_per_day)
            except ParseError as exc:
                messages = messages + [
                    {"role": "assistant", "content": raw},
                    {"role": "user", "content": f"Your reply could not be used ({exc.code}: {exc}). "
                                                "Reply again with JSON only, following the schema exactly."},
                ]
        raise PlanUnavailable("plan could not be parsed after retries", raw=raw)


def propose(source, prompt: PromptSpec, persona: AugmentedPersona, state: LedgerState, rng=None,
            history: ConversationWindow | None = None) -> DailyPlan:
    if state.terminated_illiquid:
        raise PlanUnavailable("user is terminated")
    if isinstance(source, ExternalProposer):
        return source.propose(prompt, persona, state, rng, history)
    return source.propose(prompt, persona, state, rng)
