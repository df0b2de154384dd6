from datetime import date, timedelta

import numpy as np
import pytest

from conftest import charge
from ledgerloop.ledger import LedgerState, ScheduleEntry, TransactionEvent, Violation, at, first_month_index
from ledgerloop.rules import (
    BUILTIN_ORDER,
    INVARIANT,
    REALISM,
    RULE_CODES,
    DuplicateRuleError,
    Rule,
    RuleOutcome,
    blocking,
    build_next_prompt,
    calendar_line,
    default_registry,
    evaluate_plan,
    liquidity_check,
    maybe_random_event,
    register_rule,
)

D0 = date(2024, 3, 4)  # a Monday, not a pay day


def _state(**kw):
    base = dict(cash=100000, credit_balance=20000, credit_limit=100000, current_date=D0, paycheck=150000,
                pay_days=(1, 15), next_income_date=date(2024, 3, 15))
    base.update(kw)
    return LedgerState(**base)


def _p(amount, kind="purchase", name="Shop", mtype="retail", hh=10, day=D0):
    return TransactionEvent(at(day, hh), name, mtype, True, amount, kind)


# One plan that trips every rule, and the codes each rule owns.
def _bad_state():
    s = _state(due_date=D0, statement_amount=20000, statement_balance_due=20000, min_payment_due=600,
               last_purchase_dates={"grocery": D0 - timedelta(days=1), "fuel": D0 - timedelta(days=2)})
    s.schedules = (ScheduleEntry("sub:0", "subscription", charge(day=4), first_month_index(D0, 4)),)
    return s


BAD_PLAN = [
    _p(-90000, "payment", "Credit Card Payment", "payment", 8),     # OVERPAYMENT (balance 200)
    _p(1549, "subscription_charge", "Netflix", "streaming", 9),      # PROGRAM_SCHEDULED_KIND
    _p(4000, "purchase", "Kroger", "grocery", 11),                   # CADENCE_GROCERY
    _p(600000, "purchase", "Big TV", "electronics", 12),              # CREDIT_LIMIT_EXCEEDED + LIQUIDITY
]


@pytest.mark.parametrize("rule_id", BUILTIN_ORDER)
def test_rule_isolation_matrix(rule_id):
    """Each rule alone reports only its own codes; removing it removes exactly those codes."""
    only = evaluate_plan(default_registry([rule_id]), _bad_state(), BAD_PLAN, owns_car=True)
    assert {v.code for v in only.violations} <= set(RULE_CODES[rule_id])
    assert all(v.rule_id == rule_id for v in only.violations)
    rest = [r for r in BUILTIN_ORDER if r != rule_id]
    without = evaluate_plan(default_registry(rest), _bad_state(), BAD_PLAN)
    assert not {v.code for v in without.violations} & set(RULE_CODES[rule_id])


def test_full_registry_sees_every_problem():
    codes = {v.code for v in evaluate_plan(default_registry(), _bad_state(), BAD_PLAN).violations}
    assert {"OVERPAYMENT", "PROGRAM_SCHEDULED_KIND", "CADENCE_GROCERY", "CREDIT_LIMIT_EXCEEDED", "LIQUIDITY",
            "DUE_PAYMENT_MISSING"} <= codes


def test_evaluation_does_not_mutate():
    s = _bad_state()
    before = s.to_dict()
    evaluate_plan(default_registry(), s, BAD_PLAN)
    assert s.to_dict() == before


def test_overpayment_regression():
    out = evaluate_plan(default_registry(), _state(credit_balance=5000), [_p(-6000, "payment", mtype="payment")])
    (v,) = [v for v in out.violations if v.code == "OVERPAYMENT"]
    assert v.offending_event_index == 0 and v.get("max_payment") == 5000
    assert "$50.00" in v.suggested_remedy


def test_carryover_regression_scheduled_charge_cannot_be_proposed_or_skipped():
    s = _bad_state()
    out = evaluate_plan(default_registry(), s, [_p(1549, "subscription_charge", "Netflix")])
    assert [v.code for v in out.violations if v.rule_id == "subscription_carryover"] == ["PROGRAM_SCHEDULED_KIND"]
    forced = default_registry().get("subscription_carryover").update(s, D0, np.random.default_rng(0), None)
    assert [e.merchant_name for e in forced] == ["Netflix"]


def test_cadence_regression_is_realism_only():
    s = _state(last_purchase_dates={"grocery": D0 - timedelta(days=2)})
    reg = default_registry()
    out = evaluate_plan(reg, s, [_p(3000, name="Aldi", mtype="grocery"), _p(3000, name="Aldi", mtype="grocery", hh=18)])
    cad = [v for v in out.violations if v.code == "CADENCE_GROCERY"]
    assert [v.offending_event_index for v in cad] == [0, 1]
    assert blocking(reg, out.violations) == []
    assert len(blocking(reg, out.violations, strict_cadence=True)) == 2
    ok = evaluate_plan(reg, _state(last_purchase_dates={"grocery": D0 - timedelta(days=3)}), [_p(3000, mtype="grocery")])
    assert ok.violations == []


def test_fuel_without_car():
    out = evaluate_plan(default_registry(), _state(), [_p(4000, name="Shell", mtype="fuel")], owns_car=False)
    assert [v.code for v in out.violations] == ["FUEL_WITHOUT_CAR"]


def test_due_rule_only_when_payable():
    s = _state(due_date=D0, statement_amount=20000, min_payment_due=600)
    reg = default_registry()
    assert [v.code for v in evaluate_plan(reg, s, []).violations] == ["DUE_PAYMENT_MISSING"]
    assert evaluate_plan(reg, s, [_p(-600, "payment", mtype="payment")]).violations == []
    broke = _state(cash=100, due_date=D0, statement_amount=20000, min_payment_due=600)
    assert evaluate_plan(reg, broke, []).violations == []


def test_liquidity_boundary_is_strict():
    s = _state(cash=1000, credit_balance=0, credit_limit=2000, next_income_date=date(2024, 4, 1))
    # window [Mar 4, Apr 3): one paycheck on Apr 1 counts.
    resources = 1000 + 2000 + 150000
    assert liquidity_check(s, 30, [_p(resources)]) is None
    v = liquidity_check(s, 30, [_p(resources - 5), _p(5), _p(1, hh=12)])
    assert v is not None and v.offending_event_index == 2 and v.get("excess") == 1
    assert liquidity_check(s, 10, [_p(3001)]).get("resources") == 3000  # paycheck outside a 10-day window
    with pytest.raises(ValueError):
        liquidity_check(s, 0, [])


def test_liquidity_counts_scheduled_outflows():
    s = _state(cash=0, credit_balance=0, credit_limit=10000, next_income_date=date(2024, 5, 1))
    s.schedules = (ScheduleEntry("bill:0", "bill", charge(day=20, amount=9000, name="Rent"), first_month_index(D0, 20)),)
    v = liquidity_check(s, 30, [_p(1001)])
    assert v is not None and v.get("excess") == 1


def test_register_rejects_duplicates_and_bad_kinds():
    reg = default_registry()
    with pytest.raises(DuplicateRuleError):
        register_rule(reg, Rule("liquidity", INVARIANT, lambda s, c: []))
    with pytest.raises(ValueError):
        register_rule(reg, Rule("x", "optional", lambda s, c: []))
    with pytest.raises(KeyError):
        default_registry(["no_such_rule"])


def test_custom_rule_plugs_in():
    def no_casinos(state, ctx):
        return [Violation("no_casinos", "CASINO", "casino", i) for i, e in enumerate(ctx.events) if e.merchant_type == "casino"]

    reg = register_rule(default_registry(), Rule("no_casinos", INVARIANT, no_casinos))
    out = evaluate_plan(reg, _state(), [_p(500), _p(900, mtype="casino")])
    (v,) = blocking(reg, out.violations)
    assert v.code == "CASINO" and v.offending_event_index == 1
    assert reg.ids[:6] == list(BUILTIN_ORDER[:5]) + ["no_casinos"]  # invariants first
    realism = register_rule(default_registry(), Rule("quiet", REALISM, no_casinos))
    assert blocking(realism, evaluate_plan(realism, _state(), [_p(900, mtype="casino")]).violations) == []


def test_random_event_draw_is_seeded():
    s = _state()
    hits = [maybe_random_event(s, D0, np.random.default_rng(i), 0.5, {"*"}) for i in range(200)]
    assert 60 < sum(h is not None for h in hits) < 140
    h = next(h for h in hits if h)
    assert h.kind == "require" and h.event.kind == "purchase" and h.event.amount > 0
    assert maybe_random_event(s, D0, np.random.default_rng(1), 0.0) is None


def test_prompt_is_byte_stable_and_carries_feedback():
    reg = default_registry()
    s = _bad_state()
    out = evaluate_plan(reg, s, BAD_PLAN)
    a = build_next_prompt(reg, s, D0, out, system="sys")
    b = build_next_prompt(reg, s, D0, out, system="sys")
    assert a == b
    assert a.user.startswith(calendar_line(D0))
    assert "Corrections needed:" in a.user and "[OVERPAYMENT]" in a.user
    assert "Days since last grocery purchase: 1." in a.user
    assert "minimum $6.00" in a.user
    clean = build_next_prompt(reg, _state(), D0, RuleOutcome())
    assert "Corrections needed" not in clean.user


def test_calendar_line_names_holidays():
    assert calendar_line(date(2024, 7, 4)) == "Date: Thursday, 2024-07-04. Today is Independence Day."
