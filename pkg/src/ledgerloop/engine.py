"""The daily propose / check / repair / apply loop and corpus runs.

Randomness is drawn from counter-based Philox streams keyed by
``(seed, user, day, purpose)``. No stream is shared between users or days,
so a corpus is byte-identical whatever the worker count or user order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time as _time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .audit import AuditLog, apply_op, file_sha256
from .config import EngineConfig
from .dates import month_end
from .ledger import (
    EXPORT_KINDS,
    LedgerState,
    TransactionEvent,
    apply_event,
    check_event,
    init_state,
    post_scheduled_items,
    state_hash,
    statement_charges,
    with_room,
)
from .money import format_cents
from .persona import AugmentedPersona, augmented_to_dict, persona_tags
from .proposer import ConversationWindow, DailyPlan, ExternalProposer, MockProposer, PlanUnavailable, propose, system_prompt
from .rules import (
    RuleOutcome,
    RuleRegistry,
    blocking,
    build_next_prompt,
    default_registry,
    evaluate_plan,
    maybe_random_event,
)

log = logging.getLogger(__name__)

PURPOSES = {"horizon": 1, "schedule": 2, "random": 3, "propose": 4}
PUBLIC_FIELDS = ("timestamp", "merchant_name", "merchant_type", "card_present_or_not", "amount")


def user_key(user_id: str) -> tuple[int, int]:
    h = int.from_bytes(hashlib.blake2b(user_id.encode(), digest_size=8).digest(), "big")
    return h >> 32, h & 0xFFFFFFFF


def stream(seed: int, user_id: str, day: date | None, purpose: str, attempt: int = 0) -> np.random.Generator:
    """An independent generator for one (user, day, purpose) cell."""
    hi, lo = user_key(user_id)
    words = [seed & 0xFFFFFFFF, seed >> 32, hi, lo, day.toordinal() if day else 0, PURPOSES[purpose], attempt]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def rule_params(config: EngineConfig) -> dict[str, dict[str, Any]]:
    params = {"temporal_cadence": dict(config.cadence_min_days),
              "liquidity": {"window_days": config.liquidity_window_days}}
    for rid, p in config.rule_params.items():
        params[rid] = {**params.get(rid, {}), **p}
    return params


def make_registry(config: EngineConfig) -> RuleRegistry:
    return default_registry(config.rules, rule_params(config))


def make_proposer(config: EngineConfig, client=None):
    if config.backend.kind == "mock":
        return MockProposer(config)
    if client is None:
        from .llm import ChatClient
        client = ChatClient(config.backend)
    return ExternalProposer(client, config)


@dataclass
class DayResult:
    day: date
    state: LedgerState
    events: list[TransactionEvent] = field(default_factory=list)
    dropped: list[TransactionEvent] = field(default_factory=list)
    attempts: int = 0
    degraded: bool = False
    backend_failed: bool = False
    random_event: bool = False
    terminated: bool = False
    post_hash: str | None = None


@dataclass
class UserTrace:
    user_id: str
    initial: LedgerState
    final: LedgerState
    events: list[TransactionEvent]
    snapshots: list[dict[str, Any]]
    audit: list[dict[str, Any]]
    days: int
    illiquid_date: date | None
    stats: dict[str, int]
    termination: str = "horizon_reached"  # horizon_reached | illiquid | incomplete


class _Recorder:
    """Posts events and transitions to the ledger, mirroring each into the audit chain."""

    def __init__(self, audit: AuditLog, pre_hash: str | None):
        self.audit = audit
        self.events: list[TransactionEvent] = []
        self.last_hash = pre_hash

    def _log(self, kind: str, new: LedgerState, **body) -> None:
        post = state_hash(new)
        self.audit.append(kind, day=new.current_date.isoformat(), pre_hash=self.last_hash, post_hash=post, **body)
        self.last_hash = post

    def event(self, state: LedgerState, ev: TransactionEvent) -> LedgerState:
        ev = ev.with_seq(state.next_seq)
        new = apply_event(state, ev)
        self.events.append(ev)
        self._log("TRANSITION", new, event=ev.to_dict(), post={"cash": new.cash, "credit_balance": new.credit_balance})
        return new

    def op(self, state: LedgerState | None, op: dict[str, Any], kind: str = "TRANSITION") -> LedgerState:
        new = apply_op(state, op)
        self._log(kind, new, op=op)
        return new


def _drop_offenders(registry, state, events, persona_car, params, strict) -> tuple[list[TransactionEvent], list[tuple[TransactionEvent, list]]]:
    """Remove offending drafts one at a time until no blocking violation points at an event."""
    kept = list(events)
    dropped = []
    while kept:
        outcome = evaluate_plan(registry, state, kept, owns_car=persona_car, params=params)
        bad = [v for v in blocking(registry, outcome.violations, strict) if v.offending_event_index is not None]
        if not bad:
            break
        idx = min(v.offending_event_index for v in bad)
        dropped.append((kept.pop(idx), [v for v in bad if v.offending_event_index == idx]))
    return kept, dropped


def _check_records(audit: AuditLog, registry: RuleRegistry, day: date, attempt: int, violations, block) -> None:
    for rule in registry:
        codes = sorted({v.code for v in violations if v.rule_id == rule.rule_id})
        audit.append("CHECK", day=day.isoformat(), attempt=attempt, rule_id=rule.rule_id,
                     verdict="fail" if codes else "pass", codes=codes)


def simulate_day(state: LedgerState, persona: AugmentedPersona, *, config: EngineConfig, registry: RuleRegistry,
                 proposer, history: ConversationWindow, audit: AuditLog, system: str | None = None,
                 pre_hash: str | None = None, tags: set[str] | None = None) -> DayResult:
    """Run one simulated day for one user; ``state.current_date`` is the day being simulated."""
    if state.terminated_illiquid:
        raise ValueError("cannot simulate a terminated user")
    day = state.current_date
    uid = persona.user_id
    fp = persona.user_financial_profile
    params = rule_params(config)
    rec = _Recorder(audit, pre_hash if pre_hash is not None else state_hash(state))
    system = system if system is not None else system_prompt(persona)
    result = DayResult(day, state)

    # 1. program-executed items: paycheck, subscriptions, bills
    carry = "subscription_carryover" in registry.ids
    _, forced = post_scheduled_items(state, day, stream(config.seed, uid, day, "schedule"), schedules=carry)
    for ev in forced:
        state = rec.event(state, ev)
    forced = list(rec.events)

    # 2. random shocks and the prompt
    outcome = RuleOutcome(forced_events=forced)
    if "random_events" in registry.ids:
        if tags is None:
            tags = persona_tags(persona.user_persona, owns_car=fp.owns_car)
        frag = maybe_random_event(state, day, stream(config.seed, uid, day, "random"), config.random_event_prob, tags)
        if frag is not None:
            outcome.fragments.append(frag)
            result.random_event = True
    prompt = build_next_prompt(registry, state, day, outcome, history, system=system, owns_car=fp.owns_car, params=params)
    first_prompt = prompt

    # 3-5. propose, check, repair
    plan: DailyPlan | None = None
    accepted: list[TransactionEvent] = []
    seen: list = []
    for attempt in range(config.repair_retries + 1):
        result.attempts = attempt + 1
        audit.append("PROMPT", day=day.isoformat(), attempt=attempt,
                     sha256=hashlib.sha256(prompt.user.encode()).hexdigest(), chars=len(prompt.user),
                     codes=[v.code for v in prompt.violations])
        try:
            plan = propose(proposer, prompt, persona, state, stream(config.seed, uid, day, "propose"), history)
        except PlanUnavailable as exc:
            audit.append("PLAN", day=day.isoformat(), attempt=attempt, status="unavailable", reason=str(exc),
                         raw=exc.raw, events=[])
            result.degraded = True
            result.backend_failed = exc.permanent
            plan, accepted = DailyPlan((), None), []
            break
        events = list(plan.proposed_events)
        audit.append("PLAN", day=day.isoformat(), attempt=attempt, status="ok", reasoning=plan.reasoning,
                     events=[e.to_dict() for e in events])
        ev_outcome = evaluate_plan(registry, state, events, owns_car=fp.owns_car, params=params)
        block = blocking(registry, ev_outcome.violations, config.strict_cadence)
        _check_records(audit, registry, day, attempt, ev_outcome.violations, block)
        accepted = events
        if not block:
            break
        audit.append("REJECTION", day=day.isoformat(), attempt=attempt, violations=[v.to_dict() for v in block])
        if attempt == config.repair_retries:
            accepted, dropped = _drop_offenders(registry, state, events, fp.owns_car, params, config.strict_cadence)
            for ev, vs in dropped:
                audit.append("DROPPED", day=day.isoformat(), event=ev.to_dict(), violations=[v.to_dict() for v in vs])
                result.dropped.append(ev)
            break
        for v in ev_outcome.violations:
            if v not in seen:
                seen.append(v)
        retry = RuleOutcome(violations=list(seen), forced_events=forced, fragments=list(outcome.fragments))
        prompt = build_next_prompt(registry, state, day, retry, history, system=system, owns_car=fp.owns_car, params=params)

    # 6. apply the accepted plan in timestamp order; the ledger is the final arbiter
    for ev in sorted(accepted, key=lambda e: e.timestamp):
        ev = TransactionEvent(ev.timestamp, ev.merchant_name, ev.merchant_type, ev.card_present_or_not, ev.amount,
                              ev.kind, None, "plan", ev.ref)
        problems = check_event(state, ev)
        if problems:
            audit.append("DROPPED", day=day.isoformat(), event=ev.to_dict(), violations=[v.to_dict() for v in problems])
            result.dropped.append(ev)
            continue
        state = rec.event(state, ev)
    history.push(day, first_prompt.user, DailyPlan(tuple(accepted), plan.reasoning if plan else None))

    # 7. statement close on the last day of the month
    if day == month_end(day):
        for ev in statement_charges(state, day, config):
            for e in with_room(state, ev):
                state = rec.event(state, e)
        state = rec.op(state, {"op": "roll_statement", "date": day.isoformat(),
                               "grace_days": config.grace_days, "min_fraction": config.min_payment_fraction})

    # 8. illiquidity: end-of-day cash below the overdraft allowance
    if state.cash < config.overdraft_allowance:
        state = rec.op(state, {"op": "terminate", "cash": state.cash, "allowance": config.overdraft_allowance},
                       kind="TERMINATION")
        result.terminated = True

    result.state = state
    result.events = rec.events
    result.post_hash = rec.last_hash
    return result


def user_horizon(config: EngineConfig, user_id: str) -> int:
    if config.horizon_days_range is None:
        return config.max_days
    lo, hi = config.horizon_days_range
    return min(config.max_days, int(stream(config.seed, user_id, None, "horizon").integers(lo, hi + 1)))


def _snapshot(uid: str, state: LedgerState, kind: str, digest: str) -> dict[str, Any]:
    return {
        "user_id": uid,
        "kind": kind,
        "date": state.current_date.isoformat(),
        "cash": state.cash,
        "credit_balance": state.credit_balance,
        "credit_limit": state.credit_limit,
        "terminated_illiquid": state.terminated_illiquid,
        "state_hash": digest,
    }


def simulate_user(persona: AugmentedPersona, config: EngineConfig, proposer=None,
                  registry: RuleRegistry | None = None) -> UserTrace:
    """Simulate from ``config.start_date`` until the user's horizon or illiquid termination."""
    registry = registry or make_registry(config)
    proposer = proposer or make_proposer(config)
    uid = persona.user_id
    audit = AuditLog(uid)
    rec = _Recorder(audit, None)
    init = init_state(persona.user_financial_profile, config.start_date, config)
    state = rec.op(None, {"op": "init", "state": init.to_dict()})
    snapshots = [_snapshot(uid, state, "initial", rec.last_hash)]
    history = ConversationWindow()
    system = system_prompt(persona)
    tags = persona_tags(persona.user_persona, owns_car=persona.user_financial_profile.owns_car)
    events: list[TransactionEvent] = []
    stats = {"attempts": 0, "dropped": 0, "degraded_days": 0, "repaired_days": 0, "random_events": 0}
    termination = "horizon_reached"
    illiquid = None
    days = 0
    for k in range(user_horizon(config, uid)):
        if k > 0:
            state = rec.op(state, {"op": "advance_day", "date": (state.current_date + timedelta(days=1)).isoformat()})
        res = simulate_day(state, persona, config=config, registry=registry, proposer=proposer, history=history,
                           audit=audit, system=system, pre_hash=rec.last_hash, tags=tags)
        rec.last_hash = res.post_hash
        state = res.state
        days += 1
        events += res.events
        stats["attempts"] += res.attempts
        stats["dropped"] += len(res.dropped)
        stats["degraded_days"] += int(res.degraded)
        stats["repaired_days"] += int(res.attempts > 1)
        stats["random_events"] += int(res.random_event)
        snapshots.append(_snapshot(uid, state, "daily", rec.last_hash))
        if res.terminated:
            termination, illiquid = "illiquid", res.day
            break
        if res.backend_failed:
            termination = "incomplete"
            break
    snapshots.append(_snapshot(uid, state, "final", rec.last_hash))
    return UserTrace(uid, init, state, events, snapshots, audit.records, days, illiquid, stats, termination)


def export_row(user_id: str, ev: TransactionEvent) -> dict[str, Any]:
    return {
        "user_id": user_id,
        "seq": ev.seq,
        "timestamp": ev.timestamp.strftime("%Y-%m-%dT%H:%M:00Z"),
        "merchant_name": ev.merchant_name,
        "merchant_type": ev.merchant_type,
        "card_present_or_not": ev.card_present_or_not,
        "amount": format_cents(ev.amount),
        "kind": ev.kind,
    }


def _run_one(args) -> UserTrace:
    persona, config = args
    return simulate_user(persona, config)


def run_users(personas: Sequence[AugmentedPersona], config: EngineConfig, jobs: int = 1, client=None) -> list[UserTrace]:
    """Simulate every persona; results come back in input order regardless of ``jobs``."""
    if config.backend.kind != "mock" or client is not None:
        proposer = make_proposer(config, client)
        registry = make_registry(config)
        if jobs <= 1:
            return [simulate_user(p, config, proposer, registry) for p in personas]
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(lambda p: simulate_user(p, config, proposer, registry), personas))
    if jobs <= 1:
        proposer, registry = MockProposer(config), make_registry(config)
        return [simulate_user(p, config, proposer, registry) for p in personas]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_run_one, [(p, config) for p in personas], chunksize=max(1, len(personas) // (jobs * 4))))


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True, separators=(",", ":"), ensure_ascii=False))
            fh.write("\n")


def run_dir_name(config: EngineConfig) -> str:
    return f"{config.config_hash()}-{config.seed}"


def run_corpus(personas: Sequence[AugmentedPersona], config: EngineConfig, out_dir: str | Path, jobs: int = 1,
               client=None) -> Path:
    """Simulate a corpus and write it under ``out_dir/<config-hash>-<seed>/``."""
    ids = [p.user_id for p in personas]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate user_id in persona list")
    t0 = _time.perf_counter()
    # Output is merged in canonical user_id order, whatever order workers finish in.
    traces = sorted(run_users(personas, config, jobs, client), key=lambda t: t.user_id)
    elapsed = _time.perf_counter() - t0
    run = Path(out_dir) / run_dir_name(config)
    run.mkdir(parents=True, exist_ok=True)

    _write_jsonl(run / "personas.jsonl", (augmented_to_dict(p) for p in personas))
    _write_jsonl(run / "events.jsonl", (export_row(t.user_id, e) for t in traces for e in t.events if e.kind in EXPORT_KINDS))
    _write_jsonl(run / "snapshots.jsonl", (s for t in traces for s in t.snapshots))
    _write_jsonl(run / "audit.jsonl", (r for t in traces for r in t.audit))
    files = {name: file_sha256(run / name) for name in ("personas.jsonl", "events.jsonl", "snapshots.jsonl", "audit.jsonl")}
    users = [{"user_id": t.user_id, "days": t.days, "termination": t.termination,
              "events": sum(1 for e in t.events if e.kind in EXPORT_KINDS),
              "illiquid_date": t.illiquid_date.isoformat() if t.illiquid_date else None,
              "final_state_hash": state_hash(t.final), **t.stats} for t in traces]
    body = {
        "format": 1,
        "version": __version__,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "n_users": len(traces),
        "n_illiquid": sum(1 for t in traces if t.termination == "illiquid"),
        "n_incomplete": sum(1 for t in traces if t.termination == "incomplete"),
        "n_events": sum(u["events"] for u in users),
        "illiquid_fraction": round(sum(1 for t in traces if t.termination == "illiquid") / max(1, len(traces)), 6),
        "reference_illiquid_fraction": 0.057,
        "files": files,
        "users": users,
    }
    body["manifest_hash"] = hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
    body["timing"] = {"seconds": round(elapsed, 3), "jobs": jobs, "pid": os.getpid()}
    (run / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    log.info("wrote %s (%d users, %.1fs)", run, len(traces), elapsed)
    return run


def load_run(run_dir: str | Path) -> dict[str, Any]:
    run = Path(run_dir)
    return json.loads((run / "manifest.json").read_text(encoding="utf-8"))
