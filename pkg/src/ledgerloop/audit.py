"""Hash-chained audit log, deterministic replay, and run verification.

Each user has an independent chain. A record's ``hash`` covers the previous
record's hash and the canonical JSON of its own body, so any edit, deletion
or reordering breaks every later link.

Record kinds:

``PROMPT``       digest of the prompt sent for one attempt
``PLAN``         the drafts returned by the proposal source (or why none came back)
``CHECK``        one rule's verdict (pass/fail) on one attempt
``REJECTION``    an attempt refused because a blocking rule failed
``DROPPED``      a draft removed after the repair budget ran out
``TRANSITION``   a state change: an accepted event, or an ``op`` such as
                 ``init``, ``advance_day`` or ``roll_statement``
``TERMINATION``  the user was marked illiquid

TRANSITION and TERMINATION carry ``pre_hash`` and ``post_hash``; each
``pre_hash`` equals the previous state-changing record's ``post_hash``.
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Iterable

from .ledger import (
    CHARGE_KINDS,
    EXPORT_KINDS,
    LedgerState,
    TransactionEvent,
    advance_day,
    apply_event,
    check_event,
    roll_statement,
    state_hash,
    terminate,
)

GENESIS = "0" * 16
RECORD_KINDS = ("PROMPT", "PLAN", "CHECK", "REJECTION", "DROPPED", "TRANSITION", "TERMINATION")
STATE_CHANGING = ("TRANSITION", "TERMINATION")


def _canon(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def link_hash(prev: str, body: dict[str, Any]) -> str:
    return hashlib.blake2b(prev.encode() + b"\x00" + _canon(body), digest_size=8).hexdigest()


def _body(rec: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in rec.items() if k not in ("prev", "hash")}


class AuditLog:
    """Append-only per-user chain held in memory as plain dicts."""

    def __init__(self, user_id: str):
        self.user_id = user_id
        self.records: list[dict[str, Any]] = []
        self._prev = GENESIS

    def append(self, kind: str, **body: Any) -> dict[str, Any]:
        if kind not in RECORD_KINDS:
            raise ValueError(f"unknown audit record kind {kind!r}")
        rec = {"user_id": self.user_id, "i": len(self.records), "kind": kind, **body}
        rec["prev"] = self._prev
        rec["hash"] = link_hash(self._prev, _body(rec))
        self._prev = rec["hash"]
        self.records.append(rec)
        return rec


def rechain(records: list[dict[str, Any]]) -> list[dict[str, Any]]:
    """Recompute ``i``/``prev``/``hash`` for one user's records (used to build mutation fixtures)."""
    out, prev = [], GENESIS
    for k, r in enumerate(records):
        r = {**_body(r), "i": k}
        r["prev"] = prev
        r["hash"] = prev = link_hash(prev, _body(r))
        out.append(r)
    return out


class ReplayDivergence(RuntimeError):
    def __init__(self, user_id: str | None, index: int, detail: str):
        super().__init__(f"user {user_id}: replay diverged at audit record {index} ({detail})")
        self.user_id = user_id
        self.index = index


def apply_op(state: LedgerState | None, op: dict[str, Any]) -> LedgerState:
    name = op["op"]
    if name == "init":
        return LedgerState.from_dict(op["state"])
    if state is None:
        raise ValueError(f"op {name!r} before init")
    if name == "advance_day":
        return advance_day(state, date.fromisoformat(op["date"]))
    if name == "roll_statement":
        return roll_statement(state, date.fromisoformat(op["date"]), op["grace_days"], op["min_fraction"])
    if name == "terminate":
        return terminate(state)
    raise ValueError(f"unknown transition op {name!r}")


def replay(records: Iterable[dict[str, Any]], initial: LedgerState | None = None) -> LedgerState | None:
    """Re-apply one user's state-changing records; every hash link is checked.

    Accepted events go back through :func:`ledger.apply_event`, so an event
    that breaks an invariant is reported as a divergence too.
    """
    state = initial
    last_post = state_hash(initial) if initial is not None else None
    for rec in records:
        if rec["kind"] not in STATE_CHANGING:
            continue
        i, uid = rec["i"], rec.get("user_id")
        if last_post is not None and rec.get("pre_hash") != last_post:
            raise ReplayDivergence(uid, i, "pre-hash does not match the previous post-hash")
        try:
            if "event" in rec:
                ev = TransactionEvent.from_dict(rec["event"])
                if state is None:
                    raise ValueError("event before init")
                problems = check_event(state, ev)
                if problems:
                    raise ReplayDivergence(uid, i, "invariant violated: " + ",".join(v.code for v in problems))
                state = apply_event(state, ev)
            else:
                state = apply_op(state, rec["op"])
        except ReplayDivergence:
            raise
        except Exception as exc:  # malformed payloads surface as a divergence at this index
            raise ReplayDivergence(uid, i, f"{type(exc).__name__}: {exc}") from exc
        got = state_hash(state)
        if got != rec.get("post_hash"):
            raise ReplayDivergence(uid, i, f"post-hash expected {rec.get('post_hash')}, got {got}")
        last_post = got
    return state


@dataclass
class Finding:
    check: str
    user_id: str | None
    message: str

    def __str__(self) -> str:
        who = f" [{self.user_id}]" if self.user_id else ""
        return f"{self.check}{who}: {self.message}"


@dataclass
class Report:
    users: int = 0
    records: int = 0
    transitions: int = 0
    events: int = 0
    checks_failed_accepted: int = 0
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def summary(self) -> str:
        head = (f"{'OK' if self.ok else 'FAILED'}: {self.users} users, {self.records} audit records, "
                f"{self.transitions} transitions, {self.events} exported events, {len(self.findings)} finding(s)")
        return "\n".join([head] + [f"  {f}" for f in self.findings[:50]])


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def check_chain(records: list[dict[str, Any]], report: Report) -> bool:
    prev = GENESIS
    for k, rec in enumerate(records):
        if rec.get("i") != k or rec.get("prev") != prev or link_hash(prev, _body(rec)) != rec.get("hash"):
            report.findings.append(Finding("chain", rec.get("user_id"), f"hash chain broken at record {k}"))
            return False
        prev = rec["hash"]
    return True


def check_identities(records: list[dict[str, Any]], report: Report) -> None:
    """Re-derive both accounting identities and the balance bound from the event transitions alone."""
    acc = None
    for rec in records:
        if rec["kind"] != "TRANSITION":
            continue
        if "op" in rec and rec["op"]["op"] == "init":
            st = rec["op"]["state"]
            acc = {"cash": st["cash"], "bal": st["credit_balance"], "limit": st["credit_limit"]}
            continue
        if "event" not in rec or acc is None:
            continue
        e = rec["event"]
        amt, kind = e["amount"], e["kind"]
        if kind in CHARGE_KINDS:
            acc["bal"] += amt
        elif kind == "payment":
            acc["cash"] += amt
            acc["bal"] += amt
        elif kind == "income_deposit":
            acc["cash"] += amt
        post = rec["post"]
        if post["cash"] != acc["cash"] or post["credit_balance"] != acc["bal"]:
            report.findings.append(Finding("identity", rec["user_id"], f"cash/credit identity broken at record {rec['i']}"))
            return
        if not 0 <= acc["bal"] <= acc["limit"]:
            report.findings.append(Finding("invariant", rec["user_id"],
                                           f"balance {acc['bal']} outside [0, {acc['limit']}] at record {rec['i']}"))
            return


def verify_records(records: list[dict[str, Any]], exported: list[dict[str, Any]] | None = None,
                   final_hashes: dict[str, str] | None = None) -> Report:
    """Chain integrity, replay, identities, and audit/export agreement."""
    report = Report(records=len(records))
    by_user: dict[str, list[dict[str, Any]]] = defaultdict(list)
    for r in records:
        by_user[r["user_id"]].append(r)
    report.users = len(by_user)
    audited: dict[tuple[str, int], dict[str, Any]] = {}
    for uid, recs in by_user.items():
        report.transitions += sum(1 for r in recs if r["kind"] in STATE_CHANGING)
        if not check_chain(recs, report):
            continue
        check_identities(recs, report)
        try:
            final = replay(recs)
        except ReplayDivergence as exc:
            kind = "invariant" if "invariant violated" in str(exc) else "replay"
            if kind == "invariant":
                report.checks_failed_accepted += 1
            report.findings.append(Finding(kind, uid, str(exc)))
            continue
        if final_hashes is not None and uid in final_hashes and final is not None:
            if state_hash(final) != final_hashes[uid]:
                report.findings.append(Finding("snapshot", uid, "recorded final state hash differs from replay"))
        for r in recs:
            if r["kind"] == "TRANSITION" and "event" in r and r["event"]["kind"] in EXPORT_KINDS:
                audited[(uid, r["event"]["seq"])] = r["event"]

    if exported is not None:
        report.events = len(exported)
        seen = set()
        for e in exported:
            key = (e["user_id"], e["seq"])
            seen.add(key)
            ev = audited.get(key)
            if ev is None:
                report.findings.append(Finding("export", e["user_id"], f"exported event seq {e['seq']} has no TRANSITION"))
            elif ev["timestamp"] != e["timestamp"] or ev["merchant_name"] != e["merchant_name"]:
                report.findings.append(Finding("export", e["user_id"], f"exported event seq {e['seq']} differs from its TRANSITION"))
        for key in sorted(set(audited) - seen):
            report.findings.append(Finding("export", key[0], f"TRANSITION for event seq {key[1]} missing from the export"))
    return report


def verify(run_dir: str | Path) -> Report:
    """Verify a run directory: manifest file digests plus :func:`verify_records`."""
    run = Path(run_dir)
    findings = []
    manifest: dict[str, Any] = {}
    manifest_path = run / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    else:
        findings.append(Finding("manifest", None, "manifest.json missing"))
    for name, digest in manifest.get("files", {}).items():
        p = run / name
        if not p.exists():
            findings.append(Finding("manifest", None, f"{name} missing"))
        elif file_sha256(p) != digest:
            findings.append(Finding("manifest", None, f"{name} sha256 differs from the manifest"))
    records = read_jsonl(run / "audit.jsonl") if (run / "audit.jsonl").exists() else []
    exported = read_jsonl(run / "events.jsonl") if (run / "events.jsonl").exists() else []
    finals = {}
    snap_path = run / "snapshots.jsonl"
    if snap_path.exists():
        for s in read_jsonl(snap_path):
            if s.get("kind") == "final":
                finals[s["user_id"]] = s["state_hash"]
    report = verify_records(records, exported, finals)
    report.findings = findings + report.findings
    return report
