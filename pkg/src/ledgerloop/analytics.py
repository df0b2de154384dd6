"""Corpus statistics: spend by persona and calendar groups, utilization, and a corpus summary.

Means, population standard deviations and quartiles are computed with exact
rational arithmetic on integer cents and only rounded to float at the end,
so results are bit-reproducible and independent of summation order.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from datetime import date, timedelta
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Sequence

from .audit import read_jsonl
from .dates import WEEKDAYS, is_holiday
from .money import to_cents
from .persona import ARCHETYPES, AugmentedPersona, archetype_key, parse_record

GROUP_KEYS = ("education_level", "car_ownership", "age_bucket", "spending_pattern", "month", "weekday", "holiday")
SPEND_KINDS = ("purchase", "subscription_charge", "recurring_bill")
AGE_BUCKETS = ("18-29", "30-39", "40-49", "50-59", "60-69", "70+")

# Corpus-level reference values reported for the large published corpus; printed for comparison only.
REFERENCE = {
    "events": {"daily transactions": 79.9, "payments": 6.2, "recurring subscriptions": 13.9},
    "users": {"illiquid_fraction": 5.7},
    "merchants": {"total": 74623, "freq_gt_1000": 809},
    "distributions": {
        "timespan per user (days)": (724.05, 366.11, 89, 367, 792, 1094, 1101),
        "#transactions per user": (1242.10, 642.16, 127, 629, 1347, 1824, 4024),
        "#transactions per month": (49.97, 12.14, 1, 44, 50, 57, 186),
        "transaction amounts": (66.24, 184.46, 0.00, 15.22, 25.67, 50.35, 32696.64),
        "transaction amounts per month": (3309.69, 1609.13, 0.69, 2257.34, 3024.83, 4107.03, 126576.50),
        "payment amounts": (978.74, 1189.40, 0.01, 200.00, 500.00, 1434.13, 34703.13),
    },
}


class UnknownGroupKey(ValueError):
    pass


# --------------------------------------------------------------------------
# exact descriptive statistics
# --------------------------------------------------------------------------


def exact_mean(values: Sequence[Fraction | int]) -> Fraction:
    if not values:
        raise ValueError("mean of no observations")
    return Fraction(sum(values)) / len(values)


def exact_pvariance(values: Sequence[Fraction | int]) -> Fraction:
    m = exact_mean(values)
    return sum((Fraction(v) - m) ** 2 for v in values) / len(values)


def exact_quantile(sorted_values: Sequence[Fraction | int], q: Fraction) -> Fraction:
    """Linear interpolation between order statistics at position ``(n-1)*q``."""
    n = len(sorted_values)
    pos = (n - 1) * Fraction(q)
    lo = math.floor(pos)
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return Fraction(sorted_values[lo]) + (Fraction(sorted_values[hi]) - Fraction(sorted_values[lo])) * frac


@dataclass(frozen=True)
class Describe:
    count: int
    mean: float
    std: float
    min: float
    q25: float
    q50: float
    q75: float
    max: float

    def row(self) -> tuple[float, ...]:
        return (self.mean, self.std, self.min, self.q25, self.q50, self.q75, self.max)


def describe(values: Sequence[Fraction | int], scale: int = 1) -> Describe:
    """Exact summary of ``values``; every figure is divided by ``scale`` (100 turns cents into dollars)."""
    vs = sorted(Fraction(v, scale) for v in values)
    if not vs:
        raise ValueError("describe() of no observations")
    q = [float(exact_quantile(vs, Fraction(k, 4))) for k in (1, 2, 3)]
    return Describe(len(vs), float(exact_mean(vs)), math.sqrt(exact_pvariance(vs)), float(vs[0]), *q, float(vs[-1]))


# --------------------------------------------------------------------------
# corpus access
# --------------------------------------------------------------------------


@dataclass
class RunData:
    events: list[dict[str, Any]]
    personas: dict[str, AugmentedPersona]
    snapshots: list[dict[str, Any]]
    manifest: dict[str, Any]


def load_run(run_dir: str | Path) -> RunData:
    run = Path(run_dir)
    personas = {}
    for i, rec in enumerate(read_jsonl(run / "personas.jsonl")):
        p, issues = parse_record(rec, i)
        if p is None:
            raise ValueError(f"personas.jsonl line {i + 1}: {issues}")
        personas[p.user_id] = p
    snaps = read_jsonl(run / "snapshots.jsonl") if (run / "snapshots.jsonl").exists() else []
    manifest = json.loads((run / "manifest.json").read_text(encoding="utf-8")) if (run / "manifest.json").exists() else {}
    return RunData(read_jsonl(run / "events.jsonl"), personas, snaps, manifest)


def is_spending(e: dict[str, Any]) -> bool:
    """Consumption: purchases, subscriptions and bills (interest and fees are not spending)."""
    if "kind" in e:
        return e["kind"] in SPEND_KINDS
    return e["merchant_type"] not in ("interest", "fee", "payment") and not str(e["amount"]).startswith("-")


def cents(e: dict[str, Any]) -> int:
    return to_cents(e["amount"])


def user_month_spend(events: Iterable[dict[str, Any]]) -> dict[tuple[str, str], int]:
    """Spend per (user, "YYYY-MM") for every month in which the user has any event."""
    out: dict[tuple[str, str], int] = {}
    for e in events:
        key = (e["user_id"], e["timestamp"][:7])
        out.setdefault(key, 0)
        if is_spending(e):
            out[key] += cents(e)
    return out


def user_day_spend(events: Sequence[dict[str, Any]]) -> dict[tuple[str, date], int]:
    """Spend per (user, day) over each user's active span, zero-spend days included."""
    span: dict[str, list[date]] = {}
    spend: dict[tuple[str, date], int] = defaultdict(int)
    for e in events:
        d = date.fromisoformat(e["timestamp"][:10])
        s = span.setdefault(e["user_id"], [d, d])
        s[0], s[1] = min(s[0], d), max(s[1], d)
        if is_spending(e):
            spend[(e["user_id"], d)] += cents(e)
    out = {}
    for uid, (a, b) in sorted(span.items()):
        d = a
        while d <= b:
            out[(uid, d)] = spend.get((uid, d), 0)
            d += timedelta(days=1)
    return out


def age_bucket(age: int | None) -> str:
    if age is None:
        return "unknown"
    if age < 30:
        return "18-29"
    if age >= 70:
        return "70+"
    lo = age // 10 * 10
    return f"{lo}-{lo + 9}"


def _persona_key(p: AugmentedPersona, key: str) -> str:
    if key == "education_level":
        return p.user_persona.education_level
    if key == "car_ownership":
        return p.user_financial_profile.car_ownership
    if key == "age_bucket":
        return age_bucket(p.user_persona.age)
    return archetype_key(p.user_financial_profile.spending_patterns)


def _group_order(key: str, groups: Iterable[str]) -> list[str]:
    gs = set(groups)
    if key == "spending_pattern":
        return [a for a in ARCHETYPES if a in gs] + sorted(gs - set(ARCHETYPES))
    if key == "age_bucket":
        return [a for a in AGE_BUCKETS if a in gs] + sorted(gs - set(AGE_BUCKETS))
    if key == "weekday":
        return [w for w in WEEKDAYS if w in gs]
    if key == "month":
        return sorted(gs, key=int)
    return sorted(gs)


def group_stats(events: Sequence[dict[str, Any]], personas: dict[str, AugmentedPersona], key: str) -> list[dict[str, Any]]:
    """Mean/std/count of spend per group, in dollars.

    Persona keys and ``month`` group user-month spend; ``weekday`` and
    ``holiday`` group user-day spend.
    """
    if key not in GROUP_KEYS:
        raise UnknownGroupKey(f"unknown group key {key!r}; choose from {', '.join(GROUP_KEYS)}")
    obs: dict[str, list[int]] = defaultdict(list)
    if key in ("weekday", "holiday"):
        for (uid, d), v in user_day_spend(events).items():
            g = WEEKDAYS[d.weekday()] if key == "weekday" else ("holiday" if is_holiday(d) else "non-holiday")
            obs[g].append(v)
    else:
        for (uid, ym), v in user_month_spend(events).items():
            if key == "month":
                g = str(int(ym[5:7]))
            else:
                p = personas.get(uid)
                if p is None:
                    continue
                g = _persona_key(p, key)
            obs[g].append(v)
    rows = []
    for g in _group_order(key, obs):
        vs = [Fraction(v, 100) for v in obs[g]]
        rows.append({"key": key, "group": g, "count": len(vs), "mean": float(exact_mean(vs)),
                     "std": math.sqrt(exact_pvariance(vs))})
    return rows


def credit_utilization_series(snapshots: Iterable[dict[str, Any]], user_id: str | None = None) -> list[tuple[date, float]]:
    """One (date, balance / limit) point per simulated day, from end-of-day snapshots."""
    out = []
    for s in snapshots:
        if s.get("kind", "daily") != "daily" or (user_id is not None and s["user_id"] != user_id):
            continue
        if s["credit_limit"] <= 0:
            raise ValueError("credit limit must be positive")
        out.append((date.fromisoformat(s["date"]), float(Fraction(s["credit_balance"], s["credit_limit"]))))
    return out


def utilization_variance(snapshots: Sequence[dict[str, Any]]) -> dict[str, float]:
    by_user: dict[str, list[Fraction]] = defaultdict(list)
    for s in snapshots:
        if s.get("kind") == "daily":
            by_user[s["user_id"]].append(Fraction(s["credit_balance"], s["credit_limit"]))
    return {u: float(exact_pvariance(v)) for u, v in sorted(by_user.items())}


def merchant_coverage(events: Iterable[dict[str, Any]], threshold: int) -> dict[str, int]:
    names = Counter(e["merchant_name"] for e in events)
    return {"total": len(names), "above_threshold": sum(1 for c in names.values() if c > threshold),
            "threshold": threshold}


def summary(data: RunData, merchant_threshold: int = 100) -> dict[str, Any]:
    """Corpus overview: event mix, merchants, users, and distribution rows."""
    ev = data.events
    n = len(ev)
    mix = Counter()
    for e in ev:
        a = cents(e)
        if a < 0:
            mix["payments"] += 1
        elif e.get("kind") in ("subscription_charge", "recurring_bill"):
            mix["recurring subscriptions"] += 1
        elif e.get("kind") in ("interest", "fee"):
            mix["interest and fees"] += 1
        else:
            mix["daily transactions"] += 1
    kinds = {k: {"count": mix[k], "percent": 100.0 * mix[k] / n if n else 0.0}
             for k in ("daily transactions", "payments", "recurring subscriptions", "interest and fees")}

    users_meta = data.manifest.get("users", [])
    term = Counter(u.get("termination", "horizon_reached") for u in users_meta)
    users = {"normal": term["horizon_reached"], "illiquid": term["illiquid"], "incomplete": term["incomplete"],
             "total": len(users_meta)}

    per_user = Counter(e["user_id"] for e in ev)
    per_month = Counter((e["user_id"], e["timestamp"][:7]) for e in ev)
    month_amount: dict[tuple[str, str], int] = defaultdict(int)
    for e in ev:
        a = cents(e)
        if a > 0:
            month_amount[(e["user_id"], e["timestamp"][:7])] += a
    dists: dict[str, Describe] = {}
    if users_meta:
        dists["timespan per user (days)"] = describe([u["days"] for u in users_meta])
    if per_user:
        dists["#transactions per user"] = describe(list(per_user.values()))
        dists["#transactions per month"] = describe(list(per_month.values()))
    pos = [cents(e) for e in ev if cents(e) > 0]
    neg = [-cents(e) for e in ev if cents(e) < 0]
    if pos:
        dists["transaction amounts"] = describe(pos, 100)
        dists["transaction amounts per month"] = describe(list(month_amount.values()), 100)
    if neg:
        dists["payment amounts"] = describe(neg, 100)
    return {
        "events": {"total": n, "kinds": kinds},
        "merchants": merchant_coverage(ev, merchant_threshold),
        "users": users,
        "distributions": dists,
        "reference": REFERENCE,
    }


def format_summary(s: dict[str, Any]) -> str:
    lines = [f"events: {s['events']['total']}"]
    for k, v in s["events"]["kinds"].items():
        ref = REFERENCE["events"].get(k)
        lines.append(f"  {k:<26}{v['count']:>10} ({v['percent']:5.1f}%)" + (f"   reference {ref}%" if ref is not None else ""))
    m = s["merchants"]
    lines.append(f"merchant names: {m['total']} total, {m['above_threshold']} with frequency > {m['threshold']}"
                 f"   reference {REFERENCE['merchants']['total']} total, {REFERENCE['merchants']['freq_gt_1000']} > 1000")
    u = s["users"]
    frac = 100.0 * u["illiquid"] / u["total"] if u["total"] else 0.0
    lines.append(f"users: {u['normal']} normal, {u['illiquid']} illiquid ({frac:.1f}%), {u['incomplete']} incomplete"
                 f"   reference illiquid {REFERENCE['users']['illiquid_fraction']}%")
    lines.append(f"{'':<32}{'mean':>10}{'std':>10}{'min':>10}{'25%':>10}{'50%':>10}{'75%':>10}{'max':>11}")
    for name, d in s["distributions"].items():
        lines.append(f"{name:<32}" + "".join(f"{x:>10.2f}" for x in d.row()[:-1]) + f"{d.max:>11.2f}")
        ref = REFERENCE["distributions"].get(name)
        if ref:
            lines.append(f"{'  reference':<32}" + "".join(f"{x:>10.2f}" for x in ref[:-1]) + f"{ref[-1]:>11.2f}")
    return "\n".join(lines)


def rows_to_csv(rows: Sequence[dict[str, Any]]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def write_stats(data: RunData, out_dir: str | Path, merchant_threshold: int = 100) -> dict[str, Any]:
    """Write one CSV per group key, utilization series, and summary.txt; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for key in GROUP_KEYS:
        (out / f"group_{key}.csv").write_text(rows_to_csv(group_stats(data.events, data.personas, key)), encoding="utf-8")
    util_rows = [{"user_id": s["user_id"], "date": s["date"],
                  "utilization": float(Fraction(s["credit_balance"], s["credit_limit"]))}
                 for s in data.snapshots if s.get("kind") == "daily"]
    (out / "utilization.csv").write_text(rows_to_csv(util_rows), encoding="utf-8")
    s = summary(data, merchant_threshold)
    dist_rows = [{"statistic": k, "count": d.count, "mean": d.mean, "std": d.std, "min": d.min, "q25": d.q25,
                  "q50": d.q50, "q75": d.q75, "max": d.max} for k, d in s["distributions"].items()]
    (out / "distributions.csv").write_text(rows_to_csv(dist_rows), encoding="utf-8")
    (out / "summary.txt").write_text(format_summary(s) + "\n", encoding="utf-8")
    return s
