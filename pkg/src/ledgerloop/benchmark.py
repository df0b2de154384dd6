"""Downstream tasks built from a generated corpus, plus the per-event feature encoding.

Two tasks:

* illiquidity: given an n-month window of a user's transactions, predict
  whether the user turns illiquid within ``horizon_days`` after the window;
* identity theft: one day of another user's transactions is spliced into a
  window and every event carries a fraud bit.

Events inside examples carry only the public fields (timestamp, merchant
name and type, card-present flag, signed amount).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from decimal import Decimal
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .audit import read_jsonl
from .dates import shift_months

PUBLIC_FIELDS = ("timestamp", "merchant_name", "merchant_type", "card_present_or_not", "amount")
FULL_SCALE_VOCAB_THRESHOLD = 5000  # for corpora of tens of millions of events
DESK_VOCAB_THRESHOLD = 50


class InjectionInfeasible(ValueError):
    pass


class SplitError(ValueError):
    pass


# --------------------------------------------------------------------------
# corpus view
# --------------------------------------------------------------------------


@dataclass
class CorpusUser:
    user_id: str
    start: date
    last_day: date
    termination: str
    illiquid_date: date | None
    events: list[dict[str, Any]] = field(default_factory=list)

    def event_date(self, e: dict[str, Any]) -> date:
        return date.fromisoformat(e["timestamp"][:10])


@dataclass
class Corpus:
    users: dict[str, CorpusUser]

    def __len__(self) -> int:
        return len(self.users)

    def ordered(self) -> list[CorpusUser]:
        return [self.users[k] for k in sorted(self.users)]


def public(e: dict[str, Any]) -> dict[str, Any]:
    return {k: e[k] for k in PUBLIC_FIELDS}


def load_corpus(run_dir: str | Path) -> Corpus:
    run = Path(run_dir)
    manifest = json.loads((run / "manifest.json").read_text(encoding="utf-8"))
    start = date.fromisoformat(manifest["config"]["start_date"])
    users: dict[str, CorpusUser] = {}
    for u in manifest["users"]:
        ill = date.fromisoformat(u["illiquid_date"]) if u.get("illiquid_date") else None
        users[u["user_id"]] = CorpusUser(u["user_id"], start, start + timedelta(days=u["days"] - 1),
                                          u.get("termination", "illiquid" if ill else "horizon_reached"), ill)
    for e in read_jsonl(run / "events.jsonl"):
        users[e["user_id"]].events.append(public(e))
    return Corpus(users)


def corpus_from_traces(traces: Sequence[Any], start: date) -> Corpus:
    """Build a corpus view straight from engine traces (no files involved)."""
    from .engine import export_row
    from .ledger import EXPORT_KINDS

    users = {}
    for t in traces:
        evs = [public(export_row(t.user_id, e)) for e in t.events if e.kind in EXPORT_KINDS]
        users[t.user_id] = CorpusUser(t.user_id, start, start + timedelta(days=t.days - 1),
                                      getattr(t, "termination", "illiquid" if t.illiquid_date else "horizon_reached"),
                                      t.illiquid_date, evs)
    return Corpus(users)


# --------------------------------------------------------------------------
# examples
# --------------------------------------------------------------------------


@dataclass
class TaskExample:
    example_id: str
    task: str  # "illiquidity" | "theft"
    user_id: str
    n_months: int
    window_start: date
    window_end: date  # exclusive
    events: list[dict[str, Any]]
    label: int | None = None
    labels: list[int] | None = None
    donor_user_id: str | None = None
    target_day: date | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k in ("window_start", "window_end", "target_day"):
            d[k] = d[k].isoformat() if d[k] else None
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TaskExample":
        d = dict(d)
        for k in ("window_start", "window_end", "target_day"):
            d[k] = date.fromisoformat(d[k]) if d.get(k) else None
        return cls(**d)


def write_task(path: str | Path, examples: Iterable[TaskExample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_task(path: str | Path) -> list[TaskExample]:
    return [TaskExample.from_dict(d) for d in read_jsonl(Path(path))]


def window_events(user: CorpusUser, start: date, end: date) -> list[dict[str, Any]]:
    lo, hi = start.isoformat(), end.isoformat()
    return [e for e in user.events if lo <= e["timestamp"][:10] < hi]


def window_starts(user: CorpusUser, n_months: int, stride_days: int | None = None) -> list[tuple[date, date]]:
    """Windows ``[start, start + n calendar months)`` that end inside the observed trace.

    Successive starts move by one calendar month, or by ``stride_days`` if given.
    """
    out = []
    k, ws = 0, user.start
    while True:
        we = shift_months(ws, n_months)
        if we > user.last_day + timedelta(days=1):
            return out
        out.append((ws, we))
        k += 1
        ws = shift_months(user.start, k) if stride_days is None else user.start + timedelta(days=stride_days * k)


def illiquidity_label(illiquid_date: date | None, window_end: date, horizon_days: int | None) -> int:
    if illiquid_date is None or illiquid_date < window_end:
        return 0
    if horizon_days is None:
        return 1
    return int(illiquid_date < window_end + timedelta(days=horizon_days))


def build_illiquidity_examples(corpus: Corpus, n_months: int, horizon_days: int | None = None,
                               stride_days: int | None = None, report: dict[str, Any] | None = None) -> list[TaskExample]:
    """Slide n-month windows over each trace; label 1 iff illiquidity follows within the horizon.

    ``horizon_days=None`` means "at any later point in the trace". Windows that
    contain the illiquid date itself are left out.
    """
    if n_months < 1:
        raise ValueError("n_months must be >= 1")
    out: list[TaskExample] = []
    skipped = []
    for user in corpus.ordered():
        wins = [(ws, we) for ws, we in window_starts(user, n_months, stride_days)
                if user.illiquid_date is None or user.illiquid_date >= we]
        if not wins:
            skipped.append(user.user_id)
            continue
        for ws, we in wins:
            out.append(TaskExample(
                f"illiquidity:{user.user_id}:{ws.isoformat()}", "illiquidity", user.user_id, n_months, ws, we,
                window_events(user, ws, we), label=illiquidity_label(user.illiquid_date, we, horizon_days)))
    if report is not None:
        report.update(skipped_users=skipped, examples=len(out), positives=sum(e.label for e in out))
    return out


def redate(ts: str, day: date) -> str:
    return day.isoformat() + ts[10:]


def inject_identity_theft(primary: CorpusUser, donor: CorpusUser, n_months: int, rng: np.random.Generator,
                          window_start: date | None = None) -> TaskExample:
    """Splice one day of ``donor`` activity into a window of ``primary``.

    The target day is uniform over the window; the donor day is uniform over
    the donor's days in the same window that have at least one event. Donor
    events keep their times of day and their order; on equal timestamps they
    sort after the primary's events.
    """
    if donor.user_id == primary.user_id:
        raise InjectionInfeasible("donor must differ from primary")
    ws = window_start or primary.start
    we = shift_months(ws, n_months)
    if we > primary.last_day + timedelta(days=1):
        raise InjectionInfeasible(f"primary {primary.user_id} does not cover {ws}..{we}")
    base = window_events(primary, ws, we)
    donor_days = sorted({e["timestamp"][:10] for e in window_events(donor, ws, we)})
    if not donor_days:
        raise InjectionInfeasible(f"donor {donor.user_id} has no events in {ws}..{we}")
    n_days = (we - ws).days
    target = ws + timedelta(days=int(rng.integers(n_days)))
    dday = donor_days[int(rng.integers(len(donor_days)))]
    injected = [{**e, "timestamp": redate(e["timestamp"], target)} for e in donor.events if e["timestamp"][:10] == dday]
    tagged = [(e["timestamp"], 0, i, e) for i, e in enumerate(base)] + [(e["timestamp"], 1, i, e) for i, e in enumerate(injected)]
    tagged.sort(key=lambda t: (t[0], t[1], t[2]))
    return TaskExample(
        f"theft:{primary.user_id}:{ws.isoformat()}:{donor.user_id}:{dday}->{target.isoformat()}", "theft",
        primary.user_id, n_months, ws, we, [t[3] for t in tagged], labels=[t[1] for t in tagged],
        donor_user_id=donor.user_id, target_day=target)


def strip_injected(example: TaskExample) -> list[dict[str, Any]]:
    return [e for e, bit in zip(example.events, example.labels or []) if not bit]


def build_theft_examples(corpus: Corpus, n_months: int, n_examples: int, seed: int = 0,
                         max_tries: int = 20) -> list[TaskExample]:
    """Draw (primary window, donor) pairs uniformly and inject; infeasible draws are redrawn."""
    users = corpus.ordered()
    if len(users) < 2:
        raise InjectionInfeasible("need at least two users")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x7E4F7])))
    wins = {u.user_id: window_starts(u, n_months) for u in users}
    eligible = [u for u in users if wins[u.user_id]]
    if not eligible:
        raise InjectionInfeasible(f"no trace spans {n_months} months")
    out = []
    for _ in range(n_examples):
        for _try in range(max_tries):
            p = eligible[int(rng.integers(len(eligible)))]
            d = users[int(rng.integers(len(users)))]
            if d.user_id == p.user_id:
                continue
            ws, _we = wins[p.user_id][int(rng.integers(len(wins[p.user_id])))]
            try:
                out.append(inject_identity_theft(p, d, n_months, rng, ws))
                break
            except InjectionInfeasible:
                continue
        else:
            raise InjectionInfeasible(f"no feasible injection after {max_tries} draws")
    return out


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


def _allocate(n: int, ratios: dict[str, float]) -> dict[str, int]:
    """Largest-remainder allocation of ``n`` users; ties go to the earlier split name."""
    raw = {k: n * r for k, r in ratios.items()}
    counts = {k: int(math.floor(v)) for k, v in raw.items()}
    rest = n - sum(counts.values())
    order = sorted(ratios, key=lambda k: (-(raw[k] - counts[k]), list(ratios).index(k)))
    for k in order[:rest]:
        counts[k] += 1
    return counts


def split(examples: Sequence[TaskExample], ratios: dict[str, float] | None = None, seed: int = 0) -> dict[str, list[TaskExample]]:
    """Split by user so no user contributes to two splits; deterministic under ``seed``."""
    ratios = ratios or {"train": 0.8, "test": 0.2}
    if abs(sum(ratios.values()) - 1.0) > 1e-9 or any(r < 0 for r in ratios.values()):
        raise SplitError(f"ratios must be non-negative and sum to 1, got {ratios}")
    users = sorted({e.user_id for e in examples})
    counts = _allocate(len(users), ratios)
    short = [k for k, r in ratios.items() if r > 0 and counts[k] == 0]
    if short:
        raise SplitError(f"too few users ({len(users)}) for ratios {ratios}: {short} would be empty")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5B117])))
    perm = [users[i] for i in rng.permutation(len(users))]
    assign, pos = {}, 0
    for k in ratios:
        for u in perm[pos:pos + counts[k]]:
            assign[u] = k
        pos += counts[k]
    out: dict[str, list[TaskExample]] = {k: [] for k in ratios}
    for e in examples:
        out[assign[e.user_id]].append(e)
    return out


def positive_rate(examples: Sequence[TaskExample]) -> float:
    """Share of positive examples (illiquidity) or of positive events (theft)."""
    if not examples:
        return 0.0
    if examples[0].task == "theft":
        bits = [b for e in examples for b in (e.labels or [])]
        return sum(bits) / len(bits) if bits else 0.0
    return sum(e.label or 0 for e in examples) / len(examples)


# --------------------------------------------------------------------------
# vocabulary and encoding
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocab:
    names: dict[str, int]
    types: dict[str, int]
    threshold: int

    @property
    def name_unknown(self) -> int:
        return len(self.names)

    @property
    def type_unknown(self) -> int:
        return len(self.types)

    @property
    def name_dim(self) -> int:
        return len(self.names) + 1

    @property
    def type_dim(self) -> int:
        return len(self.types) + 1

    @property
    def dim(self) -> int:
        return self.name_dim + self.type_dim + 2

    def to_dict(self) -> dict[str, Any]:
        return {"threshold": self.threshold,
                "names": sorted(self.names, key=self.names.get),
                "types": sorted(self.types, key=self.types.get),
                "dims": {"names": self.name_dim, "types": self.type_dim, "card_present": 1, "sgn_log_amount": 1,
                         "total": self.dim}}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Vocab":
        return cls({n: i for i, n in enumerate(d["names"])}, {t: i for i, t in enumerate(d["types"])}, d["threshold"])


def _index(counts: Counter, threshold: int) -> dict[str, int]:
    kept = sorted((k for k, c in counts.items() if c > threshold), key=lambda k: (-counts[k], k))
    return {k: i for i, k in enumerate(kept)}


def build_vocab(train_events: Iterable[dict[str, Any]], threshold: int = DESK_VOCAB_THRESHOLD) -> Vocab:
    """Index categories seen more than ``threshold`` times; most frequent first, ties lexicographic."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    names, types = Counter(), Counter()
    for e in train_events:
        names[e["merchant_name"]] += 1
        types[e["merchant_type"]] += 1
    return Vocab(_index(names, threshold), _index(types, threshold), threshold)


def sgn_log(amount: str | int | float | Decimal) -> float:
    """sign(a) * ln(1 + |a|) on the dollar amount, in binary floating point."""
    x = float(Decimal(str(amount)))
    if x == 0:
        return 0.0
    return math.copysign(math.log1p(abs(x)), x)


def encode_event(event: dict[str, Any], vocab: Vocab, dtype=np.float64) -> np.ndarray:
    row = np.zeros(vocab.dim, dtype=dtype)
    _fill(row, event, vocab)
    return row


def _fill(row: np.ndarray, event: dict[str, Any], vocab: Vocab) -> None:
    row[vocab.names.get(event["merchant_name"], vocab.name_unknown)] = 1
    row[vocab.name_dim + vocab.types.get(event["merchant_type"], vocab.type_unknown)] = 1
    row[vocab.name_dim + vocab.type_dim] = 1.0 if event["card_present_or_not"] else 0.0
    row[vocab.dim - 1] = sgn_log(event["amount"])


def encode_examples(examples: Sequence[TaskExample], vocab: Vocab, path: str | Path | None = None,
                    dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Dense feature rows for every event of every example, plus example offsets.

    Rows of example ``k`` are ``X[offsets[k]:offsets[k+1]]``. With ``path`` the
    matrix is written as ``.npy`` through a memory map instead of held in RAM.
    """
    sizes = [len(e.events) for e in examples]
    offsets = np.zeros(len(examples) + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    shape = (int(offsets[-1]), vocab.dim)
    if path is None:
        X = np.zeros(shape, dtype=dtype)
    else:
        X = np.lib.format.open_memmap(str(path), mode="w+", dtype=dtype, shape=shape)
    r = 0
    for ex in examples:
        for e in ex.events:
            _fill(X[r], e, vocab)
            r += 1
    if path is not None:
        X.flush()
    return X, offsets


def encode_task(task_path: str | Path, out_dir: str | Path, threshold: int = DESK_VOCAB_THRESHOLD,
                ratios: dict[str, float] | None = None, seed: int = 0) -> dict[str, Any]:
    """Split a task file by user, build the vocabulary on the training split only, and encode every split."""
    examples = read_task(task_path)
    splits = split(examples, ratios, seed)
    train_key = "train" if "train" in splits else next(iter(splits))
    vocab = build_vocab((e for ex in splits[train_key] for e in ex.events), threshold)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header: dict[str, Any] = {"format": 1, "dtype": "float32", "vocab": vocab.to_dict(), "vocab_split": train_key,
                              "seed": seed, "splits": {}}
    for name, exs in splits.items():
        _X, offsets = encode_examples(exs, vocab, out / f"{name}.npy")
        header["splits"][name] = {
            "file": f"{name}.npy",
            "rows": int(offsets[-1]),
            "examples": len(exs),
            "users": len({e.user_id for e in exs}),
            "example_ids": [e.example_id for e in exs],
            "offsets": offsets.tolist(),
            "labels": [e.label for e in exs] if exs and exs[0].task == "illiquidity" else [e.labels for e in exs],
            "positive_rate": positive_rate(exs),
        }
    (out / "header.json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return header
