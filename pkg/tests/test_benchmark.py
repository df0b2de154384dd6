import json
import math
from datetime import date, timedelta

import numpy as np
import pytest
from mpmath import mp

from ledgerloop.benchmark import (
    PUBLIC_FIELDS,
    Corpus,
    CorpusUser,
    InjectionInfeasible,
    SplitError,
    TaskExample,
    Vocab,
    build_illiquidity_examples,
    build_theft_examples,
    build_vocab,
    encode_event,
    encode_examples,
    encode_task,
    illiquidity_label,
    inject_identity_theft,
    load_corpus,
    positive_rate,
    read_task,
    sgn_log,
    split,
    strip_injected,
    window_starts,
    write_task,
)

S = date(2024, 1, 1)


def _e(day, hh=10, name="Shop", mtype="retail", amount="5.00", card=True):
    return {"timestamp": f"{day.isoformat()}T{hh:02d}:00:00Z", "merchant_name": name, "merchant_type": mtype,
            "card_present_or_not": card, "amount": amount}


def _user(uid, days, illiquid=None, every=3, **kw):
    evs = [_e(S + timedelta(days=k), **kw) for k in range(0, days, every)]
    return CorpusUser(uid, S, S + timedelta(days=days - 1), "illiquid" if illiquid else "horizon_reached",
                      illiquid, evs)


def test_window_starts_calendar_months():
    u = _user("a", 182)  # Jan 1 .. Jun 30
    wins = window_starts(u, 2)
    assert wins[0] == (S, date(2024, 3, 1))
    assert wins[-1] == (date(2024, 5, 1), date(2024, 7, 1))
    assert len(wins) == 5
    assert window_starts(u, 7) == []
    assert window_starts(u, 2, stride_days=10)[1][0] == date(2024, 1, 11)


@pytest.mark.parametrize("ill,end,h,label", [
    (None, date(2024, 3, 1), 30, 0),
    (date(2024, 2, 20), date(2024, 3, 1), 30, 0),
    (date(2024, 3, 1), date(2024, 3, 1), 30, 1),
    (date(2024, 3, 30), date(2024, 3, 1), 30, 1),
    (date(2024, 3, 31), date(2024, 3, 1), 30, 0),
    (date(2025, 1, 1), date(2024, 3, 1), None, 1),
])
def test_illiquidity_label(ill, end, h, label):
    assert illiquidity_label(ill, end, h) == label


def test_illiquidity_examples_exclude_windows_containing_the_event():
    corpus = Corpus({"a": _user("a", 120, illiquid=date(2024, 3, 10)), "b": _user("b", 120)})
    rep = {}
    ex = build_illiquidity_examples(corpus, 1, horizon_days=30, report=rep)
    a = [e for e in ex if e.user_id == "a"]
    assert [(e.window_end, e.label) for e in a] == [(date(2024, 2, 1), 0), (date(2024, 3, 1), 1)]
    assert rep["positives"] == 1 and rep["examples"] == len(ex)
    assert all(set(ev) == set(PUBLIC_FIELDS) for e in ex for ev in e.events)
    assert all(e.window_start <= date.fromisoformat(ev["timestamp"][:10]) < e.window_end for e in ex for ev in e.events)
    with pytest.raises(ValueError):
        build_illiquidity_examples(corpus, 0)


def test_injection_marks_exactly_the_donor_day():
    p = _user("p", 90, name="Home")
    d = _user("d", 90, name="Thief", every=5)
    ex = inject_identity_theft(p, d, 2, np.random.default_rng(4))
    assert sum(ex.labels) >= 1 and len(ex.labels) == len(ex.events)
    injected = [e for e, b in zip(ex.events, ex.labels) if b]
    assert {e["merchant_name"] for e in injected} == {"Thief"}
    assert {e["timestamp"][:10] for e in injected} == {ex.target_day.isoformat()}
    assert strip_injected(ex) == [e for e in p.events if e["timestamp"] < "2024-03-01"]
    assert [e["timestamp"] for e in ex.events] == sorted(e["timestamp"] for e in ex.events)


def test_injection_infeasible_cases():
    p = _user("p", 40)
    with pytest.raises(InjectionInfeasible):
        inject_identity_theft(p, p, 1, np.random.default_rng(0))
    with pytest.raises(InjectionInfeasible, match="does not cover"):
        inject_identity_theft(p, _user("d", 90), 2, np.random.default_rng(0))
    quiet = CorpusUser("q", S, S + timedelta(days=90), "horizon_reached", None, [])
    with pytest.raises(InjectionInfeasible, match="no events"):
        inject_identity_theft(p, quiet, 1, np.random.default_rng(0))
    with pytest.raises(InjectionInfeasible):
        build_theft_examples(Corpus({"p": p}), 1, 3)


def test_theft_examples_deterministic():
    corpus = Corpus({u: _user(u, 100, name=u) for u in "abcd"})
    a = build_theft_examples(corpus, 1, 12, seed=3)
    assert a == build_theft_examples(corpus, 1, 12, seed=3)
    assert a != build_theft_examples(corpus, 1, 12, seed=4)
    assert all(e.donor_user_id != e.user_id for e in a)
    assert 0 < positive_rate(a) < 0.5


def _examples(n_users, per=3):
    return [TaskExample(f"x:{u}:{k}", "illiquidity", f"u{u:02d}", 1, S, S, [], label=(u + k) % 2)
            for u in range(n_users) for k in range(per)]


def test_split_by_user_is_disjoint_and_seeded():
    ex = _examples(10)
    parts = split(ex, {"train": 0.7, "val": 0.1, "test": 0.2}, seed=1)
    users = {k: {e.user_id for e in v} for k, v in parts.items()}
    assert [len(users[k]) for k in ("train", "val", "test")] == [7, 1, 2]
    assert not (users["train"] & users["test"]) and not (users["val"] & users["test"])
    assert sum(map(len, parts.values())) == len(ex)
    assert split(ex, {"train": 0.7, "val": 0.1, "test": 0.2}, seed=1) == parts
    assert split(ex, {"train": 0.7, "val": 0.1, "test": 0.2}, seed=2) != parts


@pytest.mark.parametrize("ratios", [{"train": 0.5, "test": 0.4}, {"train": 1.2, "test": -0.2}])
def test_split_rejects_bad_ratios(ratios):
    with pytest.raises(SplitError):
        split(_examples(10), ratios)


def test_split_rejects_too_few_users():
    with pytest.raises(SplitError, match="too few users"):
        split(_examples(2), {"train": 0.8, "val": 0.1, "test": 0.1})


def test_vocab_threshold_and_order():
    evs = [_e(S, name="B")] * 4 + [_e(S, name="A")] * 4 + [_e(S, name="C")] * 9 + [_e(S, name="rare")]
    v = build_vocab(evs, threshold=3)
    assert list(v.names) == ["C", "A", "B"] and v.names["C"] == 0
    assert v.types == {"retail": 0}
    assert v.dim == 4 + 2 + 2
    assert Vocab.from_dict(json.loads(json.dumps(v.to_dict()))) == v
    with pytest.raises(ValueError):
        build_vocab([], threshold=-1)


def test_sgn_log_against_high_precision():
    mp.dps = 50
    for a in ["0.01", "-0.01", "66.24", "-1500.00", "0", "123456.78"]:
        x = mp.mpf(a)
        ref = mp.sign(x) * mp.log(1 + abs(x))
        assert math.isclose(sgn_log(a), float(ref), rel_tol=1e-12, abs_tol=0.0)
    assert sgn_log("0.00") == 0.0


def test_encode_event_layout():
    v = build_vocab([_e(S, name="A")] * 2, threshold=1)
    row = encode_event(_e(S, name="A", amount="-9.00", card=False), v)
    assert row.tolist() == [1, 0, 1, 0, 0, -math.log(10)]
    row = encode_event(_e(S, name="Z", mtype="odd", amount="1.00"), v)
    assert row.tolist() == [0, 1, 0, 1, 1, math.log(2)]


def test_encode_examples_offsets_and_memmap(tmp_path):
    v = build_vocab([_e(S)] * 3, threshold=0)
    exs = [TaskExample(f"x{k}", "illiquidity", "u", 1, S, S, [_e(S, hh=h) for h in range(k)], label=0)
           for k in (2, 0, 3)]
    X, off = encode_examples(exs, v)
    assert off.tolist() == [0, 2, 2, 5] and X.shape == (5, v.dim) and X.dtype == np.float32
    X2, _ = encode_examples(exs, v, tmp_path / "m.npy")
    assert np.array_equal(np.load(tmp_path / "m.npy"), X)


def test_task_round_trip_and_encode(small_run, tmp_path):
    corpus = load_corpus(small_run)
    ex = build_illiquidity_examples(corpus, 1, horizon_days=30)
    path = tmp_path / "task.jsonl"
    assert write_task(path, ex) == len(ex)
    assert read_task(path) == ex
    hdr = encode_task(path, tmp_path / "enc", threshold=2, ratios={"train": 0.7, "test": 0.3}, seed=0)
    total = 0
    for name, info in hdr["splits"].items():
        X = np.load(tmp_path / "enc" / info["file"], mmap_mode="r")
        assert X.shape == (info["rows"], hdr["vocab"]["dims"]["total"])
        assert info["offsets"][-1] == info["rows"] and len(info["labels"]) == info["examples"]
        total += info["examples"]
    assert total == len(ex)
    assert hdr["vocab_split"] == "train"
