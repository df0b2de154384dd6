import statistics
from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ledgerloop.analytics import (
    GROUP_KEYS,
    UnknownGroupKey,
    age_bucket,
    credit_utilization_series,
    describe,
    exact_mean,
    exact_pvariance,
    exact_quantile,
    format_summary,
    group_stats,
    load_run,
    merchant_coverage,
    rows_to_csv,
    summary,
    user_day_spend,
    user_month_spend,
    utilization_variance,
    write_stats,
)

cents_lists = st.lists(st.integers(min_value=-10**7, max_value=10**7), min_size=1, max_size=60)


@given(cents_lists)
def test_exact_stats_match_statistics_on_fractions(xs):
    fr = [Fraction(x) for x in xs]
    assert exact_mean(xs) == statistics.mean(fr)
    assert exact_pvariance(xs) == statistics.pvariance(fr)


@given(st.lists(st.integers(min_value=0, max_value=10**6), min_size=2, max_size=60))
def test_quartiles_match_inclusive_method(xs):
    fr = sorted(Fraction(x) for x in xs)
    want = statistics.quantiles(fr, n=4, method="inclusive")
    got = [exact_quantile(fr, Fraction(k, 4)) for k in (1, 2, 3)]
    assert got == want


def test_describe_scales_and_orders():
    d = describe([100, 300, 200, 400], 100)
    assert (d.count, d.mean, d.min, d.max) == (4, 2.5, 1.0, 4.0)
    assert (d.q25, d.q50, d.q75) == (1.75, 2.5, 3.25)
    assert d.std == pytest.approx(1.118033988749895, rel=1e-15)
    assert describe([7]).std == 0.0
    with pytest.raises(ValueError):
        describe([])


@pytest.mark.parametrize("age,bucket", [(18, "18-29"), (29, "18-29"), (30, "30-39"), (69, "60-69"),
                                        (70, "70+"), (95, "70+"), (None, "unknown")])
def test_age_bucket(age, bucket):
    assert age_bucket(age) == bucket


def _ev(uid, ts, amount, kind="purchase", name="M"):
    return {"user_id": uid, "timestamp": ts, "amount": amount, "kind": kind, "merchant_name": name,
            "merchant_type": "retail"}


EVENTS = [
    _ev("a", "2024-01-01T10:00:00Z", "10.00"),
    _ev("a", "2024-01-03T10:00:00Z", "5.50"),
    _ev("a", "2024-01-03T11:00:00Z", "-20.00", "payment"),
    _ev("a", "2024-02-01T10:00:00Z", "1.00", "interest"),
    _ev("b", "2024-01-02T10:00:00Z", "3.00", "subscription_charge"),
]


def test_user_month_and_day_spend():
    assert user_month_spend(EVENTS) == {("a", "2024-01"): 1550, ("a", "2024-02"): 0, ("b", "2024-01"): 300}
    days = user_day_spend(EVENTS)
    a_days = sorted(d for u, d in days if u == "a")
    assert len(a_days) == 32  # Jan 1 .. Feb 1 inclusive, zero days included
    assert days[("a", a_days[1])] == 0 and days[("a", a_days[2])] == 550


def test_group_stats_month_and_weekday():
    rows = group_stats(EVENTS, {}, "month")
    assert [(r["group"], r["count"]) for r in rows] == [("1", 2), ("2", 1)]
    assert rows[0]["mean"] == 9.25 and rows[0]["std"] == 6.25
    wk = group_stats(EVENTS, {}, "weekday")
    assert [r["group"] for r in wk] == ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"]
    hol = {r["group"]: r["count"] for r in group_stats(EVENTS, {}, "holiday")}
    assert hol["holiday"] == 2  # user a spans New Year's Day and MLK Day


def test_group_stats_unknown_key():
    with pytest.raises(UnknownGroupKey, match="education_level"):
        group_stats(EVENTS, {}, "zodiac")


def test_persona_groups(jonathan):
    other = replace(jonathan, user_id="b")
    rows = group_stats(EVENTS, {"a": jonathan, "b": other}, "car_ownership")
    assert sum(r["count"] for r in rows) == 3
    assert {r["key"] for r in rows} == {"car_ownership"}


def test_utilization():
    snaps = [{"user_id": "a", "kind": "daily", "date": f"2024-01-0{k}", "credit_balance": b, "credit_limit": 1000}
             for k, b in ((1, 0), (2, 500), (3, 1000))]
    assert [u for _, u in credit_utilization_series(snaps, "a")] == [0.0, 0.5, 1.0]
    assert utilization_variance(snaps) == {"a": float(Fraction(1, 6))}
    with pytest.raises(ValueError):
        credit_utilization_series([{**snaps[0], "credit_limit": 0}])


def test_merchant_coverage():
    evs = [{"merchant_name": "x"}] * 3 + [{"merchant_name": "y"}]
    assert merchant_coverage(evs, 2) == {"total": 2, "above_threshold": 1, "threshold": 2}


def test_rows_to_csv_round_trips_floats():
    text = rows_to_csv([{"a": 1, "b": 0.1 + 0.2}])
    assert text == "a,b\n1,0.30000000000000004\n"
    assert rows_to_csv([]) == ""


def test_summary_and_write_stats(small_run, tmp_path):
    data = load_run(small_run)
    s = summary(data)
    assert s["users"]["total"] == 10
    kinds = s["events"]["kinds"]
    assert sum(v["count"] for v in kinds.values()) == s["events"]["total"] == len(data.events)
    d = s["distributions"]["transaction amounts"]
    assert d.min <= d.q25 <= d.q50 <= d.q75 <= d.max
    text = format_summary(s)
    assert "reference" in text and "illiquid" in text
    write_stats(data, tmp_path)
    for key in GROUP_KEYS:
        assert (tmp_path / f"group_{key}.csv").read_text().startswith("key,group,count,mean,std")
    assert (tmp_path / "summary.txt").read_text() == text + "\n"
