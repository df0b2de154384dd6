import json
from datetime import date

import httpx
import pytest

from conftest import read_jsonl
from ledgerloop.config import PRESETS, BackendConfig, ConfigError, EngineConfig, load_config
from ledgerloop.engine import run_corpus, simulate_user, stream, user_horizon
from ledgerloop.ledger import state_hash
from ledgerloop.llm import ChatClient
from ledgerloop.samples import synth_personas

CFG = EngineConfig(max_days=45, seed=3)


def test_stream_keys_are_independent():
    d = date(2024, 1, 1)
    draw = lambda *k: stream(*k).integers(1 << 62)
    base = draw(1, "u", d, "propose")
    assert base == draw(1, "u", d, "propose")
    others = [draw(2, "u", d, "propose"), draw(1, "v", d, "propose"), draw(1, "u", date(2024, 1, 2), "propose"),
              draw(1, "u", d, "random"), draw(1, "u", d, "propose", 1)]
    assert base not in others and len(set(others)) == len(others)


def test_simulate_user_is_deterministic():
    p = synth_personas(1, seed=8)[0]
    a, b = simulate_user(p, CFG), simulate_user(p, CFG)
    assert a.events == b.events and a.audit == b.audit
    assert state_hash(a.final) == state_hash(b.final)
    assert a.days == 45 and a.termination == "horizon_reached"


def test_user_order_does_not_matter(tmp_path):
    ps = synth_personas(4, seed=1)
    r1 = run_corpus(ps, CFG, tmp_path / "a")
    r2 = run_corpus(list(reversed(ps)), CFG, tmp_path / "b")
    assert (r1 / "events.jsonl").read_bytes() == (r2 / "events.jsonl").read_bytes()
    assert (r1 / "audit.jsonl").read_bytes() == (r2 / "audit.jsonl").read_bytes()


def test_duplicate_user_ids_rejected(tmp_path):
    p = synth_personas(1)[0]
    with pytest.raises(ValueError, match="duplicate"):
        run_corpus([p, p], CFG, tmp_path)


def test_manifest_contents(small_run):
    m = json.loads((small_run / "manifest.json").read_text())
    assert m["n_users"] == 10 and len(m["users"]) == 10
    assert m["n_events"] == len(read_jsonl(small_run / "events.jsonl"))
    assert small_run.name == f"{m['config_hash']}-{m['seed']}"
    row = read_jsonl(small_run / "events.jsonl")[0]
    assert set(row) == {"user_id", "seq", "timestamp", "merchant_name", "merchant_type", "card_present_or_not",
                        "amount", "kind"}
    assert row["timestamp"].endswith(":00Z")
    kinds = {r["kind"] for r in read_jsonl(small_run / "events.jsonl")}
    assert "income_deposit" not in kinds and "purchase" in kinds


def test_termination_is_sound(tmp_path):
    cfg = EngineConfig.from_dict({"preset": "stressed", "seed": 2, "max_days": 120})
    run = run_corpus(synth_personas(15, seed=4), cfg, tmp_path)
    snaps = read_jsonl(run / "snapshots.jsonl")
    users = json.loads((run / "manifest.json").read_text())["users"]
    for u in users:
        daily = [s for s in snaps if s["user_id"] == u["user_id"] and s["kind"] == "daily"]
        assert len(daily) == u["days"]
        early = daily[:-1]
        assert all(s["cash"] >= cfg.overdraft_allowance for s in early)
        if u["termination"] == "illiquid":
            assert daily[-1]["cash"] < cfg.overdraft_allowance and daily[-1]["date"] == u["illiquid_date"]
        else:
            assert daily[-1]["cash"] >= cfg.overdraft_allowance and u["days"] == 120


def test_presets_shift_resources():
    d, s, a = (EngineConfig.from_dict({"preset": k}) for k in ("default", "stressed", "affluent"))
    assert s.income_scale < d.income_scale < a.income_scale
    assert s.spend_scale > d.spend_scale > a.spend_scale
    assert EngineConfig.from_dict({"preset": "stressed", "income_scale": 0.9}).income_scale == 0.9
    assert set(PRESETS) == {"default", "stressed", "affluent"}


@pytest.mark.parametrize("bad", [{"random_event_prob": 1.5}, {"repair_retries": -1}, {"preset": "broke"},
                                 {"bogus": 1}, {"pay_days": [30]}, {"income_scale": 0}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        EngineConfig.from_dict(bad)


def test_load_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 4, "late_fee": 2500, "backend": {"kind": "mock", "model": "m"}}))
    cfg = load_config(path, {"max_days": 10})
    assert (cfg.seed, cfg.late_fee, cfg.max_days, cfg.backend.model) == (4, 2500, 10, "m")
    assert cfg.config_hash() == load_config(path, {"max_days": 10}).config_hash()
    assert cfg.config_hash() != load_config(path, {"max_days": 11}).config_hash()


def test_horizon_sampler():
    cfg = EngineConfig(horizon_days_range=(30, 60), max_days=50)
    hs = {user_horizon(cfg, f"u{k}") for k in range(50)}
    assert min(hs) >= 30 and max(hs) == 50 and len(hs) > 5


def test_backend_outage_marks_user_incomplete(tmp_path):
    backend = BackendConfig(kind="external", endpoint="http://down.invalid/", max_retries=0)
    client = ChatClient(backend, transport=httpx.MockTransport(lambda r: httpx.Response(503)))
    cfg = EngineConfig(max_days=10, backend=backend)
    run = run_corpus(synth_personas(2, seed=1), cfg, tmp_path, client=client)
    m = json.loads((run / "manifest.json").read_text())
    assert m["n_incomplete"] == 2
    assert all(u["termination"] == "incomplete" and u["days"] == 1 for u in m["users"])
    plans = [r for r in read_jsonl(run / "audit.jsonl") if r["kind"] == "PLAN"]
    assert all(r["status"] == "unavailable" for r in plans)


def test_audit_has_one_check_per_rule_per_attempt():
    tr = simulate_user(synth_personas(1, seed=5)[0], EngineConfig(max_days=20, seed=1))
    plans = [r for r in tr.audit if r["kind"] == "PLAN"]
    checks = [r for r in tr.audit if r["kind"] == "CHECK"]
    assert len(checks) == 7 * len(plans)
    assert tr.stats["attempts"] == len(plans)
