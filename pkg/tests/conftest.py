from __future__ import annotations

import json
from datetime import date
from pathlib import Path

import pytest

from ledgerloop.config import EngineConfig
from ledgerloop.engine import run_corpus
from ledgerloop.persona import ScheduledCharge, load_personas
from ledgerloop.samples import synth_personas

CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bundled_personas(tmp_path_factory):
    from ledgerloop.samples import bundled_records

    p = tmp_path_factory.mktemp("bundled") / "personas.jsonl"
    p.write_text("".join(line.rstrip("\n") + "\n" for line in bundled_records()), encoding="utf-8")
    return load_personas(p, derive_mode="heuristic")


@pytest.fixture(scope="session")
def jonathan(bundled_personas):
    return next(p for p in bundled_personas if p.user_id == "jonathan-wickliffe")


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """10 synthetic users, 75 days, default preset."""
    out = tmp_path_factory.mktemp("small")
    cfg = EngineConfig(max_days=75, seed=5)
    return run_corpus(synth_personas(10, seed=3), cfg, out)


def charge(day=5, amount=1549, freq=1, std=0, name="Netflix", desc="Streaming service"):
    return ScheduledCharge(day, amount, freq, std, name, desc)


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


D = date
