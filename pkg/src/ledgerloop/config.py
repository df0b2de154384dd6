"""Engine configuration, presets, and the config hash that names run directories."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any

DEFAULT_PAYCHECKS = {"low income": 140000, "med income": 260000, "high income": 520000}

# Behavioral presets: scale factors applied on top of a config.
PRESETS: dict[str, dict[str, Any]] = {
    "default": {},
    "stressed": {"income_scale": 0.45, "spend_scale": 1.5, "credit_limit_scale": 0.6, "starting_cash_multiple": 0.25},
    "affluent": {"income_scale": 3.0, "spend_scale": 0.6, "credit_limit_scale": 2.5, "starting_cash_multiple": 2.0},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "llama-3.3-70b-instruct"
    api_key_env: str = "LEDGERLOOP_API_KEY"
    timeout: float = 60.0
    temperature: float = 0.7
    max_retries: int = 2
    max_concurrency: int = 4


@dataclass(frozen=True)
class EngineConfig:
    start_date: date = date(2024, 1, 1)
    max_days: int = 1101
    horizon_days_range: tuple[int, int] | None = None
    seed: int = 0
    preset: str = "default"

    monthly_interest_rate: float = 0.02
    late_fee: int = 3500
    grace_days: int = 21
    min_payment_fraction: float = 0.03
    liquidity_window_days: int = 30
    overdraft_allowance: int = -10000
    random_event_prob: float = 0.10
    repair_retries: int = 3
    parse_retries: int = 2
    max_events_per_day: int = 25

    starting_cash_multiple: float = 1.0
    paychecks: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_PAYCHECKS))
    pay_days: tuple[int, ...] = (1, 15)
    holiday_years: tuple[int, int] = (1990, 2100)

    strict_cadence: bool = False
    cadence_min_days: dict[str, int] = field(default_factory=lambda: {"grocery": 3, "fuel": 5})

    # Mock proposer behavior.
    income_scale: float = 1.0
    spend_scale: float = 1.0
    credit_limit_scale: float = 1.0
    payment_error_rate: float = 0.02
    cadence_slip_rate: float = 0.05
    cancel_prob: float = 0.002

    rules: tuple[str, ...] | None = None
    rule_params: dict[str, dict[str, Any]] = field(default_factory=dict)
    backend: BackendConfig = field(default_factory=BackendConfig)

    def __post_init__(self):
        for name in ("monthly_interest_rate", "min_payment_fraction", "random_event_prob", "payment_error_rate",
                     "cadence_slip_rate", "cancel_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {v}")
        for name in ("income_scale", "spend_scale", "credit_limit_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if any(not isinstance(v, int) or v <= 0 for v in self.paychecks.values()):
            raise ConfigError("paychecks must be positive integer cents")
        if self.repair_retries < 0:
            raise ConfigError("repair_retries must be >= 0")
        if self.max_days < 1:
            raise ConfigError("max_days must be >= 1")
        if self.grace_days < 1:
            raise ConfigError("grace_days must be >= 1")
        if self.liquidity_window_days < 1:
            raise ConfigError("liquidity_window_days must be >= 1")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if not all(1 <= d <= 28 for d in self.pay_days):
            raise ConfigError("pay_days must lie in [1,28]")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["start_date"] = self.start_date.isoformat()
        d["horizon_days_range"] = list(self.horizon_days_range) if self.horizon_days_range else None
        d["pay_days"] = list(self.pay_days)
        d["holiday_years"] = list(self.holiday_years)
        d["rules"] = list(self.rules) if self.rules is not None else None
        return d

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "EngineConfig":
        raw = dict(raw)
        preset = raw.get("preset", "default")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        merged = {**PRESETS[preset], **raw}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(merged) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "start_date" in merged and isinstance(merged["start_date"], str):
            merged["start_date"] = date.fromisoformat(merged["start_date"])
        for key in ("horizon_days_range", "pay_days", "holiday_years", "rules"):
            if merged.get(key) is not None:
                merged[key] = tuple(merged[key])
        if isinstance(merged.get("backend"), dict):
            merged["backend"] = BackendConfig(**merged["backend"])
        if "paychecks" in merged:
            merged["paychecks"] = {**DEFAULT_PAYCHECKS, **merged["paychecks"]}
        return cls(**merged)

    def replace(self, **kw) -> "EngineConfig":
        return dataclasses.replace(self, **kw)

    def config_hash(self) -> str:
        d = self.to_dict()
        # Transport details do not change the generated corpus for the mock backend.
        d["backend"] = {"kind": self.backend.kind, "model": self.backend.model, "temperature": self.backend.temperature}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> EngineConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    return EngineConfig.from_dict(raw)
