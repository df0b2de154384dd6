"""Bundled read-only data: merchant/subscription catalog, in-context profile examples, sample personas."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from typing import Any


def _read(name: str) -> str:
    return resources.files("ledgerloop").joinpath("data", name).read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def load() -> dict[str, Any]:
    return json.loads(_read("catalog.json"))


@lru_cache(maxsize=None)
def profile_examples() -> list[dict[str, Any]]:
    """The seven persona -> financial-profile examples used for external derivation."""
    return json.loads(_read("profile_examples.json"))


def sample_persona_lines() -> list[str]:
    return [ln for ln in _read("sample_personas.jsonl").splitlines() if ln.strip()]


@lru_cache(maxsize=None)
def merchant_index() -> dict[str, dict[str, Any]]:
    """merchant_type -> catalog entry."""
    return {m["merchant_type"]: m for m in load()["merchant_types"]}
