"""Persona records, financial profiles, and profile derivation.

A persona is the 20-item demographic/lifestyle record; the augmented form
adds a ``user_financial_profile`` carrying income, credit limit, payment
habit, car ownership, spending archetype, and the fixed/variable schedules
that the engine (not the proposer) executes.
"""

from __future__ import annotations

import ast
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import catalog as _catalog
from .money import MoneyFormatError, cents_to_float, to_cents

INCOME_LEVELS = ("low income", "med income", "high income")
PAYMENT_HABITS = ("automatic_payment", "manual_on_due_date", "irregular")
ARCHETYPES = ("survivor", "saver", "balancer", "comfortable", "spender")
ARCHETYPE_TEXT = {
    "survivor": "Survivors: live paycheck to paycheck and keep discretionary spending to the bare minimum.",
    "saver": "Savers: are frugal by habit and put most spare money into savings.",
    "balancer": (
        "Balancers: intentionally prioritize saving and investing for the future while "
        "still maintaining a comfortable current lifestyle."
    ),
    "comfortable": "Comfortables: spend freely on everyday comforts while saving occasionally.",
    "spender": "Spenders: enjoy spending on experiences and things, often at the expense of saving.",
}
SEXES = ("Male", "Female")
MAX_SCHEDULE_ITEMS = 12

_TEXT_FIELDS = (
    "persona",
    "professional_persona",
    "sports_persona",
    "arts_persona",
    "travel_persona",
    "culinary_persona",
)
_CATEGORICAL_FIELDS = ("marital_status", "education_level", "occupation")
_PERSONA_KEYS = (
    *_TEXT_FIELDS,
    "skills_and_expertise_list",
    "hobbies_and_interests_list",
    "career_goals_and_ambitions",
    "sex",
    "age",
    "marital_status",
    "education_level",
    "bachelors_field",
    "occupation",
)


class PersonaError(ValueError):
    """Raised when persona records cannot be loaded."""

    def __init__(self, message: str, problems: list[tuple[int, list[ValidationIssue]]] | None = None):
        super().__init__(message)
        self.problems = problems or []


class DuplicateUserIdError(PersonaError):
    pass


class ProfileDerivationError(RuntimeError):
    def __init__(self, message: str, raw: str | None = None):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class ValidationIssue:
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


@dataclass(frozen=True)
class Persona:
    persona: str
    professional_persona: str
    sports_persona: str
    arts_persona: str
    travel_persona: str
    culinary_persona: str
    skills_and_expertise_list: tuple[str, ...]
    hobbies_and_interests_list: tuple[str, ...]
    career_goals_and_ambitions: str
    sex: str
    age: int | None
    marital_status: str
    education_level: str
    bachelors_field: str | None
    occupation: str
    # Source keys outside the core schema (uuid, city, zipcode, ...), kept for round-trips.
    extra: tuple[tuple[str, Any], ...] = ()

    def text_blob(self) -> str:
        parts = [getattr(self, f) for f in _TEXT_FIELDS]
        parts += list(self.skills_and_expertise_list) + list(self.hobbies_and_interests_list)
        parts.append(self.career_goals_and_ambitions)
        return " ".join(parts).lower()


@dataclass(frozen=True)
class ScheduledCharge:
    date_to_charge: int
    amount: int  # cents
    charge_frequency_month: int
    std: int  # cents
    merchant_name: str
    product_description: str


@dataclass(frozen=True)
class FinancialProfile:
    income_level: str
    credit_limit: int  # whole dollars
    payment_habit: str
    car_ownership: str
    spending_patterns: str
    subscriptions: tuple[ScheduledCharge, ...] = ()
    recurring_variable_bills: tuple[ScheduledCharge, ...] = ()

    @property
    def archetype(self) -> str | None:
        return archetype_key(self.spending_patterns)

    @property
    def owns_car(self) -> bool:
        return self.car_ownership.startswith("owns")


@dataclass(frozen=True)
class AugmentedPersona:
    user_persona: Persona
    user_financial_profile: FinancialProfile
    user_id: str


def archetype_key(text: str) -> str | None:
    """Map a spending-pattern string (``"Balancers: ..."`` or ``"balancer"``) to its key."""
    head = text.split(":", 1)[0].strip().lower()
    for key in ARCHETYPES:
        if head == key or head == key + "s":
            return key
    return None


# --------------------------------------------------------------------------
# parsing / serialization
# --------------------------------------------------------------------------


def _parse_list(value: Any) -> tuple[str, ...] | None:
    if isinstance(value, (list, tuple)):
        items = value
    elif isinstance(value, str):
        try:
            items = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            return None
        if not isinstance(items, (list, tuple)):
            return None
    else:
        return None
    if not all(isinstance(x, str) for x in items):
        return None
    return tuple(items)


def _parse_age(value: Any) -> int | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, str) and value.strip().lstrip("-").isdigit():
        return int(value.strip())
    return None


def parse_persona(raw: dict[str, Any]) -> tuple[Persona, list[ValidationIssue]]:
    """Parse a persona dict; structural problems come back as issues, not exceptions."""
    issues: list[ValidationIssue] = []
    vals: dict[str, Any] = {}
    for key in (*_TEXT_FIELDS, "career_goals_and_ambitions", *_CATEGORICAL_FIELDS, "sex"):
        v = raw.get(key)
        if v is None:
            v = ""
        if not isinstance(v, str):
            issues.append(ValidationIssue(key, "must be a string"))
            v = str(v)
        vals[key] = v
    for key in ("skills_and_expertise_list", "hobbies_and_interests_list"):
        parsed = _parse_list(raw.get(key))
        if parsed is None:
            issues.append(ValidationIssue(key, "must parse to a list of strings"))
            parsed = ()
        vals[key] = parsed
    age = _parse_age(raw.get("age"))
    if age is None:
        issues.append(ValidationIssue("age", "age must be an integer"))
    vals["age"] = age
    bf = raw.get("bachelors_field")
    vals["bachelors_field"] = None if bf is None else str(bf)
    extra = tuple(sorted((k, v) for k, v in raw.items() if k not in _PERSONA_KEYS))
    return Persona(extra=extra, **vals), issues


def parse_charge(raw: dict[str, Any], where: str) -> tuple[ScheduledCharge | None, list[ValidationIssue]]:
    issues: list[ValidationIssue] = []
    try:
        day = int(raw["date_to_charge"])
        freq = int(raw.get("charge_frequency_month", 1))
        amount = to_cents(raw["amount"])
        std = to_cents(raw.get("std", 0))
        name = str(raw["merchant_name"])
        desc = str(raw.get("product_description", ""))
    except (KeyError, TypeError, ValueError, MoneyFormatError) as exc:
        return None, [ValidationIssue(where, f"malformed scheduled charge ({exc})")]
    return ScheduledCharge(day, amount, freq, std, name, desc), issues


def parse_profile(raw: dict[str, Any], extra_sched: dict[str, Any] | None = None) -> tuple[FinancialProfile, list[ValidationIssue]]:
    issues: list[ValidationIssue] = []
    limit = raw.get("credit_limit")
    try:
        limit_dollars = int(limit)
        if limit_dollars != float(limit):
            raise ValueError
    except (TypeError, ValueError):
        issues.append(ValidationIssue("credit_limit", "credit_limit must be a whole-dollar integer"))
        limit_dollars = 0
    scheds: dict[str, list[ScheduledCharge]] = {}
    for key in ("subscriptions", "recurring_variable_bills"):
        src = raw.get(key)
        if src is None and extra_sched:
            src = extra_sched.get(key)
        items = []
        for i, item in enumerate(src or []):
            c, iss = parse_charge(item, f"{key}[{i}]")
            issues += iss
            if c is not None:
                items.append(c)
        scheds[key] = items
    prof = FinancialProfile(
        income_level=str(raw.get("income_level", "")),
        credit_limit=limit_dollars,
        payment_habit=str(raw.get("payment_habit", "")),
        car_ownership=str(raw.get("car_ownership", "")),
        spending_patterns=str(raw.get("spending_patterns", "")),
        subscriptions=tuple(scheds["subscriptions"]),
        recurring_variable_bills=tuple(scheds["recurring_variable_bills"]),
    )
    return prof, issues


def persona_to_dict(p: Persona) -> dict[str, Any]:
    d: dict[str, Any] = {}
    for key in _PERSONA_KEYS:
        v = getattr(p, key)
        if key.endswith("_list"):
            v = repr(list(v))
        elif key == "age":
            v = None if v is None else str(v)
        d[key] = v
    for k, v in p.extra:
        d[k] = v
    return d


def charge_to_dict(c: ScheduledCharge) -> dict[str, Any]:
    return {
        "date_to_charge": c.date_to_charge,
        "amount": cents_to_float(c.amount),
        "charge_frequency_month": c.charge_frequency_month,
        "std": cents_to_float(c.std),
        "merchant_name": c.merchant_name,
        "product_description": c.product_description,
    }


def profile_to_dict(f: FinancialProfile) -> dict[str, Any]:
    return {
        "income_level": f.income_level,
        "credit_limit": f.credit_limit,
        "payment_habit": f.payment_habit,
        "car_ownership": f.car_ownership,
        "spending_patterns": f.spending_patterns,
        "subscriptions": [charge_to_dict(c) for c in f.subscriptions],
        "recurring_variable_bills": [charge_to_dict(c) for c in f.recurring_variable_bills],
    }


def augmented_to_dict(ap: AugmentedPersona) -> dict[str, Any]:
    return {
        "user_id": ap.user_id,
        "user_persona": persona_to_dict(ap.user_persona),
        "user_financial_profile": profile_to_dict(ap.user_financial_profile),
    }


def serialize_augmented(ap: AugmentedPersona) -> str:
    """Canonical one-line JSON form (the ``personas.jsonl`` line format)."""
    return json.dumps(augmented_to_dict(ap), ensure_ascii=False, separators=(",", ":"))


def content_hash(obj: Any, n: int = 8) -> str:
    blob = json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode()
    return hashlib.blake2b(blob, digest_size=n).hexdigest()


def default_user_id(index: int, persona: Persona) -> str:
    return f"u{index:05d}-{content_hash(persona_to_dict(persona), 4)}"


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


def validate_persona(p: Persona) -> list[ValidationIssue]:
    issues = []
    if p.age is not None and not 18 <= p.age <= 110:
        issues.append(ValidationIssue("age", "age out of range"))
    for key in _CATEGORICAL_FIELDS:
        if not getattr(p, key).strip():
            issues.append(ValidationIssue(key, f"{key} must be non-empty"))
    if p.sex not in SEXES:
        issues.append(ValidationIssue("sex", "sex must be Male or Female"))
    for key in ("skills_and_expertise_list", "hobbies_and_interests_list"):
        items = getattr(p, key)
        if not items or not all(s.strip() for s in items):
            issues.append(ValidationIssue(key, f"{key} must be a non-empty list of strings"))
    return issues


def _validate_charge(c: ScheduledCharge, where: str, fixed: bool, limit_cents: int) -> list[ValidationIssue]:
    issues = []
    if not 1 <= c.date_to_charge <= 31:
        issues.append(ValidationIssue(where, "date_to_charge must be in [1,31]"))
    if c.amount <= 0:
        issues.append(ValidationIssue(where, "amount must be positive"))
    if c.std < 0:
        issues.append(ValidationIssue(where, "std must be non-negative"))
    if fixed and c.std != 0:
        issues.append(ValidationIssue(where, "subscription std must be 0"))
    if c.charge_frequency_month < 1:
        issues.append(ValidationIssue(where, "charge_frequency_month must be positive"))
    if not c.merchant_name.strip():
        issues.append(ValidationIssue(where, "merchant_name must be non-empty"))
    if limit_cents > 0 and c.amount > limit_cents:
        issues.append(ValidationIssue(where, "amount must not exceed credit_limit"))
    return issues


def validate_profile(f: FinancialProfile) -> list[ValidationIssue]:
    issues = []
    if f.income_level not in INCOME_LEVELS:
        issues.append(ValidationIssue("income_level", "income_level must be one of low/med/high income"))
    if f.credit_limit <= 0:
        issues.append(ValidationIssue("credit_limit", "credit_limit must be positive"))
    if f.payment_habit not in PAYMENT_HABITS:
        issues.append(ValidationIssue("payment_habit", "payment_habit not in vocabulary"))
    if not f.car_ownership.strip():
        issues.append(ValidationIssue("car_ownership", "car_ownership must be non-empty"))
    if f.archetype is None:
        issues.append(ValidationIssue("spending_patterns", "spending_patterns archetype not in vocabulary"))
    limit_cents = f.credit_limit * 100
    for key, fixed in (("subscriptions", True), ("recurring_variable_bills", False)):
        items = getattr(f, key)
        if len(items) > MAX_SCHEDULE_ITEMS:
            issues.append(ValidationIssue(key, f"at most {MAX_SCHEDULE_ITEMS} items"))
        for i, c in enumerate(items):
            issues += _validate_charge(c, f"{key}[{i}]", fixed, limit_cents)
        names = [c.merchant_name for c in items]
        if len(set(names)) != len(names):
            issues.append(ValidationIssue(key, "merchant_name must be unique within a schedule list"))
    return issues


def validate_augmented_persona(p: AugmentedPersona) -> list[ValidationIssue]:
    issues = validate_persona(p.user_persona) + validate_profile(p.user_financial_profile)
    if not p.user_id:
        issues.append(ValidationIssue("user_id", "user_id must be non-empty"))
    return issues


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------


def _read_records(path: Path) -> list[tuple[int, Any]]:
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if not stripped:
        return []
    if stripped.startswith("["):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise PersonaError(f"{path}: invalid JSON array: {exc}") from exc
        return [(i + 1, rec) for i, rec in enumerate(data)]
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise PersonaError(f"{path}:{lineno}: invalid JSON: {exc}", [(lineno, [ValidationIssue("record", "invalid JSON")])]) from exc
    return out


def parse_record(rec: Any, index: int, derive_mode: str | None = None, seed: int = 0, **derive_kw) -> tuple[AugmentedPersona | None, list[ValidationIssue]]:
    if not isinstance(rec, dict):
        return None, [ValidationIssue("record", "must be a JSON object")]
    raw_persona = rec.get("user_persona", rec if "persona" in rec else None)
    if not isinstance(raw_persona, dict):
        return None, [ValidationIssue("user_persona", "missing user_persona block")]
    persona, issues = parse_persona(raw_persona)
    raw_profile = rec.get("user_financial_profile")
    if raw_profile is None:
        if derive_mode is None:
            return None, issues + [ValidationIssue("user_financial_profile", "missing user_financial_profile block")]
        if issues or validate_persona(persona):
            return None, issues + validate_persona(persona)
        profile = derive_financial_profile(persona, derive_mode, seed, **derive_kw)
    else:
        profile, piss = parse_profile(raw_profile, rec)
        issues += piss
    user_id = rec.get("user_id") or default_user_id(index, persona)
    ap = AugmentedPersona(persona, profile, str(user_id))
    issues += validate_augmented_persona(ap)
    return ap, issues


def load_personas(path: str | Path, derive_mode: str | None = None, seed: int = 0, **derive_kw) -> list[AugmentedPersona]:
    """Load a JSONL file (or JSON array) of augmented persona records.

    Records lacking ``user_financial_profile`` are rejected unless
    ``derive_mode`` is given, in which case the profile is derived.
    Raises :class:`PersonaError` listing every bad record with its line number.
    """
    path = Path(path)
    records = _read_records(path)
    out: list[AugmentedPersona] = []
    problems: list[tuple[int, list[ValidationIssue]]] = []
    for index, (lineno, rec) in enumerate(records):
        ap, issues = parse_record(rec, index, derive_mode, seed, **derive_kw)
        if issues:
            problems.append((lineno, issues))
        elif ap is not None:
            out.append(ap)
    if problems:
        lines = "; ".join(f"line {ln}: " + ", ".join(i.rule for i in iss) for ln, iss in problems[:20])
        raise PersonaError(f"{path}: {len(problems)} invalid record(s): {lines}", problems)
    seen: dict[str, int] = {}
    for ap, (lineno, _) in zip(out, records):
        if ap.user_id in seen:
            raise DuplicateUserIdError(f"{path}:{lineno}: duplicate user_id {ap.user_id!r} (first on line {seen[ap.user_id]})")
        seen[ap.user_id] = lineno
    return out


def write_personas(path: str | Path, personas: Iterable[AugmentedPersona]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ap in personas:
            fh.write(serialize_augmented(ap) + "\n")


# --------------------------------------------------------------------------
# heuristic derivation
# --------------------------------------------------------------------------

_EDU_RANK = {
    "less_than_9th": 0,
    "9th_12th_no_diploma": 0,
    "high_school": 1,
    "some_college": 2,
    "associates": 2,
    "bachelors": 3,
    "graduate": 4,
}

# (occupation class, education tier) -> permitted income levels.
_INCOME_TABLE: dict[tuple[str, int], tuple[str, ...]] = {}
for _tier, _levels in enumerate(
    [
        ("low income",),
        ("low income", "med income"),
        ("low income", "med income"),
        ("med income", "high income"),
        ("med income", "high income"),
    ]
):
    _INCOME_TABLE[("professional", _tier)] = _levels if _tier >= 3 else ("low income", "med income")
    _INCOME_TABLE[("skilled", _tier)] = ("low income", "med income") if _tier < 3 else ("med income", "high income")
    _INCOME_TABLE[("service", _tier)] = ("low income",) if _tier < 2 else ("low income", "med income")
    # Retirees and other non-workers live on pensions/savings across the range.
    _INCOME_TABLE[("not_working", _tier)] = ("low income", "med income") if _tier < 3 else ("med income", "high income")
    _INCOME_TABLE[("student", _tier)] = ("low income",)

_PROFESSIONAL = ("manager", "engineer", "physician", "attorney", "lawyer", "executive", "director", "scientist",
                 "analyst", "accountant", "architect", "pharmacist", "dentist", "developer", "professor", "consultant",
                 "financial", "software", "nurse practitioner", "surgeon")
_SKILLED = ("technician", "electrician", "plumber", "mechanic", "teacher", "nurse", "carpenter", "operator", "supervisor",
            "clerk", "specialist", "administrator", "assistant", "sales", "driver", "machinist", "welder", "officer")
_NOT_WORKING = ("not_in_workforce", "retired", "unemployed", "homemaker", "disabled")
_NO_CAR = ("public transit", "subway", "bus ", "the bus", "does not own a car", "doesn't own a car", "doesn't drive",
           "does not drive", "bikes to", "walks to", "rides his bike", "rides her bike", "car-free", "takes the train")


def occupation_class(occupation: str) -> str:
    occ = occupation.lower().replace("-", "_")
    if any(k in occ for k in _NOT_WORKING):
        return "not_working"
    if "student" in occ:
        return "student"
    occ = occ.replace("_", " ")
    if any(k in occ for k in _PROFESSIONAL):
        return "professional"
    if any(k in occ for k in _SKILLED):
        return "skilled"
    return "service"


def permitted_income_levels(persona: Persona) -> tuple[str, ...]:
    tier = _EDU_RANK.get(persona.education_level, 1)
    return _INCOME_TABLE[(occupation_class(persona.occupation), tier)]


def persona_tags(persona: Persona, owns_car: bool | None = None, homeowner: bool | None = None) -> set[str]:
    blob = " " + persona.text_blob() + " "
    tags = {tag for tag, kws in _catalog.load()["tags"].items() if any(kw in blob for kw in kws)}
    if owns_car is not None:
        tags.add("car" if owns_car else "no_car")
    if homeowner is not None:
        tags.add("homeowner" if homeowner else "renter")
    return tags


def hobby_tags(hobby: str) -> set[str]:
    blob = " " + hobby.lower() + " "
    return {tag for tag, kws in _catalog.load()["tags"].items() if any(kw in blob for kw in kws)}


def _stable_int(*parts: str) -> int:
    h = hashlib.blake2b("\x1f".join(parts).encode(), digest_size=8).digest()
    return int.from_bytes(h, "big")


def derivation_rng(persona: Persona, seed: int) -> np.random.Generator:
    key = _stable_int(json.dumps(persona_to_dict(persona), sort_keys=True))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, key])))


def _car_ownership(persona: Persona, income: str) -> str:
    blob = " " + persona.text_blob() + " "
    if any(k in blob for k in _NO_CAR):
        return "no_car"
    if persona.marital_status.lower().startswith("married") and income == "high income":
        return "owns_2_cars"
    return "owns_1_car"


def _is_homeowner(persona: Persona, income: str) -> bool:
    age = persona.age or 0
    if income == "low income":
        return age >= 60
    return age >= 35 or persona.marital_status.lower().startswith(("married", "widowed"))


_CREDIT_RANGES = {"low income": (1500, 5000), "med income": (5000, 12000), "high income": (12000, 30000)}


def _pick_subscriptions(persona: Persona, tags: set[str], rng: np.random.Generator) -> list[ScheduledCharge]:
    subs = _catalog.load()["subscriptions"]
    k = int(rng.integers(3, 7))
    chosen: list[dict] = []
    used: set[str] = set()
    # Hobby order matters: the first hobby gets the first specific subscription.
    for hobby in persona.hobbies_and_interests_list:
        if len(chosen) >= k - 1:
            break
        htags = hobby_tags(hobby)
        cands = [s for s in subs if s["merchant_name"] not in used and htags & set(s["tags"]) - {"*"}]
        if cands:
            s = cands[int(rng.integers(len(cands)))]
            chosen.append(s)
            used.add(s["merchant_name"])
    extra = [s for s in subs if s["merchant_name"] not in used and (tags & set(s["tags"]) or "*" in s["tags"])]
    order = rng.permutation(len(extra))
    for i in order:
        if len(chosen) >= k:
            break
        chosen.append(extra[i])
        used.add(extra[i]["merchant_name"])
    return [
        ScheduledCharge(
            date_to_charge=int(rng.integers(1, 29)),
            amount=to_cents(s["amount"]),
            charge_frequency_month=int(s["charge_frequency_month"]),
            std=0,
            merchant_name=s["merchant_name"],
            product_description=s["product_description"],
        )
        for s in chosen
    ]


_ESSENTIAL_BILLS = ("electric", "water", "internet", "phone")


def _pick_bills(tags: set[str], rng: np.random.Generator, limit_cents: int) -> list[ScheduledCharge]:
    bills = {b["group"]: b for b in _catalog.load()["bills"]}
    k = int(rng.integers(4, 7))
    groups = list(_ESSENTIAL_BILLS)
    optional = [g for g, b in bills.items() if g not in groups and (tags & set(b["tags"]) or "*" in b["tags"])]
    for i in rng.permutation(len(optional)):
        if len(groups) >= k:
            break
        groups.append(optional[i])
    out = []
    for g in groups:
        b = bills[g]
        amount = min(int(rng.integers(b["amount_low"], b["amount_high"] + 1)) * 100, limit_cents // 2)
        out.append(
            ScheduledCharge(
                date_to_charge=int(rng.integers(1, 29)),
                amount=amount,
                charge_frequency_month=int(b["charge_frequency_month"]),
                std=min(to_cents(b["std"]), amount // 4),
                merchant_name=b["merchant_names"][int(rng.integers(len(b["merchant_names"])))],
                product_description=b["product_description"],
            )
        )
    return out


def derive_heuristic(persona: Persona, seed: int = 0) -> FinancialProfile:
    rng = derivation_rng(persona, seed)
    income = str(rng.choice(permitted_income_levels(persona)))
    lo, hi = _CREDIT_RANGES[income]
    credit_limit = int(rng.integers(lo // 500, hi // 500 + 1)) * 500
    archetype = ARCHETYPES[_stable_int(repr(list(persona.hobbies_and_interests_list)), persona.career_goals_and_ambitions) % 5]
    habit_p = {"low income": (0.3, 0.4, 0.3), "med income": (0.45, 0.4, 0.15), "high income": (0.6, 0.35, 0.05)}[income]
    payment_habit = str(rng.choice(PAYMENT_HABITS, p=habit_p))
    car = _car_ownership(persona, income)
    homeowner = _is_homeowner(persona, income)
    tags = persona_tags(persona, owns_car=car != "no_car", homeowner=homeowner)
    subs = _pick_subscriptions(persona, tags, rng)
    bills = _pick_bills(tags, rng, credit_limit * 100)
    return FinancialProfile(
        income_level=income,
        credit_limit=credit_limit,
        payment_habit=payment_habit,
        car_ownership=car,
        spending_patterns=ARCHETYPE_TEXT[archetype],
        subscriptions=tuple(subs),
        recurring_variable_bills=tuple(bills),
    )


def derive_financial_profile(persona: Persona, mode: str = "heuristic", seed: int = 0, client=None, **kw) -> FinancialProfile:
    """Derive a financial profile for ``persona``.

    ``heuristic`` is a pure function of (persona, seed). ``external`` asks a
    chat-completion endpoint (``client``, see :mod:`ledgerloop.llm`) with the
    bundled in-context examples and validates what comes back.
    """
    if mode == "heuristic":
        return derive_heuristic(persona, seed)
    if mode == "external":
        if client is None:
            raise ProfileDerivationError("external derivation requires a chat client")
        return _derive_external(persona, client)
    raise ValueError(f"unknown derivation mode {mode!r}")


_DERIVE_SYSTEM = (
    "You infer a plausible personal financial profile for a US adult from a persona description. "
    "Answer with a single JSON object with keys income_level (one of 'low income', 'med income', "
    "'high income'), credit_limit (whole dollars), payment_habit (one of automatic_payment, "
    "manual_on_due_date, irregular), car_ownership, spending_patterns (starts with one of Survivors, "
    "Savers, Balancers, Comfortables, Spenders followed by a colon), subscriptions and "
    "recurring_variable_bills (lists of objects with date_to_charge, amount, charge_frequency_month, "
    "std, merchant_name, product_description). Subscriptions have std 0."
)


def derivation_messages(persona: Persona) -> list[dict[str, str]]:
    msgs = [{"role": "system", "content": _DERIVE_SYSTEM}]
    for ex in _catalog.profile_examples():
        msgs.append({"role": "user", "content": json.dumps(ex["user_persona"], ensure_ascii=False)})
        msgs.append({"role": "assistant", "content": json.dumps(ex["user_financial_profile"], ensure_ascii=False)})
    msgs.append({"role": "user", "content": json.dumps(persona_to_dict(persona), ensure_ascii=False)})
    return msgs


def _extract_json_object(text: str) -> Any:
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        raise ValueError("no JSON object in response")
    return json.loads(text[start : end + 1])


def _derive_external(persona: Persona, client) -> FinancialProfile:
    messages = derivation_messages(persona)
    raw = ""
    for attempt in range(2):
        raw = client.complete(messages)
        try:
            obj = _extract_json_object(raw)
            profile, issues = parse_profile(obj)
            issues += validate_profile(profile)
        except (ValueError, TypeError) as exc:
            issues = [ValidationIssue("response", str(exc))]
        if not issues:
            return profile
        messages = messages + [
            {"role": "assistant", "content": raw},
            {"role": "user", "content": "The profile was invalid: " + "; ".join(map(str, issues)) + ". Reply with corrected JSON only."},
        ]
    raise ProfileDerivationError("external profile derivation returned an invalid profile", raw=raw)
