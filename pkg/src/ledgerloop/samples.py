"""Synthetic sample personas for desk-scale corpora.

The bundled ``sample_personas.jsonl`` holds a handful of hand-written
records; :func:`synth_personas` composes any number of additional ones from
attribute pools so corpus runs can scale without an external persona set.
"""

from __future__ import annotations

from typing import Any

import numpy as np

from . import catalog
from .persona import AugmentedPersona, default_user_id, derive_heuristic, parse_persona

_FIRST = {
    "Male": ["James", "Robert", "Luis", "Kevin", "Andre", "Michael", "Daniel", "Hiro", "Samuel", "Omar", "Trevor", "Carlos",
             "Ethan", "Marcus", "Raj", "Paul", "Gary", "Noah", "Victor", "Dennis"],
    "Female": ["Linda", "Aisha", "Mei", "Karen", "Rosa", "Emily", "Grace", "Fatima", "Hannah", "Nicole", "Beth", "Olivia",
               "Tanya", "Lucia", "Joyce", "Amara", "Megan", "Irene", "Chloe", "Dana"],
}
_CITIES = ["Akron", "Boise", "Tucson", "Raleigh", "Spokane", "Omaha", "Fresno", "Mobile", "Toledo", "Reno", "Albany",
           "Wichita", "Madison", "Savannah", "Eugene", "Tulsa", "Lansing", "Provo", "Duluth", "Macon"]
# (occupation, education levels, bachelors field or None, description)
_JOBS = [
    ("retail_salesperson", ["high_school", "some_college"], None, "sells appliances at a big-box store"),
    ("registered_nurse", ["associates", "bachelors"], "health_professions", "works twelve-hour shifts on a cardiac ward"),
    ("software_developer", ["bachelors", "graduate"], "computer_and_information_sciences", "builds web services for a regional bank"),
    ("truck_driver", ["high_school", "9th_12th_no_diploma"], None, "hauls freight on long regional routes"),
    ("elementary_teacher", ["bachelors", "graduate"], "education", "teaches third grade at a public school"),
    ("cook", ["less_than_9th", "high_school"], None, "runs the grill line at a busy diner"),
    ("accountant", ["bachelors", "graduate"], "business", "prepares audits for small businesses"),
    ("not_in_workforce", ["high_school", "some_college", "bachelors"], None, "is retired and keeps busy with volunteer work"),
    ("electrician", ["high_school", "associates"], None, "wires new housing developments"),
    ("student", ["high_school", "some_college"], None, "studies full time at the community college"),
    ("marketing_manager", ["bachelors", "graduate"], "business", "leads campaigns for a consumer brand"),
    ("home_health_aide", ["high_school", "9th_12th_no_diploma"], None, "cares for elderly clients in their homes"),
    ("physician", ["graduate"], "biology", "practices family medicine at a clinic"),
    ("warehouse_worker", ["high_school", "9th_12th_no_diploma"], None, "picks orders at a fulfillment center"),
    ("office_clerk", ["high_school", "some_college"], None, "handles records for a county office"),
    ("financial_analyst", ["bachelors", "graduate"], "business", "models budgets for a hospital system"),
    ("hair_stylist", ["high_school", "some_college"], None, "rents a chair at a downtown salon"),
    ("mechanic", ["high_school", "associates"], None, "repairs cars at an independent garage"),
]
_HOBBIES = ["golfing", "gardening", "reading mystery novels", "fishing", "video games", "baking", "knitting", "hiking",
            "woodworking", "yoga", "running", "board games", "photography", "cooking", "travel", "watching football",
            "coin collecting", "painting", "playing guitar", "dog walking", "birdwatching", "cycling", "chess",
            "crossword puzzles", "wine tasting", "volunteering at church", "movies", "camping", "dancing", "basketball",
            "home improvement", "stamp collecting", "learning languages", "theater", "meditation", "tennis"]
_SKILLS = ["budgeting", "customer service", "negotiation", "data entry", "public speaking", "first aid", "scheduling",
           "carpentry", "cooking", "spreadsheets", "mentoring", "sales", "writing", "problem solving", "teamwork"]
_TRAITS = ["thoughtful", "energetic", "cautious", "outgoing", "pragmatic", "curious", "easygoing", "ambitious",
           "meticulous", "generous", "impulsive", "reserved"]
_MARITAL = ["never_married", "married_present", "divorced", "widowed", "separated"]


def _persona_dict(rng: np.random.Generator) -> dict[str, Any]:
    sex = ["Male", "Female"][int(rng.integers(2))]
    name = _FIRST[sex][int(rng.integers(len(_FIRST[sex])))]
    pron = "he" if sex == "Male" else "she"
    poss = "his" if sex == "Male" else "her"
    job, edus, field, desc = _JOBS[int(rng.integers(len(_JOBS)))]
    edu = edus[int(rng.integers(len(edus)))]
    if job == "not_in_workforce":
        age = int(rng.integers(62, 90))
    elif job == "student":
        age = int(rng.integers(18, 27))
    else:
        age = int(rng.integers(22, 66))
    marital = "never_married" if age < 24 else _MARITAL[int(rng.integers(len(_MARITAL)))]
    if marital == "widowed" and age < 45:
        marital = "divorced"
    hobbies = [_HOBBIES[i] for i in rng.choice(len(_HOBBIES), size=int(rng.integers(3, 6)), replace=False)]
    skills = [_SKILLS[i] for i in rng.choice(len(_SKILLS), size=int(rng.integers(2, 5)), replace=False)]
    t1, t2 = (_TRAITS[i] for i in rng.choice(len(_TRAITS), size=2, replace=False))
    city = _CITIES[int(rng.integers(len(_CITIES)))]
    transit = rng.random() < 0.12
    commute = f"{name} takes public transit everywhere" if transit else f"{name} drives around {city} in an older sedan"
    return {
        "persona": f"A {t1}, {t2} person, {name} approaches life in {city} with a steady sense of purpose",
        "professional_persona": f"{name} {desc} in {city}",
        "sports_persona": f"{name} enjoys {hobbies[0]} whenever {pron} has free time",
        "arts_persona": f"{name} spends quiet evenings on {hobbies[1]}",
        "travel_persona": f"{commute} and plans one trip a year around {hobbies[-1]}",
        "culinary_persona": f"{name} likes simple home cooking and the occasional dinner out with {poss} friends",
        "skills_and_expertise_list": repr(skills),
        "hobbies_and_interests_list": repr(hobbies),
        "career_goals_and_ambitions": f"{name} wants to keep growing as someone who {desc} and build financial security.",
        "sex": sex,
        "age": str(age),
        "marital_status": marital,
        "education_level": edu,
        "bachelors_field": field if edu in ("bachelors", "graduate") else None,
        "occupation": job,
    }


def synth_persona_records(n: int, seed: int = 0) -> list[dict[str, Any]]:
    """``n`` raw persona records (``{"user_persona": {...}}``), deterministic in ``seed``."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5EED])))
    return [{"user_persona": _persona_dict(rng)} for _ in range(n)]


def synth_personas(n: int, seed: int = 0) -> list[AugmentedPersona]:
    out = []
    for i, rec in enumerate(synth_persona_records(n, seed)):
        p, issues = parse_persona(rec["user_persona"])
        assert not issues, issues
        out.append(AugmentedPersona(p, derive_heuristic(p, seed), default_user_id(i, p)))
    return out


def bundled_records() -> list[str]:
    return catalog.sample_persona_lines()
