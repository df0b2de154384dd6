import json

import pytest

from ledgerloop.persona import (
    ARCHETYPES,
    DuplicateUserIdError,
    PersonaError,
    ProfileDerivationError,
    archetype_key,
    augmented_to_dict,
    derive_financial_profile,
    derive_heuristic,
    load_personas,
    parse_record,
    persona_tags,
    validate_profile,
    write_personas,
)
from ledgerloop.samples import bundled_records, synth_personas


def _jonathan_record():
    return json.loads(bundled_records()[0])


def test_jonathan_parses_exactly(jonathan):
    p, f = jonathan.user_persona, jonathan.user_financial_profile
    assert p.age == 72 and p.sex == "Male" and p.bachelors_field is None
    assert p.hobbies_and_interests_list[0] == "golfing"
    assert f.income_level == "med income" and f.credit_limit == 9500
    assert f.archetype == "balancer" and f.owns_car
    assert [c.amount for c in f.subscriptions] == [1299, 1500, 3000, 2500, 1549]
    assert f.subscriptions[2].charge_frequency_month == 3
    assert f.recurring_variable_bills[0].std == 3000
    assert "golf" in persona_tags(p, owns_car=True)


def test_round_trip(jonathan, tmp_path):
    path = tmp_path / "one.jsonl"
    write_personas(path, [jonathan])
    (again,) = load_personas(path)
    assert again == jonathan
    assert augmented_to_dict(again) == augmented_to_dict(jonathan)


def test_json_array_input(tmp_path):
    path = tmp_path / "arr.json"
    path.write_text(json.dumps([_jonathan_record()]))
    assert len(load_personas(path)) == 1


@pytest.mark.parametrize("mutate,field", [
    (lambda r: r["user_persona"].__setitem__("age", "12"), "age"),
    (lambda r: r["user_persona"].__setitem__("sex", "robot"), "sex"),
    (lambda r: r["user_financial_profile"].__setitem__("income_level", "rich"), "income_level"),
    (lambda r: r["user_financial_profile"].__setitem__("credit_limit", 95.5), "credit_limit"),
    (lambda r: r["user_financial_profile"].__setitem__("spending_patterns", "Hoarders: x"), "spending_patterns"),
    (lambda r: r["user_financial_profile"]["subscriptions"][0].__setitem__("std", 2.0), "subscriptions[0]"),
    (lambda r: r["user_financial_profile"]["subscriptions"][0].__setitem__("date_to_charge", 32), "subscriptions[0]"),
    (lambda r: r["user_financial_profile"]["subscriptions"][1].__setitem__("merchant_name", "Netflix"), "subscriptions"),
])
def test_validation_names_the_field(mutate, field):
    rec = _jonathan_record()
    mutate(rec)
    _, issues = parse_record(rec, 0)
    assert any(i.field == field for i in issues), issues


def test_bad_records_reported_with_line_numbers(tmp_path):
    good, bad = _jonathan_record(), _jonathan_record()
    bad["user_id"] = "other"
    bad["user_persona"]["age"] = "7"
    path = tmp_path / "p.jsonl"
    path.write_text(json.dumps(good) + "\n\n" + json.dumps(bad) + "\n")
    with pytest.raises(PersonaError) as err:
        load_personas(path)
    assert [ln for ln, _ in err.value.problems] == [3]


def test_duplicate_user_ids(tmp_path):
    path = tmp_path / "dup.jsonl"
    line = json.dumps(_jonathan_record())
    path.write_text(line + "\n" + line + "\n")
    with pytest.raises(DuplicateUserIdError, match="jonathan-wickliffe"):
        load_personas(path)


def test_missing_profile_requires_derivation(tmp_path):
    rec = _jonathan_record()
    del rec["user_financial_profile"]
    path = tmp_path / "raw.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(PersonaError):
        load_personas(path)
    (ap,) = load_personas(path, derive_mode="heuristic", seed=4)
    assert validate_profile(ap.user_financial_profile) == []


def test_heuristic_derivation_is_pure(bundled_personas):
    for ap in bundled_personas:
        a = derive_heuristic(ap.user_persona, seed=9)
        assert a == derive_heuristic(ap.user_persona, seed=9)
        assert validate_profile(a) == []
        for c in a.subscriptions:
            assert c.std == 0


def test_external_derivation_needs_client(jonathan):
    with pytest.raises(ProfileDerivationError):
        derive_financial_profile(jonathan.user_persona, "external")
    with pytest.raises(ValueError):
        derive_financial_profile(jonathan.user_persona, "psychic")


class _Scripted:
    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = []

    def complete(self, messages):
        self.calls.append(messages)
        return self.replies.pop(0)


def test_external_derivation_repairs_once(jonathan):
    good = json.dumps(_jonathan_record()["user_financial_profile"])
    client = _Scripted(["no json here", "Sure! " + good])
    prof = derive_financial_profile(jonathan.user_persona, "external", client=client)
    assert prof == jonathan.user_financial_profile
    assert "invalid" in client.calls[1][-1]["content"]
    with pytest.raises(ProfileDerivationError):
        derive_financial_profile(jonathan.user_persona, "external", client=_Scripted(["{}", "{}"]))


def test_archetype_key():
    assert archetype_key("Spenders: live for today") == "spender"
    assert archetype_key("saver") == "saver"
    assert archetype_key("Gamblers: no") is None
    assert len(ARCHETYPES) == 5


def test_synth_personas_valid_and_unique():
    ps = synth_personas(40, seed=2)
    assert len({p.user_id for p in ps}) == 40
    assert ps == synth_personas(40, seed=2)
    assert all(validate_profile(p.user_financial_profile) == [] for p in ps)
    assert {p.user_financial_profile.archetype for p in ps} == set(ARCHETYPES)
