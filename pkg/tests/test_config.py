import json

import pytest

from iolwsim.adversary import AttackKind, AttackScenario
from iolwsim.config import (
    SCENARIO_DIR,
    SEED_ENV,
    ScenarioEvent,
    ScenarioFile,
    bundled_scenarios,
    expected_path,
    find_scenario,
    load_scenario,
    parse_scenario,
    resolve_seed,
)
from iolwsim.errors import ConfigInvalid


@pytest.fixture
def scenario(small_cell) -> ScenarioFile:
    return ScenarioFile(name="base", cell=small_cell, horizon_cycles=40)


def document(scenario: ScenarioFile) -> dict:
    return json.loads(scenario.to_json())


def test_scenario_survives_a_trip_through_a_file(scenario, write_scenario):
    scenario.events = [ScenarioEvent(3, "enter_service_mode", {"track": "M1/T0"})]
    loaded = load_scenario(write_scenario(scenario))
    assert loaded == scenario


def test_json_syntax_error_has_a_position(write_scenario):
    path = write_scenario('{\n  "name": "x",\n  "cell": ]\n}')
    with pytest.raises(ConfigInvalid) as info:
        load_scenario(path)
    assert info.value.line == 3
    assert info.value.column == 11


def test_top_level_must_be_an_object():
    with pytest.raises(ConfigInvalid, match="JSON object"):
        parse_scenario("[1, 2]")


def test_unknown_key_is_rejected(scenario):
    data = document(scenario)
    data["colour"] = "red"
    with pytest.raises(ConfigInvalid, match="colour"):
        parse_scenario(json.dumps(data))


def test_unknown_nested_key_is_rejected(scenario):
    data = document(scenario)
    data["medium"]["noise"] = 0.1
    with pytest.raises(ConfigInvalid):
        parse_scenario(json.dumps(data))


def test_wrong_type_is_rejected(scenario):
    data = document(scenario)
    data["horizon_cycles"] = "forty"
    with pytest.raises(ConfigInvalid):
        parse_scenario(json.dumps(data))


def test_out_of_range_medium_is_rejected(scenario):
    data = document(scenario)
    data["medium"]["bsc_p"] = 0.9
    with pytest.raises(ConfigInvalid, match="bsc_p"):
        parse_scenario(json.dumps(data))


def test_missing_file():
    with pytest.raises(ConfigInvalid, match="no such scenario file"):
        load_scenario(SCENARIO_DIR / "does-not-exist.json")


@pytest.mark.parametrize(
    ("event", "message"),
    [
        ({"at_cycle": 1, "action": "teleport", "args": {}}, "unknown action"),
        ({"at_cycle": -1, "action": "enter_service_mode", "args": {"track": "M1/T0"}}, "negative"),
        ({"at_cycle": 1, "action": "pair_by_button", "args": {"port": "M1/T0/S2"}}, "missing device_uid"),
        ({"at_cycle": 1, "action": "return_home", "args": {"device_uid": 1, "to": 2}}, "unknown to"),
        ({"at_cycle": 1, "action": "enter_service_mode", "args": {"track": "M9/T0"}}, "no track"),
        ({"at_cycle": 1, "action": "reconfigure", "args": {"port": "M1/T0/S7"}}, "no port"),
        ({"at_cycle": 1, "action": "reconfigure", "args": {"port": "nonsense"}}, "events\\[0\\]"),
    ],
)
def test_bad_events(scenario, event, message):
    data = document(scenario)
    data["events"] = [event]
    with pytest.raises(ConfigInvalid, match=message):
        parse_scenario(json.dumps(data))


def test_attack_names_are_unique(scenario):
    data = document(scenario)
    attack = AttackScenario("twice", AttackKind.JAMMING, "M1/T0/S0").to_dict(encode_json=True)
    data["attacks"] = [attack, attack]
    with pytest.raises(ConfigInvalid, match="unique"):
        parse_scenario(json.dumps(data))


def test_attack_on_a_missing_port(scenario):
    data = document(scenario)
    data["attacks"] = [AttackScenario("far", AttackKind.JAMMING, "M2/T0/S0").to_dict(encode_json=True)]
    with pytest.raises(ConfigInvalid, match="no port"):
        parse_scenario(json.dumps(data))


def test_horizon_must_be_positive(scenario):
    data = document(scenario)
    data["horizon_cycles"] = 0
    with pytest.raises(ConfigInvalid, match="horizon"):
        parse_scenario(json.dumps(data))


def test_only_attack(scenario):
    scenario.attacks = [
        AttackScenario("a", AttackKind.JAMMING, "M1/T0/S0"),
        AttackScenario("b", AttackKind.JAMMING, "M1/T0/S1"),
    ]
    narrowed = scenario.only_attack("b")
    assert [a.name for a in narrowed.attacks] == ["b"]
    assert len(scenario.attacks) == 2
    with pytest.raises(ConfigInvalid, match="no attack named"):
        scenario.only_attack("c")


# =============================================================================
# Seeds
# =============================================================================


def test_command_line_seed_wins(scenario, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "5")
    scenario.seed = 4
    assert resolve_seed(3, scenario) == 3


def test_scenario_seed_beats_the_environment(scenario, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "5")
    scenario.seed = 4
    assert resolve_seed(None, scenario) == 4


def test_environment_seed(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "5")
    assert resolve_seed(None) == 5


def test_default_seed(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert resolve_seed(None) == 0


def test_bad_environment_seed(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "seven")
    with pytest.raises(ConfigInvalid, match=SEED_ENV):
        resolve_seed(None)


# =============================================================================
# Bundled scenarios
# =============================================================================


def test_find_scenario_by_name():
    assert find_scenario("jamming") == SCENARIO_DIR / "jamming.json"
    assert find_scenario("jamming.json") == SCENARIO_DIR / "jamming.json"


def test_find_scenario_prefers_an_existing_path(write_scenario):
    path = write_scenario("{}", name="jamming.json")
    assert find_scenario(str(path)) == path


def test_unknown_name_is_passed_through():
    assert str(find_scenario("nowhere")) == "nowhere"


def test_bundled_list_skips_expectations():
    names = [p.name for p in bundled_scenarios()]
    assert "jamming.json" in names
    assert not any(name.endswith(".expected.json") for name in names)
    assert expected_path(SCENARIO_DIR / "jamming.json").name == "jamming.expected.json"
