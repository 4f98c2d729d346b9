import dataclasses
import json

import pytest

from iolwsim.analysis import classify_trace
from iolwsim.config import SCHEMA_PATH, ScenarioFile, bundled_scenarios, load_scenario, resolve_seed
from iolwsim.medium import run
from iolwsim.protocol import build_cell
from iolwsim.reports import check_expected, load_expected
from iolwsim.trace import EventKind

LONG_RUNNING = {"forgery"}

SCENARIOS = [
    pytest.param(path, id=path.stem, marks=[pytest.mark.slow] if path.stem in LONG_RUNNING else [])
    for path in bundled_scenarios()
]


def simulate(path):
    scenario = load_scenario(path)
    return scenario, run(build_cell(scenario.cell), scenario, resolve_seed(None, scenario))


def test_eight_scenarios_ship():
    assert len(bundled_scenarios()) == 8


def test_schema_lists_every_scenario_field():
    schema = json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))
    assert set(schema["properties"]) == {f.name for f in dataclasses.fields(ScenarioFile)}


@pytest.mark.parametrize("path", bundled_scenarios(), ids=lambda p: p.stem)
def test_bundled_scenario_is_valid(path):
    scenario = load_scenario(path)
    assert scenario.name == path.stem
    assert load_expected(path) is not None
    build_cell(scenario.cell)


@pytest.mark.parametrize("path", SCENARIOS)
def test_bundled_scenario_meets_its_expectation(path):
    _, trace = simulate(path)
    assert check_expected(classify_trace(trace), load_expected(path)) == []


def test_legacy_pairing_hands_over_the_table():
    scenario, trace = simulate(next(p for p in bundled_scenarios() if p.stem == "legacy_replay"))
    learned = [e for e in trace.of_kind(EventKind.KNOWLEDGE) if e.detail["what"] == "hopping_table"]
    assert learned and learned[0].cycle < scenario.attacks[0].schedule.start_cycle
    assert trace.of_kind(EventKind.ATTACK_STARTED)


def test_roaming_device_comes_home():
    _, trace = simulate(next(p for p in bundled_scenarios() if p.stem == "roaming"))
    actions = [e.detail["action"] for e in trace.of_kind(EventKind.PAIRING)]
    assert "roamed" in actions
    assert actions.index("returned_home") > actions.index("roamed")
    assert not any(action.startswith("rejected:") for action in actions)


def test_flooding_displaces_genuine_frames():
    _, trace = simulate(next(p for p in bundled_scenarios() if p.stem == "flooding"))
    displaced = [e for e in trace.of_kind(EventKind.DELIVERY) if e.detail["outcome"] == "Displaced"]
    assert any(e.detail["legitimate"] for e in displaced)
