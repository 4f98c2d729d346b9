"""
Scenario files: the JSON document a run is driven by, and its loader.

A scenario names the cell, the radio conditions, a timeline of operator events,
the attacks to mount and the experiments to run. Loading rejects unknown keys
and wrong types and reports JSON syntax errors with line and column.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from dataclasses_json import Undefined, dataclass_json
from dataclasses_json.undefined import UndefinedParameterError
from marshmallow import ValidationError

from iolwsim.adversary import AttackScenario
from iolwsim.detection import DetectionConfig
from iolwsim.errors import ConfigInvalid, IOFailure, IolwSimError
from iolwsim.medium import MediumConfig, parse_track
from iolwsim.protocol import CellConfig, PortId, TrackKey

logger = logging.getLogger(__name__)

SEED_ENV = "IOLWSIM_SEED"
SCENARIO_DIR = Path(__file__).parent / "scenarios"
SCHEMA_PATH = Path(__file__).parent / "scenario.schema.json"
EXPECTED_SUFFIX = ".expected.json"

# action -> (required args, optional args)
EVENT_ACTIONS: dict[str, tuple[frozenset[str], frozenset[str]]] = {
    "enter_service_mode": (frozenset({"track"}), frozenset()),
    "exit_service_mode": (frozenset({"track"}), frozenset()),
    "pair_by_unique_id": (frozenset({"port", "device_uid"}), frozenset({"mode", "slot_kind", "tag_bits", "safety"})),
    "pair_by_button": (frozenset({"port", "device_uid"}), frozenset({"slot_kind"})),
    "roam": (frozenset({"device_uid", "from_master", "to_master"}), frozenset({"lease_cycles"})),
    "return_home": (frozenset({"device_uid"}), frozenset()),
    "adaptive_switch": (frozenset({"track"}), frozenset({"blocklist"})),
    "reconfigure": (frozenset({"port"}), frozenset()),
}


class ExperimentKind(Enum):
    FORGERY = "forgery"
    BEP = "bep"
    RETRY_LAW = "retry_law"


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class ScenarioEvent:
    at_cycle: int
    action: str
    args: dict[str, Any] = field(default_factory=dict)


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class OutputConfig:
    """Where artifacts go; a relative directory is resolved against the working directory."""
    directory: Optional[str] = None
    trace: bool = True
    summary: bool = True
    outcomes: bool = True
    reports: bool = True


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class ExperimentConfig:
    kind: ExperimentKind
    params: dict[str, Any] = field(default_factory=dict)


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class ScenarioFile:
    name: str
    cell: CellConfig
    description: str = ""
    medium: MediumConfig = field(default_factory=MediumConfig)
    events: list[ScenarioEvent] = field(default_factory=list)
    attacks: list[AttackScenario] = field(default_factory=list)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    seed: Optional[int] = None
    horizon_cycles: int = 100
    reconfigure_after_cycles: Optional[int] = None
    outputs: OutputConfig = field(default_factory=OutputConfig)
    experiments: list[ExperimentConfig] = field(default_factory=list)

    def only_attack(self, name: str) -> "ScenarioFile":
        """Copy of the scenario that mounts just the named attack."""
        chosen = [a for a in self.attacks if a.name == name]
        if not chosen:
            raise ConfigInvalid(f"scenario {self.name} has no attack named {name!r}")
        data = self.to_dict(encode_json=True)
        return ScenarioFile.from_dict({**data, "attacks": [chosen[0].to_dict(encode_json=True)]})


def resolve_seed(cli_seed: Optional[int], scenario: Optional[ScenarioFile] = None) -> int:
    """--seed wins, then the scenario, then IOLWSIM_SEED, then 0."""
    if cli_seed is not None:
        return cli_seed
    if scenario is not None and scenario.seed is not None:
        return scenario.seed
    value = os.environ.get(SEED_ENV)
    if value:
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigInvalid(f"{SEED_ENV}={value!r} is not an integer") from exc
    return 0


def _known_ports(cell: CellConfig) -> tuple[set[TrackKey], set[PortId]]:
    tracks: set[TrackKey] = set()
    ports: set[PortId] = set()
    for master in cell.masters:
        for track in master.tracks:
            tracks.add((master.master_id, track.track_id))
            ports.update(PortId(master.master_id, track.track_id, slot.slot_id) for slot in track.slots)
    return tracks, ports


def _check_consistency(scenario: ScenarioFile) -> None:
    tracks, ports = _known_ports(scenario.cell)
    if scenario.horizon_cycles < 1:
        raise ConfigInvalid("horizon_cycles must be at least 1")
    if scenario.reconfigure_after_cycles is not None and scenario.reconfigure_after_cycles < 1:
        raise ConfigInvalid("reconfigure_after_cycles must be at least 1")
    names = [attack.name for attack in scenario.attacks]
    if len(names) != len(set(names)):
        raise ConfigInvalid("attack names must be unique")
    for index, event in enumerate(scenario.events):
        where = f"events[{index}] ({event.action})"
        if event.action not in EVENT_ACTIONS:
            raise ConfigInvalid(f"{where}: unknown action; expected one of {', '.join(sorted(EVENT_ACTIONS))}")
        if event.at_cycle < 0:
            raise ConfigInvalid(f"{where}: at_cycle must not be negative")
        required, optional = EVENT_ACTIONS[event.action]
        missing = required - event.args.keys()
        unknown = event.args.keys() - required - optional
        if missing:
            raise ConfigInvalid(f"{where}: missing {', '.join(sorted(missing))}")
        if unknown:
            raise ConfigInvalid(f"{where}: unknown {', '.join(sorted(unknown))}")
        try:
            if "track" in event.args and parse_track(str(event.args["track"])) not in tracks:
                raise ConfigInvalid(f"{where}: no track {event.args['track']} in the cell")
            if "port" in event.args and PortId.parse(str(event.args["port"])) not in ports:
                raise ConfigInvalid(f"{where}: no port {event.args['port']} in the cell")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, ConfigInvalid):
                raise
            raise ConfigInvalid(f"{where}: {exc}") from exc
    for attack in scenario.attacks:
        try:
            port = attack.port
        except (ValueError, IndexError) as exc:
            raise ConfigInvalid(f"attack {attack.name}: bad target {attack.target!r}") from exc
        if port not in ports:
            raise ConfigInvalid(f"attack {attack.name}: no port {attack.target} in the cell")


def parse_scenario(text: str, source: str = "<scenario>") -> ScenarioFile:
    """Validate scenario JSON text and build the ScenarioFile."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{source}: {exc.msg}", line=exc.lineno, column=exc.colno) from exc
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{source}: top level must be a JSON object")
    try:
        scenario = ScenarioFile.schema().load(data)
    except ValidationError as exc:
        raise ConfigInvalid(f"{source}: {exc.messages}") from exc
    except UndefinedParameterError as exc:
        raise ConfigInvalid(f"{source}: {exc}") from exc
    except (IolwSimError, ValueError, TypeError, KeyError) as exc:
        raise ConfigInvalid(f"{source}: {exc}") from exc
    _check_consistency(scenario)
    return scenario


def load_scenario(path: Path) -> ScenarioFile:
    """Read and validate a scenario file.

    Raises:
        ConfigInvalid: missing file, JSON syntax error (with line/column), unknown
            keys, wrong types or inconsistent content.
        IOFailure: the file exists but cannot be read.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigInvalid(f"{path}: no such scenario file") from exc
    except OSError as exc:
        raise IOFailure(f"{path}: {exc.strerror or exc}") from exc
    scenario = parse_scenario(text, str(path))
    logger.info("loaded scenario %s from %s", scenario.name, path)
    return scenario


def expected_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name.removesuffix(".json") + EXPECTED_SUFFIX)


def bundled_scenarios() -> list[Path]:
    """Scenario files that ship with the package, sorted by name."""
    return sorted(p for p in SCENARIO_DIR.glob("*.json") if not p.name.endswith(EXPECTED_SUFFIX))


def find_scenario(name_or_path: str) -> Path:
    """A path as given, or the bundled scenario of that name."""
    candidate = Path(name_or_path)
    if candidate.exists():
        return candidate
    bundled = SCENARIO_DIR / (name_or_path if name_or_path.endswith(".json") else f"{name_or_path}.json")
    return bundled if bundled.exists() else candidate
