import os

import pytest
from hypothesis import HealthCheck, settings

from iolwsim.config import ScenarioFile
from iolwsim.protocol import (
    CellConfig,
    DeviceConfig,
    Direction,
    FrameKind,
    MasterConfig,
    SecurityMode,
    SlotConfig,
    TrackConfig,
)
from iolwsim.secure_channel import establish_link

settings.register_profile(
    "iolwsim",
    derandomize=True,
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "iolwsim"))

SECRET = bytes(range(16))


def one_track_cell(*devices: DeviceConfig, master_id: int = 1, empty_slots: int = 0, **track) -> CellConfig:
    """Single master, single track; devices fill S0.., then ``empty_slots`` unpaired DSlot ports."""
    slots = [SlotConfig(slot_id=i, device=device) for i, device in enumerate(devices)]
    slots += [SlotConfig(slot_id=len(devices) + i, slot_kind=FrameKind.DSLOT) for i in range(empty_slots)]
    track_config = TrackConfig(track_id=0, slots=slots, **track)
    return CellConfig(masters=[MasterConfig(master_id=master_id, tracks=[track_config])])


@pytest.fixture
def secured_device() -> DeviceConfig:
    return DeviceConfig(4097, FrameKind.DSLOT, SecurityMode.SECURED, 32, safety=True)


@pytest.fixture
def legacy_device() -> DeviceConfig:
    return DeviceConfig(4098, FrameKind.DSLOT, SecurityMode.LEGACY)


@pytest.fixture
def small_cell(secured_device, legacy_device) -> CellConfig:
    return one_track_cell(secured_device, legacy_device, empty_slots=1, hopping_seed=7)


@pytest.fixture
def link_pair():
    """(master endpoint, device endpoint) of one secured link with a 32-bit tag."""
    master = establish_link(SECRET, 1, 4097, 32, tx_leg=Direction.DOWNLINK)
    device = establish_link(SECRET, 1, 4097, 32, tx_leg=Direction.UPLINK)
    return master, device


@pytest.fixture
def write_scenario(tmp_path):
    """Write a ScenarioFile (or raw text) to a temporary file and return its path."""

    def write(content: ScenarioFile | str, name: str = "scenario.json"):
        path = tmp_path / name
        text = content if isinstance(content, str) else content.to_json(indent=2)
        path.write_text(text, encoding="utf-8")
        return path

    return write
