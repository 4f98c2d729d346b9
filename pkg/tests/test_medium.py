from collections import Counter

import numpy as np
import pytest

from conftest import one_track_cell
from iolwsim.config import ScenarioEvent, ScenarioFile
from iolwsim.errors import InvalidParams, InvalidScenario
from iolwsim.medium import (
    Burst,
    JamWindow,
    Medium,
    MediumConfig,
    Outcome,
    Simulation,
    air_octets,
    bsc_p_for_trial_failure,
    crc8,
    flip_bits,
    run,
    safe_state_monitor,
    strip_checksum,
    with_checksum,
)
from iolwsim.protocol import DeviceConfig, Direction, FrameKind, SecurityMode, build_cell
from iolwsim.secure_channel import LinkState
from iolwsim.trace import EventKind


def burst(burst_id: int, channel: int = 10, slot: int = 0, origin: str = "a", frame: bytes = b"\x00\x11") -> Burst:
    return Burst(burst_id, 0, channel, slot, Direction.DOWNLINK, frame, origin, FrameKind.DSLOT)


def scenario(config, **fields) -> ScenarioFile:
    return ScenarioFile(name="test", cell=config, **fields)


# =============================================================================
# Medium
# =============================================================================


def test_lone_burst_is_delivered_intact():
    (outcome,) = Medium().transmit([burst(1)])
    assert outcome.outcome is Outcome.DELIVERED
    assert outcome.received == b"\x00\x11"
    assert outcome.bit_flips == 0


def test_concurrent_bursts_collide():
    outcomes = Medium().transmit([burst(1, origin="m1"), burst(2, origin="m2"), burst(3, channel=11)])
    assert [o.outcome for o in outcomes] == [Outcome.COLLIDED, Outcome.COLLIDED, Outcome.DELIVERED]
    assert outcomes[0].culprits == ("m2",)
    assert outcomes[1].culprits == ("m1",)


def test_different_slot_positions_do_not_collide():
    outcomes = Medium().transmit([burst(1), burst(2, slot=1)])
    assert all(o.delivered for o in outcomes)


def test_jammed_channel():
    outcomes = Medium().transmit([burst(1), burst(2, channel=11)], jammed={10: "jammer"})
    assert outcomes[0].outcome is Outcome.JAMMED
    assert outcomes[0].culprits == ("jammer",)
    assert outcomes[1].delivered


def test_jamming_beats_collision():
    outcomes = Medium().transmit([burst(1), burst(2)], jammed={10: "jammer"})
    assert {o.outcome for o in outcomes} == {Outcome.JAMMED}


def test_nobody_listening():
    (outcome,) = Medium().transmit([burst(1)], listening=lambda b: False)
    assert outcome.outcome is Outcome.NO_LISTENER


def test_noise_is_a_function_of_position():
    bursts = [burst(1, frame=bytes(15))]
    first = Medium(seed=4, bsc_p=0.3).transmit(bursts)
    again = Medium(seed=4, bsc_p=0.3).transmit(bursts)
    assert first == again
    assert first[0].bit_flips > 0


def test_bsc_p_outside_range():
    with pytest.raises(InvalidParams):
        Medium(bsc_p=0.6)
    with pytest.raises(InvalidParams):
        MediumConfig(bsc_p=-0.1)


def test_flip_bits_at_one_half_scrambles_frames():
    rng = np.random.default_rng(0)
    changed = sum(flip_bits(bytes(15), 0.5, rng)[0] != bytes(15) for _ in range(1000))
    assert changed == 1000


def test_crc8_check_value():
    assert crc8(b"123456789") == 0xF4


def test_checksum_detects_a_flipped_bit():
    air = with_checksum(b"\x00\x42")
    assert strip_checksum(air) == b"\x00\x42"
    assert strip_checksum(bytes([air[0] ^ 0x01]) + air[1:]) is None
    assert strip_checksum(b"\x00") is None


def test_bsc_p_for_trial_failure_covers_both_legs():
    p = bsc_p_for_trial_failure(0.1, 128)
    assert (1 - p) ** 256 == pytest.approx(0.9)
    uneven = bsc_p_for_trial_failure(0.1, 128, 24)
    assert (1 - uneven) ** (128 + 24) == pytest.approx(0.9)
    assert bsc_p_for_trial_failure(0.0, 128) == 0.0


@pytest.mark.parametrize(("q", "bits"), [(1.0, 120), (-0.1, 120), (0.1, 0)])
def test_bsc_p_for_trial_failure_limits(q, bits):
    with pytest.raises(InvalidParams):
        bsc_p_for_trial_failure(q, bits)


def test_air_octets(secured_device, legacy_device):
    assert air_octets(secured_device) == 16
    assert air_octets(legacy_device) == 16
    assert air_octets(DeviceConfig(4099, FrameKind.DSLOT, SecurityMode.SECURED, 8)) == 16
    assert air_octets(DeviceConfig(4100, FrameKind.SSLOT, SecurityMode.LEGACY)) == 3


def test_safe_state_monitor_threshold():
    monitor = safe_state_monitor("master@M1/T0/S0", 3)
    monitor.valid_exchange(10)
    assert not monitor.end_of_cycle(11)
    assert not monitor.end_of_cycle(12)
    assert monitor.end_of_cycle(13)
    assert monitor.safe
    assert monitor.valid_exchange(14)
    with pytest.raises(InvalidParams):
        safe_state_monitor("x", 0)


# =============================================================================
# Simulation runs
# =============================================================================


@pytest.fixture
def secured_cell(secured_device):
    return build_cell(one_track_cell(secured_device))


def test_clean_channel_needs_no_retries(secured_cell):
    trace = run(secured_cell, None, seed=1, horizon_cycles=100)
    assert trace.complete
    summary = trace.summary_frame().loc["M1/T0/S0"]
    assert summary["exchanges"] == 100
    assert summary["failed_cycles"] == 0
    assert summary["retries"] == 0
    assert summary["accepted"] == 100
    assert not trace.of_kind(EventKind.SAFE_STATE_ENTERED, EventKind.ALERT)


def test_legacy_and_secured_ports_share_a_track(small_cell):
    trace = run(build_cell(small_cell), None, seed=1, horizon_cycles=50)
    summary = trace.summary_frame()
    assert list(summary.index) == ["M1/T0/S0", "M1/T0/S1"]
    assert (summary["accepted"] == 50).all()


def test_same_seed_gives_identical_traces(small_cell):
    config = scenario(small_cell, medium=MediumConfig(bsc_p=0.01))
    first = run(build_cell(small_cell), config, seed=9, horizon_cycles=60)
    second = run(build_cell(small_cell), config, seed=9, horizon_cycles=60)
    assert first.to_jsonl() == second.to_jsonl()
    assert first.summary_frame().equals(second.summary_frame())


def test_noise_triggers_retries_within_the_bound(small_cell):
    config = scenario(small_cell, medium=MediumConfig(bsc_p=0.01))
    trace = run(build_cell(small_cell), config, seed=2, horizon_cycles=200)
    exchanges = trace.of_kind(EventKind.EXCHANGE)
    assert all(1 <= e.detail["trials"] <= 3 for e in exchanges)
    assert any(e.detail["trials"] > 1 for e in exchanges)
    grants = Counter((e.cycle, e.port) for e in trace.of_kind(EventKind.GRANT))
    assert max(grants.values()) <= 3


def test_noise_never_locks_the_device_link(secured_cell):
    config = scenario(secured_cell.config, medium=MediumConfig(bsc_p=0.01), reconfigure_after_cycles=3)
    sim = Simulation(secured_cell, config, seed=7, horizon_cycles=400)
    trace = sim.run()
    (links,) = sim.pairing.links.values()
    assert links.device.state is LinkState.ACTIVE
    late = [e.detail["success"] for e in trace.of_kind(EventKind.EXCHANGE) if e.cycle >= 350]
    assert len(late) == 50
    assert sum(late) >= 3


def test_every_burst_has_exactly_one_outcome(small_cell):
    config = scenario(small_cell, medium=MediumConfig(bsc_p=0.01, jam=[JamWindow(5, 8)]))
    trace = run(build_cell(small_cell), config, seed=3, horizon_cycles=30)
    bursts = [e.detail["burst_id"] for e in trace.of_kind(EventKind.BURST)]
    deliveries = Counter(e.detail["burst_id"] for e in trace.of_kind(EventKind.DELIVERY))
    assert sorted(bursts) == sorted(deliveries)
    assert set(deliveries.values()) == {1}
    assert len(trace.of_kind(EventKind.GRANT)) >= len(bursts) // 2


def test_jamming_drives_the_safety_endpoint_into_safe_state(secured_cell):
    config = scenario(secured_cell.config, medium=MediumConfig(jam=[JamWindow(10, 30)]))
    trace = run(secured_cell, config, seed=1, horizon_cycles=40)
    entered = trace.of_kind(EventKind.SAFE_STATE_ENTERED)
    assert {e.detail["endpoint"] for e in entered} == {"master@M1/T0/S0", "device@M1/T0/S0"}
    assert all(e.detail["safety_impact"] is False and e.detail["safety"] for e in entered)
    assert min(e.cycle for e in entered) == 12
    assert trace.of_kind(EventKind.SAFE_STATE_LEFT)
    assert trace.summary_frame().loc["M1/T0/S0", "failed_cycles"] == 20


def test_short_outage_stays_below_the_watchdog(secured_cell):
    config = scenario(secured_cell.config, medium=MediumConfig(jam=[JamWindow(10, 12)]))
    trace = run(secured_cell, config, seed=1, horizon_cycles=30)
    assert not trace.of_kind(EventKind.SAFE_STATE_ENTERED)
    assert trace.summary_frame().loc["M1/T0/S0", "failed_cycles"] == 2


def test_subset_jamming_is_defeated_by_hopping(secured_cell):
    config = scenario(secured_cell.config, medium=MediumConfig(jam=[JamWindow(0, 50, channels=["3-20"])]))
    trace = run(secured_cell, config, seed=1, horizon_cycles=50)
    assert trace.summary_frame().loc["M1/T0/S0", "failed_cycles"] == 0
    assert trace.of_kind(EventKind.DELIVERY)
    assert any(e.detail["outcome"] == Outcome.JAMMED.value for e in trace.of_kind(EventKind.DELIVERY))


def test_sniffer_is_passive(small_cell):
    config = scenario(small_cell, medium=MediumConfig(bsc_p=0.005, jam=[JamWindow(10, 20)]))
    watched = run(build_cell(small_cell), config, seed=5, horizon_cycles=40)
    unwatched = run(build_cell(small_cell), config, seed=5, horizon_cycles=40, sniffer=False)
    assert watched.of_kind(EventKind.ALERT)
    assert watched.without(EventKind.ALERT) == unwatched.without(EventKind.ALERT)


def test_adaptive_switch_activates_at_the_next_cycle(secured_cell):
    events = [ScenarioEvent(10, "adaptive_switch", {"track": "M1/T0", "blocklist": ["20-30"]})]
    sim = Simulation(secured_cell, scenario(secured_cell.config, events=events), seed=1, horizon_cycles=20)
    trace = sim.run()
    switches = trace.of_kind(EventKind.TABLE_SWITCH)
    assert [(e.cycle, e.detail["active"]) for e in switches] == [(10, False), (11, True)]
    assert sim.cell.tables[(1, 0)].generation == 1
    late = [e.detail["channel"] for e in trace.of_kind(EventKind.GRANT) if e.cycle >= 11]
    assert not any(20 <= channel <= 30 for channel in late)
    assert trace.summary_frame().loc["M1/T0/S0", "failed_cycles"] == 0


def test_rejected_event_is_recorded(secured_cell):
    events = [ScenarioEvent(2, "pair_by_unique_id", {"port": "M1/T0/S0", "device_uid": 9})]
    trace = run(secured_cell, scenario(secured_cell.config, events=events), seed=1, horizon_cycles=5)
    (rejected,) = [e for e in trace.of_kind(EventKind.PAIRING) if e.detail["action"].startswith("rejected:")]
    assert rejected.detail["error"] == "NotInServiceMode"


def test_a_simulation_runs_once(secured_cell):
    sim = Simulation(secured_cell, None, seed=0, horizon_cycles=2)
    sim.run()
    with pytest.raises(InvalidScenario):
        sim.run()
