import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import one_track_cell
from iolwsim.errors import CapacityExceeded, DuplicateId, InvalidParams, MalformedFrame, UnknownTrack
from iolwsim.hopping import next_channel
from iolwsim.protocol import (
    CellConfig,
    ControlOctet,
    DeviceConfig,
    Direction,
    Frame,
    FrameKind,
    MasterConfig,
    PortId,
    SecurityMode,
    SlotConfig,
    TimingModel,
    TrackConfig,
    build_cell,
    decode_frame,
    encode_frame,
    payload_capacity,
    schedule_cycle,
)


def legacy_sslot(uid: int) -> DeviceConfig:
    return DeviceConfig(uid, FrameKind.SSLOT, SecurityMode.LEGACY)


def full_cell(kind: FrameKind, devices: int) -> CellConfig:
    """Fill masters 1..3, tracks 0..4, slots 0..7 in order with ``devices`` devices."""
    uid = iter(range(1, devices + 1))
    masters = []
    remaining = devices
    for master_id in (1, 2, 3):
        tracks = []
        for track_id in range(5):
            slots = []
            for slot_id in range(8):
                if remaining == 0:
                    break
                security = SecurityMode.LEGACY if kind is FrameKind.SSLOT else SecurityMode.SECURED
                slots.append(SlotConfig(slot_id, device=DeviceConfig(next(uid), kind, security)))
                remaining -= 1
            if slots:
                tracks.append(TrackConfig(track_id, slots, hopping_seed=track_id))
        if tracks:
            masters.append(MasterConfig(master_id, tracks))
    return CellConfig(masters=masters)


# =============================================================================
# build_cell
# =============================================================================


def test_minimal_cell_has_a_table_per_track():
    cell = build_cell(one_track_cell(*(legacy_sslot(uid) for uid in range(1, 9))))
    assert cell.track_keys() == [(1, 0)]
    assert len(cell.ports()) == 8
    grants = schedule_cycle(cell, (1, 0), 0)
    assert sum(1 for g in grants if g.sub_cycle_index == 0) == 8


def test_cell_of_120_sslots_is_accepted():
    cell = build_cell(full_cell(FrameKind.SSLOT, 120))
    assert len(cell.ports()) == 120
    assert len(cell.tables) == 15


def test_61_dslots_exceed_the_slot_units():
    with pytest.raises(CapacityExceeded, match="122 slot units"):
        build_cell(full_cell(FrameKind.DSLOT, 61))


def test_60_dslots_fit():
    assert len(build_cell(full_cell(FrameKind.DSLOT, 60)).ports()) == 60


def test_too_many_masters():
    masters = [MasterConfig(m, [TrackConfig(0, [SlotConfig(0)])]) for m in range(4)]
    with pytest.raises(CapacityExceeded):
        build_cell(CellConfig(masters=masters))


def test_nine_slots_on_a_track():
    with pytest.raises(CapacityExceeded):
        build_cell(one_track_cell(empty_slots=9))


def test_duplicate_device_uid():
    with pytest.raises(DuplicateId, match="device_uid 7"):
        build_cell(one_track_cell(legacy_sslot(7), legacy_sslot(7)))


def test_duplicate_master_id():
    master = MasterConfig(1, [TrackConfig(0, [SlotConfig(0)])])
    with pytest.raises(DuplicateId):
        build_cell(CellConfig(masters=[master, master]))


def test_secured_sslot_has_no_room_for_counter_and_tag():
    with pytest.raises(CapacityExceeded):
        build_cell(one_track_cell(DeviceConfig(1, FrameKind.SSLOT, SecurityMode.SECURED)))


def test_oversized_process_data():
    device = DeviceConfig(1, FrameKind.DSLOT, SecurityMode.SECURED, 32, payload_octets=7)
    with pytest.raises(CapacityExceeded, match="6 fit"):
        build_cell(one_track_cell(device))


def test_secured_dslot_capacity_depends_on_the_tag():
    assert payload_capacity(FrameKind.DSLOT, SecurityMode.SECURED, 32) == 6
    assert payload_capacity(FrameKind.DSLOT, SecurityMode.SECURED, 8) == 9
    assert payload_capacity(FrameKind.DSLOT, SecurityMode.SECURED, 64) == 2
    assert payload_capacity(FrameKind.DSLOT, SecurityMode.LEGACY) == 14


def test_timing_model_rejects_a_fourth_transmission():
    with pytest.raises(InvalidParams):
        TimingModel(max_transmissions_per_cycle=4)
    with pytest.raises(InvalidParams):
        TimingModel(sub_cycles_per_cycle=2)


def test_timing_derives_time_from_the_counter():
    timing = TimingModel()
    assert timing.cycles_per_minute == 12_000
    assert timing.time_us(4) == 5000 + 1664


def test_port_id_text_form():
    port = PortId.parse("M2/T3/S4")
    assert port == PortId(2, 3, 4)
    assert str(port) == "M2/T3/S4"
    assert port.track == (2, 3)


# =============================================================================
# schedule_cycle
# =============================================================================


@pytest.fixture
def single_slot_cell(secured_device):
    return build_cell(one_track_cell(secured_device))


def test_single_slot_gets_one_grant_per_sub_cycle(single_slot_cell):
    table = single_slot_cell.tables[(1, 0)]
    grants = schedule_cycle(single_slot_cell, (1, 0), 0)
    assert [g.sub_cycle_index for g in grants] == [0, 1, 2]
    assert [g.channel_index for g in grants] == list(table.sequence[:3])
    assert all(g.legs == (Direction.DOWNLINK, Direction.UPLINK) for g in grants)


def test_hop_sequence_continues_across_cycles(single_slot_cell):
    table = single_slot_cell.tables[(1, 0)]
    channels = [g.channel_index for cycle in range(30) for g in schedule_cycle(single_slot_cell, (1, 0), cycle)]
    assert channels == [next_channel(table, counter) for counter in range(90)]


def test_no_repetition_after_success(single_slot_cell):
    grants = schedule_cycle(single_slot_cell, (1, 0), 5, delivered={0: 0})
    assert [g.sub_cycle_index for g in grants] == [0]


def test_repetitions_until_the_successful_trial(single_slot_cell):
    grants = schedule_cycle(single_slot_cell, (1, 0), 5, delivered={0: 1})
    assert [g.sub_cycle_index for g in grants] == [0, 1]


def test_tracks_of_one_master_start_at_different_phases():
    config = CellConfig(masters=[MasterConfig(1, [
        TrackConfig(0, [SlotConfig(0, device=legacy_sslot(1))]),
        TrackConfig(1, [SlotConfig(0, device=legacy_sslot(2))]),
    ])])
    cell = build_cell(config)
    assert cell.phases[(1, 0)] != cell.phases[(1, 1)]


def test_unknown_slot_in_active_set(single_slot_cell):
    with pytest.raises(UnknownTrack):
        schedule_cycle(single_slot_cell, (1, 0), 0, active_slots=[5])


def test_unknown_track(single_slot_cell):
    with pytest.raises(UnknownTrack):
        schedule_cycle(single_slot_cell, (1, 3), 0)


# =============================================================================
# Frame codec
# =============================================================================


def test_legacy_sslot_wire_image():
    frame = Frame(FrameKind.SSLOT, ControlOctet(), b"\xab")
    wire = encode_frame(frame)
    assert wire == b"\x00\xab"
    assert decode_frame(FrameKind.SSLOT, wire) == frame


def test_secured_dslot_uses_all_fourteen_net_octets():
    frame = Frame(FrameKind.DSLOT, ControlOctet(Direction.UPLINK, retry=2), b"\x01" * 6, counter=9, tag=b"\xee" * 4)
    wire = encode_frame(frame)
    assert len(wire) == 15
    assert wire[1:5] == (9).to_bytes(4, "big")
    assert decode_frame(FrameKind.DSLOT, wire, 32) == frame


def test_secured_payload_too_large():
    frame = Frame(FrameKind.DSLOT, ControlOctet(), bytes(15), counter=1, tag=bytes(4))
    with pytest.raises(MalformedFrame):
        encode_frame(frame)


def test_legacy_payload_too_large():
    with pytest.raises(MalformedFrame):
        encode_frame(Frame(FrameKind.SSLOT, ControlOctet(), b"\x01\x02"))


def test_reserved_control_bits():
    with pytest.raises(MalformedFrame, match="reserved"):
        decode_frame(FrameKind.SSLOT, b"\x01\x00")


def test_retry_counter_range():
    with pytest.raises(MalformedFrame):
        ControlOctet(retry=3)


def test_secured_layout_on_an_sslot():
    frame = Frame(FrameKind.SSLOT, ControlOctet(), b"", counter=1, tag=bytes(4))
    with pytest.raises(MalformedFrame):
        encode_frame(frame)


def test_config_frame_length_octet():
    wire = encode_frame(Frame(FrameKind.CONFIG, ControlOctet(service=True, pairing=True), b"\x02abc"))
    assert wire[1] == 4
    with pytest.raises(MalformedFrame):
        decode_frame(FrameKind.CONFIG, wire[:-1])


controls = st.builds(
    ControlOctet,
    direction=st.sampled_from(Direction),
    retry=st.integers(0, 2),
    service=st.booleans(),
    pairing=st.booleans(),
)


@given(control=controls, payload=st.binary(max_size=14))
def test_legacy_dslot_roundtrip(control, payload):
    frame = Frame(FrameKind.DSLOT, control, payload)
    assert decode_frame(FrameKind.DSLOT, encode_frame(frame)) == frame


@given(control=controls, tag_bits=st.sampled_from([8, 16, 24, 32, 64]), data=st.data())
def test_secured_dslot_roundtrip(control, tag_bits, data):
    room = 14 - 4 - tag_bits // 8
    payload = data.draw(st.binary(max_size=room))
    counter = data.draw(st.integers(0, 2**32 - 1))
    tag = data.draw(st.binary(min_size=tag_bits // 8, max_size=tag_bits // 8))
    frame = Frame(FrameKind.DSLOT, control, payload, counter, tag)
    wire = encode_frame(frame)
    assert len(wire) <= 15
    assert decode_frame(FrameKind.DSLOT, wire, tag_bits) == frame


@given(value=st.integers(0, 255))
def test_control_octet_decodes_or_rejects(value):
    if value & 0x07 or (value & 0x60) == 0x60:
        with pytest.raises(MalformedFrame):
            ControlOctet.from_byte(value)
    else:
        assert ControlOctet.from_byte(value).to_byte() == value
