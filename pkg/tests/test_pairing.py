import numpy as np
import pytest
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

from iolwsim.errors import (
    DuplicateId,
    IolwSimError,
    LeaseActiveElsewhere,
    NotAllowlisted,
    NotInServiceMode,
    OOBUnavailable,
    PortNotPreconfigured,
    PortOccupied,
)
from iolwsim.hopping import HoppingTable
from iolwsim.pairing import (
    MSG_SEALED,
    AirLog,
    PairingManager,
    PairingMethod,
    PairingMode,
    PortStatus,
    parse_table_message,
    table_message,
)
from iolwsim.protocol import (
    CellConfig,
    DeviceConfig,
    FrameKind,
    MasterConfig,
    PortId,
    SecurityMode,
    SlotConfig,
    TrackConfig,
    build_cell,
)
from iolwsim.secure_channel import LinkState

TRACK = (1, 0)
S0, S1, S2 = PortId(1, 0, 0), PortId(1, 0, 1), PortId(1, 0, 2)


@pytest.fixture
def cell(small_cell):
    return build_cell(small_cell)


@pytest.fixture
def radio():
    return AirLog()


@pytest.fixture
def manager(cell, radio):
    return PairingManager(cell, np.random.default_rng(3), radio=radio)


def roaming_cell():
    return build_cell(CellConfig(masters=[
        MasterConfig(1, [TrackConfig(0, [
            SlotConfig(0, device=DeviceConfig(4097, FrameKind.DSLOT, SecurityMode.SECURED, safety=True)),
            SlotConfig(1, slot_kind=FrameKind.DSLOT),
        ], hopping_seed=7)]),
        MasterConfig(2, [TrackConfig(0, [SlotConfig(0, slot_kind=FrameKind.DSLOT)], hopping_seed=11)],
                     roaming_allowlist=[4097]),
    ]))


# =============================================================================
# ServiceMode
# =============================================================================


def test_commissioned_devices_start_paired(manager):
    assert manager.state(S0).status is PortStatus.PAIRED
    assert manager.state(S0).method is PairingMethod.COMMISSIONED
    assert manager.state(S2).status is PortStatus.UNPAIRED
    assert set(manager.links) == {S0}
    assert manager.active_ports() == [S0, S1]


def test_pairing_outside_service_mode_is_rejected(manager, radio):
    with pytest.raises(NotInServiceMode):
        manager.pair_by_unique_id(S2, 7000)
    assert manager.state(S2).status is PortStatus.UNPAIRED
    assert radio.frames == []


def test_enter_then_exit_restores_the_state(manager, radio):
    manager.enter_service_mode(TRACK)
    assert manager.state(S2).status is PortStatus.SCANNING
    manager.exit_service_mode(TRACK)
    assert manager.state(S2).status is PortStatus.UNPAIRED
    assert not manager.in_service_mode(TRACK)
    assert radio.frames == []


def test_only_the_track_in_service_mode_accepts_pairing():
    config = CellConfig(masters=[MasterConfig(1, [
        TrackConfig(0, [SlotConfig(0, slot_kind=FrameKind.DSLOT)]),
        TrackConfig(1, [SlotConfig(0, slot_kind=FrameKind.DSLOT)]),
    ])])
    manager = PairingManager(build_cell(config), np.random.default_rng(0))
    manager.enter_service_mode((1, 1))
    with pytest.raises(NotInServiceMode):
        manager.pair_by_unique_id(PortId(1, 0, 0), 10)
    assert manager.pair_by_unique_id(PortId(1, 1, 0), 10).status is PortStatus.PAIRED


# =============================================================================
# Pairing by UniqueID
# =============================================================================


def test_legacy_pairing_leaks_uid_and_table(manager, radio, cell):
    manager.enter_service_mode(TRACK)
    state = manager.pair_by_unique_id(S2, 0x1122334455667788, PairingMode.LEGACY)
    assert state.status is PortStatus.PAIRED
    assert state.mode is PairingMode.LEGACY
    transcript = radio.transcript()
    assert (0x1122334455667788).to_bytes(8, "big") in transcript
    assert cell.tables[TRACK].to_bytes() in transcript
    assert S2 not in manager.links


def test_secured_pairing_keeps_secret_and_table_off_the_air(cell, radio):
    manager = PairingManager(cell, np.random.default_rng(3), radio=radio)
    twin = np.random.default_rng(3)
    twin.bytes(16)  # commissioning secret of S0
    secret = twin.bytes(16)
    manager.enter_service_mode(TRACK)
    state = manager.pair_by_unique_id(S2, 7000, PairingMode.SECURED_OOB)
    assert state.mode is PairingMode.SECURED_OOB
    transcript = radio.transcript()
    assert transcript
    assert secret not in transcript
    assert cell.tables[TRACK].to_bytes() not in transcript
    assert (7000).to_bytes(8, "big") not in transcript
    assert all(frame[2] == MSG_SEALED for *_, frame in radio.frames)
    assert manager.oob.deliveries[-1] == (S2, 7000)
    links = manager.links[S2]
    assert links.master.key == links.device.key


def test_pairing_to_an_occupied_port(manager):
    manager.enter_service_mode(TRACK)
    with pytest.raises(PortOccupied):
        manager.pair_by_unique_id(S0, 7000)


def test_device_cannot_pair_twice(manager):
    manager.enter_service_mode(TRACK)
    with pytest.raises(DuplicateId):
        manager.pair_by_unique_id(S2, 4097)


def test_secured_pairing_without_oob(cell):
    manager = PairingManager(cell, np.random.default_rng(0))
    manager.oob.available = False
    manager.enter_service_mode(TRACK)
    with pytest.raises(OOBUnavailable):
        manager.pair_by_unique_id(S2, 7000, PairingMode.SECURED_OOB)
    assert manager.state(S2).status is PortStatus.SCANNING
    assert manager.pair_by_unique_id(S2, 7000, PairingMode.LEGACY).status is PortStatus.PAIRED


# =============================================================================
# Button pairing
# =============================================================================


def test_button_replaces_a_damaged_device(manager):
    manager.enter_service_mode(TRACK)
    state = manager.pair_by_button(S0, 5000)
    assert state.status is PortStatus.PAIRED
    assert state.device_uid == 5000
    assert state.method is PairingMethod.BUTTON
    assert state.device.safety
    assert manager.links[S0].master.device_uid == 5000


def test_button_on_a_preconfigured_empty_port(manager):
    manager.enter_service_mode(TRACK)
    assert manager.pair_by_button(S2, 5001).device.slot_kind is FrameKind.DSLOT


def test_button_on_an_unconfigured_port():
    config = CellConfig(masters=[MasterConfig(1, [TrackConfig(0, [SlotConfig(0)])])])
    manager = PairingManager(build_cell(config), np.random.default_rng(0))
    manager.enter_service_mode(TRACK)
    with pytest.raises(PortNotPreconfigured):
        manager.pair_by_button(PortId(1, 0, 0), 5000)


def test_button_with_a_mismatching_slot_kind(manager):
    manager.enter_service_mode(TRACK)
    with pytest.raises(PortNotPreconfigured):
        manager.pair_by_button(S2, 5000, slot_kind=FrameKind.SSLOT)


def test_button_without_service_mode(manager):
    with pytest.raises(NotInServiceMode):
        manager.pair_by_button(S0, 5000)


# =============================================================================
# Roaming
# =============================================================================


@pytest.fixture
def roaming():
    manager = PairingManager(roaming_cell(), np.random.default_rng(1))
    manager.enter_service_mode((1, 0))
    manager.enter_service_mode((2, 0))
    return manager


def test_roaming_moves_the_active_pairing(roaming):
    state = roaming.roam(4097, 1, 2, 30, cycle=10)
    assert state.status is PortStatus.ROAMED
    assert state.home_master_id == 1
    assert state.lease_until_cycle == 40
    assert roaming.active_port(4097) == PortId(2, 0, 0)
    assert roaming.active_pairings(4097) == 1
    assert roaming.state(PortId(1, 0, 0)).status is PortStatus.PAIRED
    assert not roaming.state(PortId(1, 0, 0)).active


def test_lease_expiry_returns_the_device_home(roaming):
    roaming.roam(4097, 1, 2, 30, cycle=10)
    assert roaming.tick(39) == []
    assert roaming.tick(40) == [4097]
    assert roaming.active_port(4097) == PortId(1, 0, 0)
    assert roaming.state(PortId(2, 0, 0)).status is PortStatus.SCANNING
    assert roaming.active_pairings(4097) == 1


def test_explicit_return(roaming):
    roaming.roam(4097, 1, 2)
    assert roaming.return_home(4097) == PortId(1, 0, 0)
    with pytest.raises(LeaseActiveElsewhere):
        roaming.return_home(4097)


def test_roaming_twice(roaming):
    roaming.roam(4097, 1, 2)
    with pytest.raises(LeaseActiveElsewhere):
        roaming.roam(4097, 1, 2)


def test_device_not_on_the_allowlist(roaming):
    roaming.enter_service_mode((1, 0))
    roaming.pair_by_unique_id(PortId(1, 0, 1), 4200)
    with pytest.raises(NotAllowlisted):
        roaming.roam(4200, 1, 2)
    assert roaming.active_port(4200) == PortId(1, 0, 1)


def test_button_cannot_take_over_a_lent_out_device(roaming):
    roaming.roam(4097, 1, 2)
    with pytest.raises(LeaseActiveElsewhere):
        roaming.pair_by_button(PortId(1, 0, 0), 5000)
    with pytest.raises(LeaseActiveElsewhere):
        roaming.pair_by_button(PortId(2, 0, 0), 5000)


def test_roaming_needs_service_mode_on_both_tracks(roaming):
    roaming.exit_service_mode((1, 0))
    with pytest.raises(NotInServiceMode):
        roaming.roam(4097, 1, 2)
    assert roaming.active_port(4097) == PortId(1, 0, 0)


# =============================================================================
# Keys and tables after pairing
# =============================================================================


def test_reconfigure_port_rekeys_a_locked_link(manager):
    links = manager.links[S0]
    links.master.state = LinkState.FAIL_STATE
    fresh = manager.reconfigure_port(S0)
    assert fresh.master.state is LinkState.ACTIVE
    assert fresh.master.key == fresh.device.key != links.master.key


def test_distributed_table_is_plaintext_only_for_legacy_ports(manager, radio, cell):
    new_table = HoppingTable(sequence=tuple(range(77, 2, -1)), seed=1, generation=1)
    manager.distribute_table(TRACK, new_table)
    message = table_message(1, 0, new_table)
    plain = [frame for port, *_, frame in radio.frames if port == S1]
    sealed = [frame for port, *_, frame in radio.frames if port == S0]
    assert len(plain) == 1 and message in plain[0]
    assert parse_table_message(plain[0][2:]) == (1, 0, 1, new_table.sequence)
    assert len(sealed) == 1 and new_table.to_bytes() not in sealed[0]


# =============================================================================
# Single-pairing state machine
# =============================================================================

PORTS = [PortId(1, 0, 0), PortId(1, 0, 1), PortId(2, 0, 0)]
UIDS = [4097, 4200, 4300]


class PairingMachine(RuleBasedStateMachine):
    def __init__(self):
        super().__init__()
        self.manager = PairingManager(roaming_cell(), np.random.default_rng(0))
        self.cycle = 0

    @rule(track=st.sampled_from([(1, 0), (2, 0)]))
    def enter(self, track):
        self.manager.enter_service_mode(track, self.cycle)

    @rule(track=st.sampled_from([(1, 0), (2, 0)]))
    def leave(self, track):
        self.manager.exit_service_mode(track, self.cycle)

    @rule(port=st.sampled_from(PORTS), uid=st.sampled_from(UIDS), mode=st.sampled_from(PairingMode))
    def pair(self, port, uid, mode):
        in_service = self.manager.in_service_mode(port.track)
        try:
            self.manager.pair_by_unique_id(port, uid, mode, cycle=self.cycle)
        except IolwSimError:
            return
        assert in_service

    @rule(port=st.sampled_from(PORTS), uid=st.sampled_from(UIDS))
    def button(self, port, uid):
        in_service = self.manager.in_service_mode(port.track)
        try:
            self.manager.pair_by_button(port, uid, cycle=self.cycle)
        except IolwSimError:
            return
        assert in_service

    @rule(uid=st.sampled_from(UIDS), lease=st.integers(1, 5))
    def roam(self, uid, lease):
        try:
            self.manager.roam(uid, 1, 2, lease, cycle=self.cycle)
        except IolwSimError:
            return
        assert self.manager.in_service_mode((2, 0))

    @rule()
    def tick(self):
        self.cycle += 1
        self.manager.tick(self.cycle)

    @invariant()
    def at_most_one_active_pairing(self):
        for uid in UIDS:
            assert self.manager.active_pairings(uid) <= 1

    @invariant()
    def every_paired_port_knows_its_device(self):
        for state in self.manager.ports.values():
            if state.status in (PortStatus.PAIRED, PortStatus.ROAMED):
                assert state.device is not None


TestPairingMachine = PairingMachine.TestCase
