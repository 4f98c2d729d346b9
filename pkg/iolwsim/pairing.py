"""
Pairing and roaming with ServiceMode gating.

Two key-establishment paths exist. Legacy pairing sends the device UniqueID and
the hopping table over the configuration channels in plaintext. SecuredOOB
pairing hands a 16-octet secret to both ends over an out-of-band channel the
radio never carries, derives the link keys and transfers the table only inside
sealed configuration frames.

Configuration frame bodies start with a message type octet:

    0x01 pairing request   uid (8) | slot kind (1)
    0x02 hopping table     master_id (4) | track_id (1) | generation (1) | channels
    0x03 pairing ack       uid (8)
    0x81 sealed message    counter (4) | ciphertext | tag; plaintext is one of the above
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Protocol

import numpy as np

from iolwsim.errors import (
    DuplicateId,
    LeaseActiveElsewhere,
    NotAllowlisted,
    NotInServiceMode,
    OOBUnavailable,
    PortNotPreconfigured,
    PortOccupied,
    UnknownTrack,
)
from iolwsim.hopping import CONFIG_CHANNELS, HoppingTable
from iolwsim.protocol import (
    COUNTER_OCTETS,
    DEFAULT_TAG_BITS,
    MAX_CONFIG_BODY,
    Cell,
    ControlOctet,
    DeviceConfig,
    Direction,
    Frame,
    FrameKind,
    PortId,
    SecurityMode,
    TrackKey,
    encode_frame,
)
from iolwsim.secure_channel import MIN_SECRET_OCTETS, LinkState, SecureLink, establish_link, reconfigure

logger = logging.getLogger(__name__)

DEFAULT_LEASE_CYCLES = 12_000

MSG_PAIRING_REQUEST = 0x01
MSG_TABLE = 0x02
MSG_PAIRING_ACK = 0x03
MSG_SEALED = 0x81

UPLINK_CONFIG_CHANNEL, DOWNLINK_CONFIG_CHANNEL = CONFIG_CHANNELS


class PortStatus(Enum):
    UNPAIRED = "Unpaired"
    SCANNING = "ServiceModeScanning"
    PAIRING = "PairingInProgress"
    PAIRED = "Paired"
    ROAMED = "Roamed"


class PairingMethod(Enum):
    COMMISSIONED = "Commissioned"
    UNIQUE_ID = "UniqueID"
    BUTTON = "Button"
    ROAMING = "Roaming"


class PairingMode(Enum):
    LEGACY = "Legacy"
    SECURED_OOB = "SecuredOOB"

    @property
    def security(self) -> SecurityMode:
        return SecurityMode.LEGACY if self is PairingMode.LEGACY else SecurityMode.SECURED


@dataclass
class PairingState:
    """State of one W-Port. A home port stays Paired but inactive while its device roams."""
    status: PortStatus = PortStatus.UNPAIRED
    device: Optional[DeviceConfig] = None
    method: Optional[PairingMethod] = None
    active: bool = False
    home_master_id: Optional[int] = None
    lease_until_cycle: Optional[int] = None

    @property
    def device_uid(self) -> Optional[int]:
        return self.device.device_uid if self.device else None

    @property
    def mode(self) -> Optional[PairingMode]:
        if self.device is None:
            return None
        return PairingMode.SECURED_OOB if self.device.secured else PairingMode.LEGACY


@dataclass
class LinkPair:
    master: SecureLink
    device: SecureLink

    @property
    def failed(self) -> bool:
        return LinkState.FAIL_STATE in (self.master.state, self.device.state)


@dataclass
class PairingEvent:
    cycle: int
    action: str
    port: Optional[PortId]
    device_uid: Optional[int] = None
    track: Optional[TrackKey] = None


class ConfigRadio(Protocol):
    def emit(self, port: PortId, leg: Direction, channel: int, frame: bytes) -> None: ...


@dataclass
class AirLog:
    """Stand-alone radio that just records configuration frames."""
    frames: list[tuple[PortId, Direction, int, bytes]] = field(default_factory=list)

    def emit(self, port: PortId, leg: Direction, channel: int, frame: bytes) -> None:
        self.frames.append((port, leg, channel, frame))

    def transcript(self) -> bytes:
        return b"".join(frame for *_, frame in self.frames)


@dataclass
class OobChannel:
    """Confidential commissioning channel; secrets never reach the radio transcript."""
    available: bool = True
    deliveries: list[tuple[PortId, int]] = field(default_factory=list)

    def deliver(self, port: PortId, device_uid: int, secret: bytes) -> bytes:
        if not self.available:
            raise OOBUnavailable(f"no out-of-band channel for {port}")
        self.deliveries.append((port, device_uid))
        return secret


def table_message(master_id: int, track_id: int, table: HoppingTable) -> bytes:
    return bytes([MSG_TABLE]) + master_id.to_bytes(4, "big") + bytes([track_id & 0xFF]) + table.to_bytes()


def parse_table_message(body: bytes) -> tuple[int, int, int, tuple[int, ...]]:
    """(master_id, track_id, generation, channels) of a plaintext table message."""
    if len(body) < 7 or body[0] != MSG_TABLE:
        raise ValueError("not a table message")
    return int.from_bytes(body[1:5], "big"), body[5], body[6], tuple(body[7:])


def _rekey(link: SecureLink, secret: bytes) -> SecureLink:
    if link.state is LinkState.FAIL_STATE:
        return reconfigure(link, secret)
    return establish_link(secret, link.master_id, link.device_uid, link.tag_bits, tx_leg=link.tx_leg)


def config_frame(leg: Direction, body: bytes, *, pairing: bool = True) -> bytes:
    control = ControlOctet(direction=leg, service=True, pairing=pairing)
    return encode_frame(Frame(FrameKind.CONFIG, control, body))


def sealed_config_frame(link: SecureLink, message: bytes) -> bytes:
    control = ControlOctet(direction=link.tx_leg, service=True, pairing=True)
    header = bytes([control.to_byte(), MSG_SEALED])
    sealed = link.seal(header, message, capacity=MAX_CONFIG_BODY - 1 - COUNTER_OCTETS - link.tag_octets)
    body = bytes([MSG_SEALED]) + sealed.counter.to_bytes(4, "big") + sealed.ciphertext + sealed.tag
    return encode_frame(Frame(FrameKind.CONFIG, control, body))


def open_sealed_config(link: SecureLink, frame_bytes: bytes) -> bytes:
    control, body = frame_bytes[0], frame_bytes[2:]
    counter = int.from_bytes(body[1:5], "big")
    tag_octets = link.tag_octets
    return link.open(counter, bytes([control, MSG_SEALED]), body[5 : len(body) - tag_octets], body[-tag_octets:])


class PairingManager:
    """Per-port pairing state of a cell.

    Devices configured in the cell start out commissioned (Paired, keys already in
    place). Everything afterwards goes through ServiceMode.
    """

    def __init__(
        self,
        cell: Cell,
        rng: np.random.Generator,
        *,
        oob: Optional[OobChannel] = None,
        radio: Optional[ConfigRadio] = None,
        tables: Optional[Callable[[TrackKey], HoppingTable]] = None,
        on_event: Optional[Callable[[PairingEvent], None]] = None,
    ):
        self.cell = cell
        self.rng = rng
        self.oob = oob or OobChannel()
        self.radio = radio or AirLog()
        self.tables = tables or (lambda key: cell.tables[key])
        self.on_event = on_event
        self.events: list[PairingEvent] = []
        self.service_mode: set[TrackKey] = set()
        self.ports: dict[PortId, PairingState] = {port: PairingState() for port in cell.ports()}
        self.links: dict[PortId, LinkPair] = {}
        for port in cell.ports():
            device = cell.port(port).device
            if device is not None:
                self._bind(port, device, PairingMethod.COMMISSIONED, cycle=0, over_air=False)

    # ------------------------------------------------------------------ queries

    def state(self, port: PortId) -> PairingState:
        if port not in self.ports:
            raise UnknownTrack(f"no port {port}")
        return self.ports[port]

    def in_service_mode(self, track: TrackKey) -> bool:
        return track in self.service_mode

    def master_in_service_mode(self, master_id: int) -> bool:
        return any(m == master_id for m, _ in self.service_mode)

    def active_ports(self) -> list[PortId]:
        return sorted(port for port, state in self.ports.items() if state.active)

    def active_port(self, device_uid: int) -> Optional[PortId]:
        for port, state in self.ports.items():
            if state.active and state.device_uid == device_uid:
                return port
        return None

    def active_pairings(self, device_uid: int) -> int:
        return sum(1 for s in self.ports.values() if s.active and s.device_uid == device_uid)

    # ------------------------------------------------------------- service mode

    def enter_service_mode(self, track: TrackKey, cycle: int = 0) -> None:
        self.cell.track(track)
        self.service_mode.add(track)
        for port, state in self.ports.items():
            if port.track == track and state.status is PortStatus.UNPAIRED:
                state.status = PortStatus.SCANNING
        self._log(PairingEvent(cycle, "enter_service_mode", None, track=track))

    def exit_service_mode(self, track: TrackKey, cycle: int = 0) -> None:
        self.cell.track(track)
        self.service_mode.discard(track)
        for port, state in self.ports.items():
            if port.track == track and state.status is PortStatus.SCANNING:
                state.status = PortStatus.UNPAIRED
        self._log(PairingEvent(cycle, "exit_service_mode", None, track=track))

    def _require_service_mode(self, track: TrackKey) -> None:
        self.cell.track(track)
        if track not in self.service_mode:
            raise NotInServiceMode(f"track {track} is not in ServiceMode")

    # ------------------------------------------------------------------ pairing

    def pair_by_unique_id(
        self,
        port: PortId,
        device_uid: int,
        mode: PairingMode = PairingMode.SECURED_OOB,
        *,
        slot_kind: Optional[FrameKind] = None,
        tag_bits: int = DEFAULT_TAG_BITS,
        safety: bool = False,
        cycle: int = 0,
    ) -> PairingState:
        """Pair an unpaired port to a device identified by its UniqueID."""
        self._require_service_mode(port.track)
        state = self.state(port)
        if state.status in (PortStatus.PAIRED, PortStatus.ROAMED):
            raise PortOccupied(f"{port} already has device {state.device_uid}")
        self._require_unpaired_elsewhere(device_uid)
        kind = slot_kind or self.cell.port(port).slot_kind or FrameKind.DSLOT
        device = DeviceConfig(device_uid, kind, mode.security, tag_bits, safety)
        return self._pair(port, device, PairingMethod.UNIQUE_ID, cycle)

    def pair_by_button(
        self,
        port: PortId,
        device_uid: int,
        *,
        slot_kind: Optional[FrameKind] = None,
        cycle: int = 0,
    ) -> PairingState:
        """Local button trigger: the new device takes over a pre-configured port."""
        self._require_service_mode(port.track)
        configured = self.cell.port(port)
        state = self.state(port)
        if state.status is PortStatus.ROAMED or (state.status is PortStatus.PAIRED and not state.active):
            raise LeaseActiveElsewhere(f"device {state.device_uid} of {port} is roaming")
        template = state.device or configured.device
        port_kind = configured.slot_kind or (template.slot_kind if template else None)
        if port_kind is None or (slot_kind is not None and slot_kind is not port_kind):
            raise PortNotPreconfigured(f"{port} is not configured for {slot_kind.value if slot_kind else 'a device'}")
        self._require_unpaired_elsewhere(device_uid, except_port=port)
        if template is not None and template.secured and not self.oob.available:
            raise OOBUnavailable(f"no out-of-band channel for {port}")
        if template is None:
            device = DeviceConfig(device_uid, port_kind)
        else:
            device = replace(template, device_uid=device_uid, slot_kind=port_kind)
        self._drop(port)
        return self._pair(port, device, PairingMethod.BUTTON, cycle)

    def _pair(self, port: PortId, device: DeviceConfig, method: PairingMethod, cycle: int) -> PairingState:
        state = self.state(port)
        state.status = PortStatus.PAIRING
        state.method = method
        try:
            self._bind(port, device, method, cycle, over_air=True)
        except Exception:
            state.status = PortStatus.SCANNING if port.track in self.service_mode else PortStatus.UNPAIRED
            state.method = None
            raise
        return state

    def _bind(self, port: PortId, device: DeviceConfig, method: PairingMethod, cycle: int, *, over_air: bool):
        """Establish keys (if secured) and mark the port as paired and active."""
        table = self.tables(port.track)
        if device.secured:
            secret = self.oob.deliver(port, device.device_uid, self.rng.bytes(MIN_SECRET_OCTETS))
            links = self._establish(port, device, secret)
            if over_air:
                message = table_message(port.master_id, port.track_id, table)
                frame = sealed_config_frame(links.master, message)
                self.radio.emit(port, Direction.DOWNLINK, DOWNLINK_CONFIG_CHANNEL, frame)
                open_sealed_config(links.device, frame)
                ack = sealed_config_frame(links.device, bytes([MSG_PAIRING_ACK]) + device.device_uid.to_bytes(8, "big"))
                self.radio.emit(port, Direction.UPLINK, UPLINK_CONFIG_CHANNEL, ack)
                open_sealed_config(links.master, ack)
            self.links[port] = links
        else:
            self.links.pop(port, None)
            if over_air:
                request = bytes([MSG_PAIRING_REQUEST]) + device.device_uid.to_bytes(8, "big")
                request += bytes([0 if device.slot_kind is FrameKind.SSLOT else 1])
                self.radio.emit(port, Direction.UPLINK, UPLINK_CONFIG_CHANNEL, config_frame(Direction.UPLINK, request))
                response = table_message(port.master_id, port.track_id, table)
                self.radio.emit(
                    port, Direction.DOWNLINK, DOWNLINK_CONFIG_CHANNEL, config_frame(Direction.DOWNLINK, response)
                )

        state = self.ports[port]
        state.status = PortStatus.PAIRED
        state.device = device
        state.method = method
        state.active = True
        state.home_master_id = None
        state.lease_until_cycle = None
        self._log(PairingEvent(cycle, f"paired:{method.value}", port, device.device_uid))

    def _establish(self, port: PortId, device: DeviceConfig, secret: bytes) -> LinkPair:
        return LinkPair(
            master=establish_link(secret, port.master_id, device.device_uid, device.tag_bits,
                                  tx_leg=Direction.DOWNLINK),
            device=establish_link(secret, port.master_id, device.device_uid, device.tag_bits, tx_leg=Direction.UPLINK),
        )

    def _drop(self, port: PortId) -> None:
        self.links.pop(port, None)
        state = self.ports[port]
        state.device = None
        state.active = False

    def _require_unpaired_elsewhere(self, device_uid: int, except_port: Optional[PortId] = None) -> None:
        for port, state in self.ports.items():
            if port != except_port and state.device_uid == device_uid and state.status is not PortStatus.UNPAIRED:
                raise DuplicateId(f"device {device_uid} is already paired at {port}")

    # ------------------------------------------------------------------ roaming

    def roam(
        self,
        device_uid: int,
        from_master: int,
        to_master: int,
        lease_cycles: int = DEFAULT_LEASE_CYCLES,
        *,
        cycle: int = 0,
        to_port: Optional[PortId] = None,
    ) -> PairingState:
        """Move an allowlisted device to another master for ``lease_cycles`` cycles."""
        home = self.active_port(device_uid)
        if home is None or self.ports[home].status is PortStatus.ROAMED:
            raise LeaseActiveElsewhere(f"device {device_uid} has no home pairing it can lend out")
        if home.master_id != from_master:
            raise UnknownTrack(f"device {device_uid} is paired at {home}, not on master {from_master}")
        if device_uid not in self.cell.master(to_master).roaming_allowlist:
            raise NotAllowlisted(f"device {device_uid} is not allowlisted on master {to_master}")
        if lease_cycles < 1:
            raise ValueError("lease_cycles must be at least 1")
        device = self.ports[home].device
        target = to_port or self._free_port(to_master, device.slot_kind)
        self._require_service_mode(home.track)
        self._require_service_mode(target.track)
        if self.ports[target].status in (PortStatus.PAIRED, PortStatus.ROAMED):
            raise PortOccupied(f"{target} already has device {self.ports[target].device_uid}")

        self.ports[home].active = False
        self._bind(target, device, PairingMethod.ROAMING, cycle, over_air=True)
        state = self.ports[target]
        state.status = PortStatus.ROAMED
        state.home_master_id = from_master
        state.lease_until_cycle = cycle + lease_cycles
        self._log(PairingEvent(cycle, "roamed", target, device_uid))
        return state

    def _free_port(self, master_id: int, kind: FrameKind) -> PortId:
        for port in sorted(self.ports):
            state = self.ports[port]
            configured = self.cell.port(port).slot_kind
            if (
                port.master_id == master_id
                and state.status in (PortStatus.UNPAIRED, PortStatus.SCANNING)
                and state.device is None
                and configured in (None, kind)
            ):
                return port
        raise PortOccupied(f"master {master_id} has no free port for a {kind.value} device")

    def return_home(self, device_uid: int, cycle: int = 0) -> PortId:
        """End a lease: the roamed pairing is dropped and the home port becomes active again."""
        roamed = self.active_port(device_uid)
        if roamed is None or self.ports[roamed].status is not PortStatus.ROAMED:
            raise LeaseActiveElsewhere(f"device {device_uid} is not roaming")
        home_master = self.ports[roamed].home_master_id
        self._drop(roamed)
        state = self.ports[roamed]
        state.status = PortStatus.SCANNING if roamed.track in self.service_mode else PortStatus.UNPAIRED
        state.method = None
        state.home_master_id = None
        state.lease_until_cycle = None
        for port, home_state in self.ports.items():
            if port.master_id == home_master and home_state.device_uid == device_uid:
                home_state.active = True
                self._log(PairingEvent(cycle, "returned_home", port, device_uid))
                return port
        raise UnknownTrack(f"home port of device {device_uid} vanished")

    def tick(self, cycle: int) -> list[int]:
        """Return every device whose lease ran out; called once per cycle."""
        expired = [
            state.device_uid
            for state in self.ports.values()
            if state.status is PortStatus.ROAMED and state.lease_until_cycle is not None
            and cycle >= state.lease_until_cycle
        ]
        for device_uid in sorted(expired):
            self.return_home(device_uid, cycle)
        return expired

    # ------------------------------------------------------- keys and tables

    def reconfigure_port(self, port: PortId, cycle: int = 0) -> LinkPair:
        """Re-key a locked-out port with a fresh out-of-band secret."""
        links = self.links.get(port)
        if links is None:
            raise UnknownTrack(f"{port} has no secured link")
        device = self.ports[port].device
        secret = self.oob.deliver(port, device.device_uid, self.rng.bytes(MIN_SECRET_OCTETS))
        fresh = LinkPair(master=_rekey(links.master, secret), device=_rekey(links.device, secret))
        self.links[port] = fresh
        self._log(PairingEvent(cycle, "reconfigured", port, device.device_uid))
        return fresh

    def distribute_table(self, track: TrackKey, table: HoppingTable, cycle: int = 0) -> None:
        """Send a new table to every active port of the track."""
        message = table_message(track[0], track[1], table)
        for port in self.active_ports():
            if port.track != track:
                continue
            links = self.links.get(port)
            if links is None:
                self.radio.emit(port, Direction.DOWNLINK, DOWNLINK_CONFIG_CHANNEL,
                                config_frame(Direction.DOWNLINK, message, pairing=False))
            elif not links.failed:
                frame = sealed_config_frame(links.master, message)
                self.radio.emit(port, Direction.DOWNLINK, DOWNLINK_CONFIG_CHANNEL, frame)
                open_sealed_config(links.device, frame)

    def _log(self, event: PairingEvent) -> None:
        self.events.append(event)
        logger.info("pairing: %s %s %s", event.action, event.port or event.track, event.device_uid or "")
        if self.on_event is not None:
            self.on_event(event)
