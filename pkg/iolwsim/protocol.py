"""
Protocol core: cell topology, the media-access scheduler and the frame codec.

A cell holds up to three masters. Each master runs one to five tracks and each
track polls up to eight slots (W-Ports). One cycle is split into sub-cycles; a
slot gets its initial trial in the first sub-cycle and up to two repetitions in
the following ones, and the track hops to the next channel of its table every
sub-cycle. The wire layouts are documented in docs/frame-format.md.
"""

import logging
from collections.abc import Collection, Mapping
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple, Optional, Union

from dataclasses_json import Undefined, dataclass_json

from iolwsim.errors import CapacityExceeded, DuplicateId, InvalidParams, MalformedFrame, UnknownTrack
from iolwsim.hopping import DEFAULT_MIN_HOP_DISTANCE_MHZ, HoppingTable, generate_table, next_channel, parse_blocklist

logger = logging.getLogger(__name__)

MAX_MASTERS = 3
MAX_TRACKS = 5
MAX_SLOTS = 8
MAX_SLOT_UNITS = 120

COUNTER_OCTETS = 4
SECURED_NET_OCTETS = 14
MAX_CONFIG_BODY = 255
SUPPORTED_TAG_BITS = (8, 16, 24, 32, 64)
DEFAULT_TAG_BITS = 32


class FrameKind(Enum):
    SSLOT = "SSlot"
    DSLOT = "DSlot"
    CONFIG = "Config"

    @property
    def slot_units(self) -> int:
        return 2 if self is FrameKind.DSLOT else 1


class Direction(Enum):
    DOWNLINK = "Downlink"
    UPLINK = "Uplink"


class SecurityMode(Enum):
    LEGACY = "Legacy"
    SECURED = "Secured"


LEGACY_PAYLOAD_OCTETS = {FrameKind.SSLOT: 1, FrameKind.DSLOT: 14}


def payload_capacity(kind: FrameKind, security: SecurityMode, tag_bits: int = DEFAULT_TAG_BITS) -> int:
    """Process-data octets that fit one frame; negative when counter and tag do not fit at all."""
    if security is SecurityMode.LEGACY:
        return LEGACY_PAYLOAD_OCTETS[kind]
    net = SECURED_NET_OCTETS if kind is FrameKind.DSLOT else LEGACY_PAYLOAD_OCTETS[kind]
    return net - COUNTER_OCTETS - tag_bits // 8


# =============================================================================
# Topology
# =============================================================================


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class TimingModel:
    """Cycle timing in integer microseconds."""
    cycle_duration_us: int = 5000
    sub_cycle_duration_us: int = 1664
    sub_cycles_per_cycle: int = 3
    max_transmissions_per_cycle: int = 3

    def __post_init__(self):
        if self.sub_cycles_per_cycle < 3:
            raise InvalidParams("sub_cycles_per_cycle must be at least 3")
        if self.max_transmissions_per_cycle != 3:
            raise InvalidParams("max_transmissions_per_cycle is one initial trial plus two repetitions")
        if self.sub_cycles_per_cycle * self.sub_cycle_duration_us > self.cycle_duration_us:
            raise InvalidParams("sub-cycles do not fit into the cycle duration")

    @property
    def cycles_per_minute(self) -> int:
        return 60_000_000 // self.cycle_duration_us

    def time_us(self, sub_cycle_counter: int) -> int:
        """Start time of a sub-cycle, derived from the tick counter."""
        cycle, k = divmod(sub_cycle_counter, self.sub_cycles_per_cycle)
        return cycle * self.cycle_duration_us + k * self.sub_cycle_duration_us


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class DeviceConfig:
    """A W-Device as configured on its port."""
    device_uid: int
    slot_kind: FrameKind = FrameKind.DSLOT
    security: SecurityMode = SecurityMode.SECURED
    tag_bits: int = DEFAULT_TAG_BITS
    safety: bool = False
    payload_octets: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.device_uid < 2**64:
            raise ValueError(f"device_uid {self.device_uid} is not a 64-bit unsigned value")
        if self.slot_kind is FrameKind.CONFIG:
            raise ValueError("a device occupies an SSlot or a DSlot")
        if self.security is SecurityMode.SECURED and self.tag_bits not in SUPPORTED_TAG_BITS:
            raise ValueError(f"tag_bits must be one of {SUPPORTED_TAG_BITS}")

    @property
    def capacity(self) -> int:
        return payload_capacity(self.slot_kind, self.security, self.tag_bits)

    @property
    def process_data_octets(self) -> int:
        return self.capacity if self.payload_octets is None else self.payload_octets

    @property
    def secured(self) -> bool:
        return self.security is SecurityMode.SECURED

    @property
    def wire_tag_bits(self) -> Optional[int]:
        return self.tag_bits if self.secured else None


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class SlotConfig:
    """One W-Port. ``slot_kind`` pre-configures an empty port for button pairing."""
    slot_id: int
    slot_kind: Optional[FrameKind] = None
    device: Optional[DeviceConfig] = None


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class TrackConfig:
    track_id: int
    slots: list[SlotConfig]
    hopping_seed: int = 0
    blocklist: list[Union[int, str]] = field(default_factory=list)
    min_hop_distance_mhz: int = DEFAULT_MIN_HOP_DISTANCE_MHZ


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class MasterConfig:
    master_id: int
    tracks: list[TrackConfig]
    roaming_allowlist: list[int] = field(default_factory=list)


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class CellConfig:
    masters: list[MasterConfig]
    timing: TimingModel = field(default_factory=TimingModel)


TrackKey = tuple[int, int]


class PortId(NamedTuple):
    master_id: int
    track_id: int
    slot_id: int

    @property
    def track(self) -> TrackKey:
        return (self.master_id, self.track_id)

    def __str__(self) -> str:
        return f"M{self.master_id}/T{self.track_id}/S{self.slot_id}"

    @classmethod
    def parse(cls, text: str) -> "PortId":
        master, track, slot = (part[1:] for part in text.split("/"))
        return cls(int(master), int(track), int(slot))


@dataclass(frozen=True, eq=False)
class Cell:
    """A validated cell together with the hopping table and hop phase of every track."""
    config: CellConfig
    tables: Mapping[TrackKey, HoppingTable]
    phases: Mapping[TrackKey, int]

    @property
    def timing(self) -> TimingModel:
        return self.config.timing

    def master(self, master_id: int) -> MasterConfig:
        for master in self.config.masters:
            if master.master_id == master_id:
                return master
        raise UnknownTrack(f"no master {master_id} in this cell")

    def track(self, key: TrackKey) -> TrackConfig:
        master_id, track_id = key
        for track in self.master(master_id).tracks:
            if track.track_id == track_id:
                return track
        raise UnknownTrack(f"no track {track_id} on master {master_id}")

    def track_keys(self) -> list[TrackKey]:
        return [(m.master_id, t.track_id) for m in self.config.masters for t in m.tracks]

    def port(self, port: PortId) -> SlotConfig:
        for slot in self.track(port.track).slots:
            if slot.slot_id == port.slot_id:
                return slot
        raise UnknownTrack(f"no port {port}")

    def ports(self) -> list[PortId]:
        return [PortId(m, t, s.slot_id) for (m, t) in self.track_keys() for s in self.track((m, t)).slots]

    def with_table(self, key: TrackKey, table: HoppingTable) -> "Cell":
        return replace(self, tables={**self.tables, key: table})


def build_cell(config: CellConfig) -> Cell:
    """Validate a cell configuration and generate the hopping table of every track.

    Raises:
        CapacityExceeded: master, track, slot or slot-unit limits, or a device whose
            process data cannot fit its frame.
        DuplicateId: repeated master_id, track_id (per master), slot_id (per track)
            or device_uid.
    """
    masters = config.masters
    if not 1 <= len(masters) <= MAX_MASTERS:
        raise CapacityExceeded(f"{len(masters)} masters; a cell has 1..{MAX_MASTERS}")
    _require_unique([m.master_id for m in masters], "master_id")

    device_uids: list[int] = []
    units = 0
    for master in masters:
        if not 0 <= master.master_id < 2**32:
            raise ValueError(f"master_id {master.master_id} is not a 32-bit unsigned value")
        if not 1 <= len(master.tracks) <= MAX_TRACKS:
            raise CapacityExceeded(f"master {master.master_id} has {len(master.tracks)} tracks; 1..{MAX_TRACKS}")
        _require_unique([t.track_id for t in master.tracks], f"track_id on master {master.master_id}")
        for track in master.tracks:
            if not 1 <= len(track.slots) <= MAX_SLOTS:
                raise CapacityExceeded(f"track {track.track_id} has {len(track.slots)} slots; 1..{MAX_SLOTS}")
            _require_unique([s.slot_id for s in track.slots], f"slot_id on track {track.track_id}")
            for slot in track.slots:
                device = slot.device
                if device is None:
                    continue
                if slot.slot_kind is not None and slot.slot_kind is not device.slot_kind:
                    raise ValueError(f"slot {slot.slot_id} is configured for {slot.slot_kind.value}")
                if device.capacity < 0:
                    raise CapacityExceeded(
                        f"device {device.device_uid}: a secured {device.slot_kind.value} "
                        "has no room for counter and tag"
                    )
                if device.process_data_octets > device.capacity:
                    raise CapacityExceeded(
                        f"device {device.device_uid}: {device.process_data_octets} payload octets, "
                        f"{device.capacity} fit"
                    )
                device_uids.append(device.device_uid)
                units += device.slot_kind.slot_units
    _require_unique(device_uids, "device_uid")
    if units > MAX_SLOT_UNITS:
        raise CapacityExceeded(f"{units} slot units configured; a cell supports {MAX_SLOT_UNITS}")

    tables: dict[TrackKey, HoppingTable] = {}
    phases: dict[TrackKey, int] = {}
    for master in masters:
        for index, track in enumerate(master.tracks):
            key = (master.master_id, track.track_id)
            table = generate_table(
                master.master_id,
                parse_blocklist(track.blocklist),
                track.min_hop_distance_mhz,
                salt=track.hopping_seed,
            )
            tables[key] = table
            phases[key] = index * (len(table) // len(master.tracks))

    logger.info("cell built: %d masters, %d devices, %d slot units", len(masters), len(device_uids), units)
    return Cell(config=config, tables=tables, phases=phases)


def _require_unique(values: list[int], what: str) -> None:
    seen: set[int] = set()
    for value in values:
        if value in seen:
            raise DuplicateId(f"duplicate {what} {value}")
        seen.add(value)


# =============================================================================
# Scheduler
# =============================================================================


@dataclass(frozen=True)
class TransmissionGrant:
    """One exchange opportunity: a downlink poll and the uplink answer in the same sub-cycle."""
    cycle_index: int
    sub_cycle_index: int
    master_id: int
    track_id: int
    slot_id: int
    channel_index: int
    legs: tuple[Direction, ...] = (Direction.DOWNLINK, Direction.UPLINK)

    @property
    def port(self) -> PortId:
        return PortId(self.master_id, self.track_id, self.slot_id)

    @property
    def retry(self) -> int:
        return self.sub_cycle_index


def schedule_cycle(
    cell: Cell,
    track: TrackKey,
    cycle_index: int,
    *,
    delivered: Optional[Mapping[int, int]] = None,
    active_slots: Optional[Collection[int]] = None,
    table: Optional[HoppingTable] = None,
) -> list[TransmissionGrant]:
    """Grants of one track for one cycle.

    Without feedback every active slot gets a grant in each trial sub-cycle.
    ``delivered`` maps slot_id to the sub-cycle in which that slot's exchange
    succeeded; later sub-cycles then carry no grant for it. ``active_slots``
    defaults to the slots that have a configured device.
    """
    track_config = cell.track(track)
    table = table or cell.tables[track]
    timing = cell.timing
    delivered = delivered or {}
    known = {s.slot_id for s in track_config.slots}
    if active_slots is None:
        slots = sorted(s.slot_id for s in track_config.slots if s.device is not None)
    else:
        unknown = set(active_slots) - known
        if unknown:
            raise UnknownTrack(f"slots {sorted(unknown)} not on track {track}")
        slots = sorted(active_slots)

    trials = min(timing.sub_cycles_per_cycle, timing.max_transmissions_per_cycle)
    base = cycle_index * timing.sub_cycles_per_cycle + cell.phases[track]
    grants = []
    for k in range(trials):
        channel = next_channel(table, base + k)
        for slot_id in slots:
            succeeded_at = delivered.get(slot_id)
            if succeeded_at is not None and succeeded_at < k:
                continue
            grants.append(TransmissionGrant(cycle_index, k, track[0], track[1], slot_id, channel))
    return grants


# =============================================================================
# Frame codec
# =============================================================================

DIRECTION_BIT = 0x80
RETRY_MASK = 0x60
RETRY_SHIFT = 5
SERVICE_BIT = 0x10
PAIRING_BIT = 0x08
RESERVED_MASK = 0x07


@dataclass(frozen=True)
class ControlOctet:
    direction: Direction = Direction.DOWNLINK
    retry: int = 0
    service: bool = False
    pairing: bool = False

    def __post_init__(self):
        if not 0 <= self.retry <= 2:
            raise MalformedFrame(f"retry count {self.retry} outside 0..2")

    def to_byte(self) -> int:
        value = self.retry << RETRY_SHIFT
        if self.direction is Direction.UPLINK:
            value |= DIRECTION_BIT
        if self.service:
            value |= SERVICE_BIT
        if self.pairing:
            value |= PAIRING_BIT
        return value

    @classmethod
    def from_byte(cls, value: int) -> "ControlOctet":
        if value & RESERVED_MASK:
            raise MalformedFrame(f"reserved control bits set in 0x{value:02x}")
        return cls(
            direction=Direction.UPLINK if value & DIRECTION_BIT else Direction.DOWNLINK,
            retry=(value & RETRY_MASK) >> RETRY_SHIFT,
            service=bool(value & SERVICE_BIT),
            pairing=bool(value & PAIRING_BIT),
        )


@dataclass(frozen=True)
class Frame:
    """A frame as seen by the codec. ``counter`` and ``tag`` are set only on secured DSlots."""
    kind: FrameKind
    control: ControlOctet
    payload: bytes = b""
    counter: Optional[int] = None
    tag: Optional[bytes] = None

    @property
    def secured(self) -> bool:
        return self.tag is not None

    @property
    def header_bytes(self) -> bytes:
        """Octets authenticated as associated data."""
        return bytes([self.control.to_byte()])


def encode_frame(frame: Frame) -> bytes:
    control = frame.control.to_byte()
    if frame.kind is FrameKind.CONFIG:
        if frame.counter is not None or frame.tag is not None:
            raise MalformedFrame("configuration frames carry any protection inside their body")
        if len(frame.payload) > MAX_CONFIG_BODY:
            raise MalformedFrame(f"configuration body of {len(frame.payload)} octets")
        return bytes([control, len(frame.payload)]) + frame.payload

    if (frame.counter is None) != (frame.tag is None):
        raise MalformedFrame("counter and tag go together")
    if frame.secured:
        if frame.kind is not FrameKind.DSLOT:
            raise MalformedFrame("only DSlots carry a secured layout")
        if len(frame.tag) * 8 not in SUPPORTED_TAG_BITS:
            raise MalformedFrame(f"tag of {len(frame.tag)} octets")
        if not 0 <= frame.counter < 2**32:
            raise MalformedFrame(f"counter {frame.counter} is not 32-bit")
        net = len(frame.payload) + COUNTER_OCTETS + len(frame.tag)
        if net > SECURED_NET_OCTETS:
            raise MalformedFrame(f"secured DSlot needs {net} net octets, {SECURED_NET_OCTETS} available")
        return bytes([control]) + frame.counter.to_bytes(COUNTER_OCTETS, "big") + frame.payload + frame.tag

    limit = LEGACY_PAYLOAD_OCTETS[frame.kind]
    if len(frame.payload) > limit:
        raise MalformedFrame(f"{frame.kind.value} payload of {len(frame.payload)} octets, {limit} allowed")
    return bytes([control]) + frame.payload


def decode_frame(kind: FrameKind, data: bytes, tag_bits: Optional[int] = None) -> Frame:
    """Parse a wire image. ``tag_bits`` selects the secured DSlot layout."""
    if not data:
        raise MalformedFrame("empty frame")
    control = ControlOctet.from_byte(data[0])

    if kind is FrameKind.CONFIG:
        if len(data) < 2 or len(data) != 2 + data[1]:
            raise MalformedFrame("configuration frame length octet does not match")
        return Frame(kind, control, bytes(data[2:]))

    body = bytes(data[1:])
    if tag_bits is not None:
        if kind is not FrameKind.DSLOT:
            raise MalformedFrame("only DSlots carry a secured layout")
        if tag_bits not in SUPPORTED_TAG_BITS:
            raise MalformedFrame(f"unsupported tag length {tag_bits}")
        tag_octets = tag_bits // 8
        if not COUNTER_OCTETS + tag_octets <= len(body) <= SECURED_NET_OCTETS:
            raise MalformedFrame(f"secured DSlot of {len(body)} net octets")
        return Frame(
            kind,
            control,
            payload=body[COUNTER_OCTETS : len(body) - tag_octets],
            counter=int.from_bytes(body[:COUNTER_OCTETS], "big"),
            tag=body[len(body) - tag_octets :],
        )

    if len(body) > LEGACY_PAYLOAD_OCTETS[kind]:
        raise MalformedFrame(f"{kind.value} frame of {len(data)} octets")
    return Frame(kind, control, body)
