"""
Radio medium and the discrete-event simulation loop.

Time advances in sub-cycles. In every sub-cycle each track polls its granted
slots: the downlink leg goes first, then every device that validly received its
poll answers in the uplink leg. Bursts that share (sub-cycle, channel, slot
position, leg) collide; bursts on a jammed channel are lost; everything else
passes a binary symmetric channel. A slot whose exchange fails is retried in the
next sub-cycle of the same cycle, at most twice.

Randomness comes from one root seed split into labelled streams, so the noise a
frame sees depends only on where and when it was sent, not on what else (an
attacker, say) is on the air.
"""

import logging
import zlib
from collections import Counter
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Optional, Protocol, Union

import numpy as np
from dataclasses_json import Undefined, dataclass_json

from iolwsim.detection import (
    Alert,
    BurstObservation,
    DetectionConfig,
    MasterAnomalyMonitor,
    Sniffer,
    master_anomaly_check,
    sniffer_ingest,
)
from iolwsim.errors import (
    AuthFailure,
    InvalidParams,
    InvalidScenario,
    IolwSimError,
    LinkInFailState,
    MalformedFrame,
    ReplayRejected,
)
from iolwsim.hopping import CHANNEL_COUNT, CONFIG_CHANNELS, HoppingTable, adaptive_switch, parse_blocklist
from iolwsim.pairing import OobChannel, PairingEvent, PairingManager, PairingMode
from iolwsim.protocol import (
    COUNTER_OCTETS,
    Cell,
    ControlOctet,
    DeviceConfig,
    Direction,
    Frame,
    FrameKind,
    PortId,
    TrackKey,
    TransmissionGrant,
    decode_frame,
    encode_frame,
    schedule_cycle,
)
from iolwsim.secure_channel import LinkState
from iolwsim.trace import EventKind, SimTrace

if TYPE_CHECKING:
    from iolwsim.config import ScenarioFile

logger = logging.getLogger(__name__)

DEFAULT_MASTER_RX_CAPACITY = 48
DEFAULT_WATCHDOG_CYCLES = 3
MEDIUM_JAMMER = "medium:jam"


class Outcome(Enum):
    DELIVERED = "Delivered"
    COLLIDED = "Collided"
    JAMMED = "Jammed"
    NO_LISTENER = "NoListener"
    DISPLACED = "Displaced"


@dataclass(frozen=True)
class DeliveryOutcome:
    outcome: Outcome
    bit_flips: int = 0
    culprits: tuple[str, ...] = ()
    received: bytes = b""

    @property
    def delivered(self) -> bool:
        return self.outcome is Outcome.DELIVERED


@dataclass(frozen=True)
class Burst:
    """One transmission on the air. ``frame`` is the air image (legacy frames include the checksum)."""
    burst_id: int
    sub_cycle: int
    channel: int
    slot: int
    leg: Direction
    frame: bytes
    origin: str
    kind: FrameKind
    port: Optional[PortId] = None
    legitimate: bool = True


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class JamWindow:
    """Channels jammed from start_cycle up to (not including) stop_cycle; no channels means all."""
    start_cycle: int
    stop_cycle: int
    channels: list[Union[int, str]] = field(default_factory=list)

    def channel_set(self) -> frozenset[int]:
        return parse_blocklist(self.channels) if self.channels else frozenset(range(1, CHANNEL_COUNT + 1))


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class MediumConfig:
    bsc_p: float = 0.0
    jam: list[JamWindow] = field(default_factory=list)
    master_rx_capacity: int = DEFAULT_MASTER_RX_CAPACITY
    watchdog_cycles: int = DEFAULT_WATCHDOG_CYCLES
    oob_available: bool = True

    def __post_init__(self):
        if not 0.0 <= self.bsc_p <= 0.5:
            raise InvalidParams(f"bsc_p {self.bsc_p} outside [0, 0.5]")
        if self.master_rx_capacity < 1:
            raise InvalidParams("master_rx_capacity must be at least 1")
        if self.watchdog_cycles < 1:
            raise InvalidParams("watchdog_cycles must be at least 1")


# =============================================================================
# Error detection, noise
# =============================================================================


def crc8(data: bytes) -> int:
    """CRC-8, polynomial x^8 + x^2 + x + 1."""
    crc = 0
    for octet in data:
        crc ^= octet
        for _ in range(8):
            crc = ((crc << 1) ^ 0x07) & 0xFF if crc & 0x80 else (crc << 1) & 0xFF
    return crc


def with_checksum(frame: bytes) -> bytes:
    return frame + bytes([crc8(frame)])


def strip_checksum(air: bytes) -> Optional[bytes]:
    """Frame without its checksum octet, or None when the checksum does not match."""
    if len(air) < 2 or crc8(air[:-1]) != air[-1]:
        return None
    return air[:-1]


def air_octets(device: DeviceConfig) -> int:
    """Length on the air of one cyclic frame of ``device``, checksum included."""
    if device.secured:
        return 1 + COUNTER_OCTETS + device.process_data_octets + device.tag_bits // 8 + 1
    return 1 + device.process_data_octets + 1


def bsc_p_for_trial_failure(q: float, downlink_bits: int, uplink_bits: Optional[int] = None) -> float:
    """Bit-flip probability under which one trial, poll and answer together, fails with probability q.

    ``uplink_bits`` defaults to ``downlink_bits``.
    """
    uplink_bits = downlink_bits if uplink_bits is None else uplink_bits
    if not 0.0 <= q < 1.0 or downlink_bits < 1 or uplink_bits < 1:
        raise InvalidParams("q must be in [0, 1) and frame sizes positive")
    return 1.0 - (1.0 - q) ** (1.0 / (downlink_bits + uplink_bits))


def stream_seed(seed: int, label: str, *coordinates: int) -> list[int]:
    """Seed material of a labelled random stream; Python's hash() is salted per process."""
    return [seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(label.encode("utf-8")), *coordinates]


def flip_bits(air: bytes, p: float, rng: np.random.Generator) -> tuple[bytes, int]:
    bits = len(air) * 8
    flips = int(rng.binomial(bits, p))
    if flips == 0:
        return air, 0
    data = bytearray(air)
    for position in rng.choice(bits, size=flips, replace=False):
        data[position // 8] ^= 0x80 >> (position % 8)
    return bytes(data), flips


# =============================================================================
# Clock, medium, safe state
# =============================================================================


@dataclass
class SimClock:
    sub_cycles_per_cycle: int = 3
    sub_cycle_counter: int = 0

    @property
    def cycle_index(self) -> int:
        return self.sub_cycle_counter // self.sub_cycles_per_cycle

    @property
    def sub_cycle_index(self) -> int:
        return self.sub_cycle_counter % self.sub_cycles_per_cycle

    def advance(self) -> int:
        self.sub_cycle_counter += 1
        return self.sub_cycle_counter


class Medium:
    """Resolves the bursts of one leg of one sub-cycle."""

    def __init__(self, seed: int = 0, bsc_p: float = 0.0):
        if not 0.0 <= bsc_p <= 0.5:
            raise InvalidParams(f"bsc_p {bsc_p} outside [0, 0.5]")
        self.seed = seed
        self.bsc_p = bsc_p

    def transmit(
        self,
        bursts: Sequence[Burst],
        *,
        jammed: Optional[Mapping[int, str]] = None,
        listening: Optional[Callable[[Burst], bool]] = None,
    ) -> list[DeliveryOutcome]:
        """One outcome per burst, in input order. Bursts passed together are concurrent."""
        jammed = jammed or {}
        groups: dict[tuple[int, int, int, Direction], list[Burst]] = {}
        for burst in bursts:
            groups.setdefault((burst.sub_cycle, burst.channel, burst.slot, burst.leg), []).append(burst)

        outcomes = []
        for burst in bursts:
            if burst.channel in jammed:
                outcomes.append(DeliveryOutcome(Outcome.JAMMED, culprits=(jammed[burst.channel],)))
                continue
            group = groups[(burst.sub_cycle, burst.channel, burst.slot, burst.leg)]
            if len(group) > 1:
                others = sorted({b.origin for b in group if b.burst_id != burst.burst_id})
                outcomes.append(DeliveryOutcome(Outcome.COLLIDED, culprits=tuple(others)))
                continue
            if listening is not None and not listening(burst):
                outcomes.append(DeliveryOutcome(Outcome.NO_LISTENER, received=burst.frame))
                continue
            received, flips = burst.frame, 0
            if self.bsc_p > 0.0:
                leg_bit = 1 if burst.leg is Direction.UPLINK else 0
                rng = np.random.default_rng(stream_seed(self.seed, "noise", burst.sub_cycle, burst.channel,
                                                        burst.slot, leg_bit))
                received, flips = flip_bits(burst.frame, self.bsc_p, rng)
            outcomes.append(DeliveryOutcome(Outcome.DELIVERED, bit_flips=flips, received=received))
        return outcomes


@dataclass
class SafeStateMonitor:
    """Watchdog of one safety endpoint."""
    endpoint: str
    watchdog_cycles: int = DEFAULT_WATCHDOG_CYCLES
    last_valid_cycle: int = 0
    safe: bool = False

    def valid_exchange(self, cycle: int) -> bool:
        """Record a valid exchange; True when this ends a SafeState."""
        self.last_valid_cycle = cycle
        if self.safe:
            self.safe = False
            return True
        return False

    def end_of_cycle(self, cycle: int) -> bool:
        """True when the endpoint enters SafeState at the end of ``cycle``."""
        if not self.safe and cycle - self.last_valid_cycle >= self.watchdog_cycles:
            self.safe = True
            return True
        return False


def safe_state_monitor(endpoint: str, watchdog_cycles: int, start_cycle: int = 0) -> SafeStateMonitor:
    if watchdog_cycles < 1:
        raise InvalidParams("watchdog_cycles must be at least 1")
    return SafeStateMonitor(endpoint, watchdog_cycles, last_valid_cycle=start_cycle)


# =============================================================================
# Simulation
# =============================================================================


@dataclass(frozen=True)
class DeviceOverride:
    """What a device under attacker control does instead of its normal answer."""
    origin: str
    silent: bool = False
    payload: Optional[bytes] = None


class AirActor(Protocol):
    """Anything besides the legitimate nodes that takes part in the loop."""
    name: str

    def on_cycle(self, sim: "Simulation", cycle: int) -> None: ...
    def bursts(self, sim: "Simulation", sub_cycle: int, leg: Direction) -> list[Burst]: ...
    def jammed_channels(self, sim: "Simulation", sub_cycle: int) -> frozenset[int]: ...
    def observe(self, sim: "Simulation", burst: Burst, outcome: DeliveryOutcome) -> None: ...
    def device_override(self, sim: "Simulation", port: PortId, sub_cycle: int) -> Optional[DeviceOverride]: ...
    def device_received(self, sim: "Simulation", port: PortId, plaintext: bytes) -> None: ...


def _process_data(seed: int, cycle: int, octets: int) -> bytes:
    return bytes((seed + cycle + i) & 0xFF for i in range(octets))


def parse_track(text: str) -> TrackKey:
    master, track = (part[1:] for part in text.split("/"))
    return (int(master), int(track))


def format_track(track: TrackKey) -> str:
    return f"M{track[0]}/T{track[1]}"


class Simulation:
    """One run of a cell under a scenario. Use :func:`run` for the common case."""

    def __init__(
        self,
        cell: Cell,
        scenario: Optional["ScenarioFile"] = None,
        seed: int = 0,
        horizon_cycles: int = 100,
        *,
        sniffer: bool = True,
    ):
        if horizon_cycles < 1:
            raise InvalidScenario("horizon_cycles must be at least 1")
        self.cell = cell
        self.scenario = scenario
        self.seed = seed
        self.horizon_cycles = horizon_cycles
        self.medium_config: MediumConfig = scenario.medium if scenario else MediumConfig()
        self.events = sorted(scenario.events, key=lambda e: e.at_cycle) if scenario else []
        self.reconfigure_after = scenario.reconfigure_after_cycles if scenario else None
        detection: DetectionConfig = scenario.detection if scenario else DetectionConfig()

        timing = cell.timing
        self.clock = SimClock(timing.sub_cycles_per_cycle)
        self.trace = SimTrace(seed, horizon_cycles, timing.sub_cycles_per_cycle, scenario.name if scenario else "")
        self.medium = Medium(seed, self.medium_config.bsc_p)
        self.sniffer = Sniffer(detection) if sniffer and detection.enabled else None
        self.anomaly = MasterAnomalyMonitor()
        self.actors: list[AirActor] = []
        self.pending_config: list[tuple[PortId, Direction, int, bytes]] = []
        self.pending_switches: dict[TrackKey, HoppingTable] = {}
        self.monitors: dict[str, SafeStateMonitor] = {}
        self.fail_since: dict[PortId, int] = {}
        self._burst_ids = 0
        self._ran = False
        self.pairing = PairingManager(
            cell,
            self.stream("pairing"),
            oob=OobChannel(available=self.medium_config.oob_available),
            radio=self,
            tables=lambda key: self.cell.tables[key],
            on_event=self._on_pairing_event,
        )

    # ------------------------------------------------------------ utilities

    def stream(self, label: str) -> np.random.Generator:
        return np.random.default_rng(stream_seed(self.seed, label))

    @property
    def sub_cycle(self) -> int:
        return self.clock.sub_cycle_counter

    @property
    def cycle(self) -> int:
        return self.clock.cycle_index

    def make_burst(
        self,
        channel: int,
        slot: int,
        leg: Direction,
        frame: bytes,
        origin: str,
        kind: FrameKind,
        port: Optional[PortId] = None,
        *,
        legitimate: bool = False,
    ) -> Burst:
        self._burst_ids += 1
        return Burst(self._burst_ids, self.sub_cycle, channel, slot, leg, frame, origin, kind, port, legitimate)

    def add_actor(self, actor: AirActor) -> None:
        if self._ran:
            raise InvalidScenario("actors must be added before the run starts")
        self.actors.append(actor)

    def device(self, port: PortId) -> Optional[DeviceConfig]:
        return self.pairing.state(port).device

    def table(self, track: TrackKey) -> HoppingTable:
        return self.cell.tables[track]

    def grants_now(self, track: TrackKey) -> list[TransmissionGrant]:
        """Full (feedback-free) grant grid of the track in the current cycle."""
        return schedule_cycle(self.cell, track, self.cycle, active_slots=self._active_slots(track))

    def emit(self, port: PortId, leg: Direction, channel: int, frame: bytes) -> None:
        """Radio interface for the pairing manager."""
        self.pending_config.append((port, leg, channel, frame))

    def _on_pairing_event(self, event: PairingEvent) -> None:
        if event.action in ("enter_service_mode", "exit_service_mode"):
            self.trace.record(EventKind.SERVICE_MODE, self.sub_cycle, track=format_track(event.track),
                              active=event.action == "enter_service_mode")
            return
        self.trace.record(EventKind.PAIRING, self.sub_cycle, port=event.port or "", action=event.action,
                          device_uid=event.device_uid)

    def _active_slots(self, track: TrackKey) -> list[int]:
        slots = []
        for port in self.pairing.active_ports():
            if port.track != track:
                continue
            links = self.pairing.links.get(port)
            if links is not None and links.master.state is LinkState.FAIL_STATE:
                continue
            slots.append(port.slot_id)
        return slots

    def _jammed(self, sub_cycle: int) -> dict[int, str]:
        cycle = sub_cycle // self.clock.sub_cycles_per_cycle
        jammed: dict[int, str] = {}
        for window in self.medium_config.jam:
            if window.start_cycle <= cycle < window.stop_cycle:
                for channel in window.channel_set():
                    jammed.setdefault(channel, MEDIUM_JAMMER)
        for actor in self.actors:
            for channel in actor.jammed_channels(self, sub_cycle):
                jammed.setdefault(channel, actor.name)
        return jammed

    # ------------------------------------------------------------- main loop

    def run(self) -> SimTrace:
        if self._ran:
            raise InvalidScenario("a Simulation runs once")
        self._ran = True
        spc = self.clock.sub_cycles_per_cycle
        self.trace.record(EventKind.RUN_STARTED, 0, horizon_cycles=self.horizon_cycles, seed=self.seed,
                          watchdog_cycles=self.medium_config.watchdog_cycles)
        logger.info("run started: %d cycles, seed %d", self.horizon_cycles, self.seed)
        event_index = 0
        for cycle in range(self.horizon_cycles):
            self.clock.sub_cycle_counter = cycle * spc
            event_index = self._begin_cycle(cycle, event_index)
            delivered: dict[PortId, int] = {}
            trials: Counter = Counter()
            for k in range(spc):
                self.clock.sub_cycle_counter = cycle * spc + k
                self._sub_cycle(cycle, k, delivered, trials)
            self._end_cycle(cycle, delivered, trials)
        self.clock.sub_cycle_counter = self.horizon_cycles * spc
        self.trace.complete = True
        self.trace.record(EventKind.RUN_FINISHED, self.sub_cycle, events=len(self.trace.events))
        logger.info("run finished: %d events", len(self.trace.events))
        return self.trace

    def _begin_cycle(self, cycle: int, event_index: int) -> int:
        for track, table in sorted(self.pending_switches.items()):
            self.cell = self.cell.with_table(track, table)
            self.trace.record(EventKind.TABLE_SWITCH, self.sub_cycle, track=format_track(track),
                              generation=table.generation, active=True)
        self.pending_switches.clear()

        while event_index < len(self.events) and self.events[event_index].at_cycle <= cycle:
            self._dispatch(self.events[event_index], cycle)
            event_index += 1

        self.pairing.tick(cycle)

        if self.reconfigure_after is not None:
            for port, since in sorted(self.fail_since.items()):
                if cycle - since >= self.reconfigure_after:
                    self._reconfigure(port, cycle)

        for actor in self.actors:
            actor.on_cycle(self, cycle)

        active = {str(p) for p in self.pairing.active_ports()}
        for endpoint in list(self.monitors):
            if endpoint.split("@", 1)[1] not in active:
                del self.monitors[endpoint]
        for port in active:
            for role in ("master", "device"):
                key = f"{role}@{port}"
                if key not in self.monitors:
                    self.monitors[key] = safe_state_monitor(key, self.medium_config.watchdog_cycles, cycle - 1)
        return event_index

    def _reconfigure(self, port: PortId, cycle: int) -> None:
        try:
            self.pairing.reconfigure_port(port, cycle)
        except IolwSimError as exc:
            logger.warning("reconfiguration of %s failed: %s", port, exc)
            return
        self.fail_since.pop(port, None)
        self.anomaly.reset(str(port))
        self.trace.record(EventKind.RECONFIGURED, self.sub_cycle, port=port)

    def _dispatch(self, event, cycle: int) -> None:
        args = dict(event.args)
        try:
            match event.action:
                case "enter_service_mode":
                    self.pairing.enter_service_mode(parse_track(args["track"]), cycle)
                case "exit_service_mode":
                    self.pairing.exit_service_mode(parse_track(args["track"]), cycle)
                case "pair_by_unique_id":
                    self.pairing.pair_by_unique_id(
                        PortId.parse(args["port"]),
                        int(args["device_uid"]),
                        PairingMode(args.get("mode", PairingMode.SECURED_OOB.value)),
                        slot_kind=FrameKind(args["slot_kind"]) if "slot_kind" in args else None,
                        tag_bits=int(args.get("tag_bits", 32)),
                        safety=bool(args.get("safety", False)),
                        cycle=cycle,
                    )
                case "pair_by_button":
                    self.pairing.pair_by_button(
                        PortId.parse(args["port"]),
                        int(args["device_uid"]),
                        slot_kind=FrameKind(args["slot_kind"]) if "slot_kind" in args else None,
                        cycle=cycle,
                    )
                case "roam":
                    self.pairing.roam(
                        int(args["device_uid"]),
                        int(args["from_master"]),
                        int(args["to_master"]),
                        int(args.get("lease_cycles", 12_000)),
                        cycle=cycle,
                    )
                case "return_home":
                    self.pairing.return_home(int(args["device_uid"]), cycle)
                case "adaptive_switch":
                    self.request_table_switch(parse_track(args["track"]), parse_blocklist(args.get("blocklist", [])))
                case "reconfigure":
                    self._reconfigure(PortId.parse(args["port"]), cycle)
                case _:
                    raise InvalidScenario(f"unknown event action {event.action!r}")
        except InvalidScenario:
            raise
        except IolwSimError as exc:
            logger.warning("event %s at cycle %d rejected: %s", event.action, cycle, exc)
            self.trace.record(EventKind.PAIRING, self.sub_cycle, action=f"rejected:{event.action}",
                              error=type(exc).__name__, message=str(exc))

    def request_table_switch(self, track: TrackKey, blocklist: frozenset[int]) -> HoppingTable:
        """Generate the next table now, distribute it, activate it at the next cycle boundary."""
        new_table = adaptive_switch(self.cell.tables[track], blocklist)
        self.pending_switches[track] = new_table
        self.pairing.distribute_table(track, new_table, self.cycle)
        self.trace.record(EventKind.TABLE_SWITCH, self.sub_cycle, track=format_track(track),
                          generation=new_table.generation, active=False)
        return new_table

    # ------------------------------------------------------------ sub-cycle

    def _sub_cycle(self, cycle: int, k: int, delivered: dict[PortId, int], trials: Counter) -> None:
        sub = self.sub_cycle
        grants: list[TransmissionGrant] = []
        for track in self.cell.track_keys():
            slots = self._active_slots(track)
            if not slots:
                continue
            feedback = {port.slot_id: at for port, at in delivered.items() if port.track == track}
            for grant in schedule_cycle(self.cell, track, cycle, delivered=feedback, active_slots=slots):
                if grant.sub_cycle_index == k:
                    grants.append(grant)
        for grant in grants:
            trials[grant.port] += 1
            self.trace.record(EventKind.GRANT, sub, port=grant.port, channel=grant.channel_index, retry=k)
        by_position: dict[tuple[int, int], list[TransmissionGrant]] = {}
        for grant in grants:
            by_position.setdefault((grant.channel_index, grant.slot_id), []).append(grant)

        expected: Counter = Counter()
        for grant in grants:
            expected[grant.channel_index] += len(grant.legs)

        config_bursts = {Direction.DOWNLINK: [], Direction.UPLINK: []}
        positions: Counter = Counter()
        for port, leg, channel, frame in self.pending_config:
            burst = self.make_burst(channel, positions[(channel, leg)], leg, with_checksum(frame),
                                    f"{'master' if leg is Direction.DOWNLINK else 'device'}:{port}",
                                    FrameKind.CONFIG, port, legitimate=True)
            positions[(channel, leg)] += 1
            config_bursts[leg].append(burst)
            expected[channel] += 1
        self.pending_config.clear()

        jammed = self._jammed(sub)

        # downlink leg
        downlink = [self._poll(grant, k) for grant in grants] + config_bursts[Direction.DOWNLINK]
        for actor in self.actors:
            downlink.extend(actor.bursts(self, sub, Direction.DOWNLINK))
        dl_outcomes = self._resolve(downlink, jammed, lambda b: (b.channel, b.slot) in by_position)
        answering: list[tuple[TransmissionGrant, Optional[DeviceOverride]]] = []
        for burst, outcome in zip(downlink, dl_outcomes):
            if not outcome.delivered or burst.kind is FrameKind.CONFIG:
                continue
            grant = self._addressee(by_position[(burst.channel, burst.slot)], burst)
            if self._device_accepts(grant, outcome.received, cycle):
                answering.append((grant, self._override(grant.port)))

        # uplink leg
        uplink = []
        for grant, override in answering:
            if override is not None and override.silent:
                continue
            uplink.append(self._answer(grant, k, cycle, override))
        uplink.extend(config_bursts[Direction.UPLINK])
        for actor in self.actors:
            uplink.extend(actor.bursts(self, sub, Direction.UPLINK))
        ul_outcomes = self._resolve(uplink, jammed, lambda b: self._master_listens(b, by_position), record=False)
        ul_outcomes = self._master_queues(uplink, ul_outcomes, by_position)
        for burst, outcome in zip(uplink, ul_outcomes):
            self._record_delivery(burst, outcome)
        for burst, outcome in zip(uplink, ul_outcomes):
            if outcome.delivered and burst.kind is not FrameKind.CONFIG:
                grant = self._addressee(by_position[(burst.channel, burst.slot)], burst)
                if self._master_receives(grant, burst, outcome.received, cycle):
                    delivered.setdefault(grant.port, k)

        for burst, outcome in zip(downlink + uplink, dl_outcomes + ul_outcomes):
            for actor in self.actors:
                actor.observe(self, burst, outcome)

        if self.sniffer is not None:
            self.sniffer.begin_sub_cycle(expected)
            for burst, outcome in zip(downlink + uplink, dl_outcomes + ul_outcomes):
                alert = sniffer_ingest(self.sniffer, BurstObservation(sub, burst.channel, self._decodable(outcome)))
                if alert is not None:
                    self._record_sniffer_alert(alert)
            for channel in jammed:
                self.sniffer.ingest_energy(channel)
            for alert in self.sniffer.end_sub_cycle(sub):
                self._record_sniffer_alert(alert)

    def _record_sniffer_alert(self, alert: Alert) -> None:
        self.trace.record(EventKind.ALERT, alert.sub_cycle, actor="sniffer", alert=alert.kind.value,
                          channels=list(alert.channels), message=alert.detail)

    @staticmethod
    def _decodable(outcome: DeliveryOutcome) -> bool:
        if outcome.outcome in (Outcome.COLLIDED, Outcome.JAMMED) or not outcome.received:
            return False
        try:
            ControlOctet.from_byte(outcome.received[0])
        except MalformedFrame:
            return False
        return True

    def _resolve(self, bursts, jammed, listening, *, record: bool = True) -> list[DeliveryOutcome]:
        for burst in bursts:
            self.trace.record(
                EventKind.BURST, burst.sub_cycle, actor=burst.origin, port=burst.port or "",
                burst_id=burst.burst_id, channel=burst.channel, slot=burst.slot, leg=burst.leg.value,
                frame=burst.frame.hex(), legitimate=burst.legitimate,
            )
        outcomes = self.medium.transmit(bursts, jammed=jammed, listening=listening)
        if record:
            for burst, outcome in zip(bursts, outcomes):
                self._record_delivery(burst, outcome)
        return outcomes

    def _record_delivery(self, burst: Burst, outcome: DeliveryOutcome) -> None:
        self.trace.record(
            EventKind.DELIVERY, burst.sub_cycle, actor=burst.origin, port=burst.port or "",
            burst_id=burst.burst_id, outcome=outcome.outcome.value, bit_flips=outcome.bit_flips,
            culprits=list(outcome.culprits), legitimate=burst.legitimate,
        )

    @staticmethod
    def _addressee(candidates: list[TransmissionGrant], burst: Burst) -> TransmissionGrant:
        for grant in candidates:
            if grant.port == burst.port:
                return grant
        return candidates[0]

    def _master_listens(self, burst: Burst, by_position) -> bool:
        if burst.kind is FrameKind.CONFIG or burst.channel in CONFIG_CHANNELS:
            return bool(self.pairing.service_mode)
        return (burst.channel, burst.slot) in by_position

    def _master_queues(self, bursts, outcomes, by_position) -> list[DeliveryOutcome]:
        """Each master handles at most master_rx_capacity frames per sub-cycle, configuration frames first."""
        capacity = self.medium_config.master_rx_capacity
        queues: dict[int, list[int]] = {}
        for index, (burst, outcome) in enumerate(zip(bursts, outcomes)):
            if not outcome.delivered:
                continue
            if burst.kind is FrameKind.CONFIG or burst.channel in CONFIG_CHANNELS:
                for master_id in sorted({m for m, _ in self.pairing.service_mode}):
                    queues.setdefault(master_id, []).append(index)
            else:
                master_id = self._addressee(by_position[(burst.channel, burst.slot)], burst).master_id
                queues.setdefault(master_id, []).append(index)

        def is_config(index: int) -> bool:
            return bursts[index].kind is FrameKind.CONFIG or bursts[index].channel in CONFIG_CHANNELS

        served: set[int] = set()
        displaced: dict[int, set[str]] = {}
        for master_id, indices in sorted(queues.items()):
            ordered = sorted(indices, key=lambda i: (not is_config(i), i))
            taken = ordered[:capacity]
            served.update(taken)
            crowd = {bursts[i].origin for i in taken if not bursts[i].legitimate}
            for index in ordered[capacity:]:
                displaced.setdefault(index, set()).update(crowd)

        result = list(outcomes)
        for index, crowd in displaced.items():
            if index not in served:
                result[index] = DeliveryOutcome(Outcome.DISPLACED, culprits=tuple(sorted(crowd)))
        return result

    def _override(self, port: PortId) -> Optional[DeviceOverride]:
        for actor in self.actors:
            override = actor.device_override(self, port, self.sub_cycle)
            if override is not None:
                return override
        return None

    # ------------------------------------------------------ legitimate nodes

    def _poll(self, grant: TransmissionGrant, k: int) -> Burst:
        port = grant.port
        device = self.device(port)
        control = ControlOctet(direction=Direction.DOWNLINK, retry=k)
        payload = _process_data(port.master_id + port.slot_id, self.cycle, device.process_data_octets)
        frame = self._frame(port, device, control, payload)
        return self.make_burst(grant.channel_index, grant.slot_id, Direction.DOWNLINK, frame,
                               f"master:M{port.master_id}", device.slot_kind, port, legitimate=True)

    def _answer(self, grant: TransmissionGrant, k: int, cycle: int, override: Optional[DeviceOverride]) -> Burst:
        port = grant.port
        device = self.device(port)
        control = ControlOctet(direction=Direction.UPLINK, retry=k)
        if override is not None and override.payload is not None:
            payload, origin, legitimate = override.payload, override.origin, False
        else:
            payload = _process_data(device.device_uid, cycle, device.process_data_octets)
            origin, legitimate = f"device:{device.device_uid}", True
        frame = self._frame(port, device, control, payload, uplink=True)
        return self.make_burst(grant.channel_index, grant.slot_id, Direction.UPLINK, frame, origin,
                               device.slot_kind, port, legitimate=legitimate)

    def _frame(self, port: PortId, device: DeviceConfig, control: ControlOctet, payload: bytes,
               *, uplink: bool = False) -> bytes:
        if not device.secured:
            return with_checksum(encode_frame(Frame(device.slot_kind, control, payload)))
        links = self.pairing.links[port]
        link = links.device if uplink else links.master
        header = bytes([control.to_byte()])
        sealed = link.seal(header, payload)
        frame = Frame(device.slot_kind, control, sealed.ciphertext, sealed.counter, sealed.tag)
        return with_checksum(encode_frame(frame))

    def _unwrap(self, device: DeviceConfig, received: bytes, expect: Direction) -> Optional[Frame]:
        air = strip_checksum(received)
        if air is None:
            return None
        try:
            frame = decode_frame(device.slot_kind, air, device.wire_tag_bits)
        except MalformedFrame:
            return None
        return frame if frame.control.direction is expect else None

    def _device_accepts(self, grant: TransmissionGrant, received: bytes, cycle: int) -> bool:
        port = grant.port
        device = self.device(port)
        frame = self._unwrap(device, received, Direction.DOWNLINK)
        if frame is None:
            return False
        if device.secured:
            links = self.pairing.links[port]
            try:
                plaintext = links.device.open(frame.counter, frame.header_bytes, frame.payload, frame.tag)
            except (AuthFailure, ReplayRejected, LinkInFailState):
                return False
        else:
            plaintext = frame.payload
        self._valid(f"device@{port}", cycle)
        for actor in self.actors:
            actor.device_received(self, port, plaintext)
        return True

    def _master_receives(self, grant: TransmissionGrant, burst: Burst, received: bytes, cycle: int) -> bool:
        port = grant.port
        device = self.device(port)
        name = str(port)
        frame = self._unwrap(device, received, Direction.UPLINK)
        if frame is None:
            self.trace.record(EventKind.FRAME_ERROR, self.sub_cycle, actor=burst.origin, port=port,
                              burst_id=burst.burst_id)
            return False
        if device.secured:
            links = self.pairing.links[port]
            try:
                payload = links.master.open(frame.counter, frame.header_bytes, frame.payload, frame.tag)
            except AuthFailure as exc:
                self.trace.record(EventKind.AUTH_FAILURE, self.sub_cycle, actor=burst.origin, port=port,
                                  burst_id=burst.burst_id, counter=frame.counter, locked_out=exc.locked_out)
                alert = master_anomaly_check(self.anomaly, "auth_failure", name, self.sub_cycle)
                if alert is not None:
                    self.trace.record(EventKind.ALERT, self.sub_cycle, actor="master", port=port,
                                      alert=alert.kind.value, message=alert.detail)
                if exc.locked_out:
                    self.fail_since[port] = cycle
                    self.trace.record(EventKind.FAIL_STATE, self.sub_cycle, port=port)
                return False
            except ReplayRejected:
                self.trace.record(EventKind.REPLAY_REJECTED, self.sub_cycle, actor=burst.origin, port=port,
                                  burst_id=burst.burst_id, counter=frame.counter)
                alert = master_anomaly_check(self.anomaly, "replay_rejected", name, self.sub_cycle)
                self.trace.record(EventKind.ALERT, self.sub_cycle, actor="master", port=port,
                                  alert=alert.kind.value, message=alert.detail)
                return False
            except LinkInFailState:
                return False
        else:
            payload = frame.payload
        master_anomaly_check(self.anomaly, "accepted", name, self.sub_cycle)
        self.trace.record(EventKind.ACCEPTED, self.sub_cycle, actor=burst.origin, port=port,
                          burst_id=burst.burst_id, legitimate=burst.legitimate, safety=device.safety,
                          payload=payload.hex())
        self._valid(f"master@{port}", cycle)
        return True

    def _valid(self, endpoint: str, cycle: int) -> None:
        monitor = self.monitors.get(endpoint)
        if monitor is not None and monitor.valid_exchange(cycle):
            self.trace.record(EventKind.SAFE_STATE_LEFT, self.sub_cycle, port=endpoint.split("@", 1)[1],
                              endpoint=endpoint)

    def _end_cycle(self, cycle: int, delivered: dict[PortId, int], trials: Counter) -> None:
        for port in sorted(trials):
            self.trace.record(EventKind.EXCHANGE, self.sub_cycle, port=port, success=port in delivered,
                              trials=trials[port])
        for endpoint in sorted(self.monitors):
            if self.monitors[endpoint].end_of_cycle(cycle):
                port = endpoint.split("@", 1)[1]
                device = self.device(PortId.parse(port))
                logger.info("%s entered SafeState at cycle %d", endpoint, cycle)
                self.trace.record(EventKind.SAFE_STATE_ENTERED, self.sub_cycle, port=port, endpoint=endpoint,
                                  safety=bool(device and device.safety), safety_impact=False)


def run(
    cell: Cell,
    scenario: Optional["ScenarioFile"] = None,
    seed: int = 0,
    horizon_cycles: Optional[int] = None,
    *,
    sniffer: bool = True,
) -> SimTrace:
    """Simulate ``cell`` under ``scenario`` (attacks included) and return the trace."""
    from iolwsim.adversary import arm

    horizon = horizon_cycles or (scenario.horizon_cycles if scenario else 100)
    sim = Simulation(cell, scenario, seed, horizon, sniffer=sniffer)
    if scenario is not None:
        for attack in scenario.attacks:
            arm(attack, sim)
    return sim.run()
