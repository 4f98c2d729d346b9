"""
Attack scenarios run inside the simulation loop.

Each attack kind has a fixed set of prerequisites. Static ones (proximity, what
the attacker was told) come from the scenario; dynamic ones (a sniffed hopping
table, captured frames, a master in pairing mode) are evaluated against the
running simulation when the attack is due to start. An attack whose
prerequisites do not hold is refused: it is recorded in the trace and never
transmits.

Attack outcomes are not reported by the attackers. ``run_attack`` hands the
finished trace to :func:`iolwsim.analysis.classify_trace`, which derives the
impact from evidence events.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

import numpy as np
from dataclasses_json import Undefined, dataclass_json

from iolwsim.errors import AuthFailure, InvalidScenario, MalformedFrame, PrerequisiteUnmet, ReplayRejected
from iolwsim.hopping import CHANNEL_COUNT, CONFIG_CHANNELS, next_channel, parse_blocklist
from iolwsim.medium import Burst, DeliveryOutcome, DeviceOverride, Outcome, Simulation, strip_checksum, with_checksum
from iolwsim.pairing import (
    MSG_PAIRING_ACK,
    MSG_PAIRING_REQUEST,
    MSG_SEALED,
    MSG_TABLE,
    UPLINK_CONFIG_CHANNEL,
    config_frame,
    parse_table_message,
)
from iolwsim.protocol import (
    MAX_SLOTS,
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
)
from iolwsim.secure_channel import LinkState, SecureLink
from iolwsim.trace import EventKind, SimTrace

logger = logging.getLogger(__name__)

ATTACKER_PREFIX = "attacker:"
CAPTURE_DEPTH = 64


class AttackKind(Enum):
    FLOODING = "Flooding"
    JAMMING = "Jamming"
    REPLAY = "Replay"
    FORGERY = "Forgery"
    FORGERY_LEAKED_KEY = "ForgeryLeakedKey"
    COMPROMISED_DEVICE = "CompromisedDevice"


class Impact(Enum):
    AVAILABILITY = "Availability"
    INTEGRITY = "Integrity"
    CONFIDENTIALITY = "Confidentiality"


class Prerequisite(Enum):
    PROXIMITY = "proximity"
    HOPPING_TABLE = "hopping_table"
    IOLW_CONFIG = "iolw_config"
    PAIRING_MODE = "pairing_mode"
    SNIFFED_TRAFFIC = "sniffed_traffic"
    COUNTER_VALUE = "counter_value"
    LEAKED_KEY = "leaked_key"
    DEVICE_ACCESS = "device_access"


PREREQUISITES: dict[AttackKind, frozenset[Prerequisite]] = {
    AttackKind.FLOODING: frozenset({
        Prerequisite.PROXIMITY, Prerequisite.HOPPING_TABLE, Prerequisite.IOLW_CONFIG, Prerequisite.PAIRING_MODE,
    }),
    AttackKind.JAMMING: frozenset({Prerequisite.PROXIMITY}),
    AttackKind.REPLAY: frozenset({Prerequisite.PROXIMITY, Prerequisite.HOPPING_TABLE, Prerequisite.SNIFFED_TRAFFIC}),
    AttackKind.FORGERY: frozenset({Prerequisite.PROXIMITY, Prerequisite.HOPPING_TABLE, Prerequisite.COUNTER_VALUE}),
    AttackKind.FORGERY_LEAKED_KEY: frozenset({
        Prerequisite.PROXIMITY, Prerequisite.HOPPING_TABLE, Prerequisite.COUNTER_VALUE, Prerequisite.LEAKED_KEY,
    }),
    AttackKind.COMPROMISED_DEVICE: frozenset({Prerequisite.DEVICE_ACCESS}),
}


# =============================================================================
# Scenario model
# =============================================================================


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class AttackerKnowledge:
    """What the attacker is told up front. A hopping table can also be sniffed during the run."""
    hopping_table: bool = False
    iolw_config: bool = False
    counter_value: bool = False
    leaked_key: bool = False


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class PhysicalAccess:
    proximity: bool = True
    device_access: bool = False


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class AttackSchedule:
    """Active from start_cycle up to (not including) stop_cycle; no stop means until the horizon."""
    start_cycle: int = 0
    stop_cycle: Optional[int] = None
    intensity: int = 1

    def __post_init__(self):
        if self.start_cycle < 0:
            raise ValueError("start_cycle must not be negative")
        if self.stop_cycle is not None and self.stop_cycle <= self.start_cycle:
            raise ValueError("stop_cycle must come after start_cycle")
        if self.intensity < 1:
            raise ValueError("intensity must be at least one burst per sub-cycle")


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class AttackScenario:
    name: str
    kind: AttackKind
    target: str
    knowledge: AttackerKnowledge = field(default_factory=AttackerKnowledge)
    physical: PhysicalAccess = field(default_factory=PhysicalAccess)
    schedule: AttackSchedule = field(default_factory=AttackSchedule)
    channels: list[Union[int, str]] = field(default_factory=list)
    payload: Optional[str] = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("an attack needs a name")
        try:
            PortId.parse(self.target)
        except (ValueError, IndexError) as exc:
            raise ValueError(f"attack {self.name}: target {self.target!r} is not a port like 'M1/T0/S0'") from exc
        if self.payload is not None:
            bytes.fromhex(self.payload)
        parse_blocklist(self.channels)

    @property
    def port(self) -> PortId:
        return PortId.parse(self.target)

    @property
    def origin(self) -> str:
        return f"{ATTACKER_PREFIX}{self.name}"

    def jammed_channels(self) -> frozenset[int]:
        return parse_blocklist(self.channels) if self.channels else frozenset(range(1, CHANNEL_COUNT + 1))


@dataclass_json
@dataclass
class AttackOutcome:
    """Classified result of one attack, derived from trace evidence."""
    attack: str
    kind: AttackKind
    succeeded: bool
    impact: list[Impact] = field(default_factory=list)
    safety_impact: bool = False
    evidence: list[int] = field(default_factory=list)
    refused: bool = False
    missing: list[str] = field(default_factory=list)

    @property
    def impact_set(self) -> frozenset[Impact]:
        return frozenset(self.impact)


# =============================================================================
# Knowledge
# =============================================================================


@dataclass
class KnowledgeUpdate:
    """Everything an eavesdropper pulled off the air."""
    tables: dict[TrackKey, tuple[int, tuple[int, ...]]] = field(default_factory=dict)
    device_uids: set[int] = field(default_factory=set)
    plaintext_ports: set[str] = field(default_factory=set)
    plaintext_frames: int = 0
    ciphertext_frames: int = 0
    sealed_config_frames: int = 0

    @property
    def hopping_table(self) -> bool:
        return bool(self.tables)

    def generation(self, track: TrackKey) -> Optional[int]:
        entry = self.tables.get(track)
        return entry[0] if entry else None

    def learn(self, port: Optional[PortId], channel: int, air: bytes, device: Optional[DeviceConfig]) -> list[dict]:
        """Digest one burst seen on the air; returns what was new."""
        if channel in CONFIG_CHANNELS:
            return self._learn_config(air)
        if port is None or device is None:
            return []
        if device.secured:
            self.ciphertext_frames += 1
            return []
        frame_bytes = strip_checksum(air)
        if frame_bytes is None:
            return []
        try:
            decode_frame(device.slot_kind, frame_bytes)
        except MalformedFrame:
            return []
        self.plaintext_frames += 1
        if str(port) in self.plaintext_ports:
            return []
        self.plaintext_ports.add(str(port))
        return [{"what": "payload_plaintext", "port": str(port)}]

    def _learn_config(self, air: bytes) -> list[dict]:
        frame_bytes = strip_checksum(air)
        if frame_bytes is None:
            return []
        try:
            body = decode_frame(FrameKind.CONFIG, frame_bytes).payload
        except MalformedFrame:
            return []
        if not body:
            return []
        if body[0] == MSG_SEALED:
            self.sealed_config_frames += 1
            return []
        if body[0] == MSG_TABLE:
            try:
                master_id, track_id, generation, channels = parse_table_message(body)
            except ValueError:
                return []
            if self.generation((master_id, track_id)) == generation:
                return []
            self.tables[(master_id, track_id)] = (generation, channels)
            return [{"what": "hopping_table", "track": f"M{master_id}/T{track_id}", "generation": generation}]
        if body[0] in (MSG_PAIRING_REQUEST, MSG_PAIRING_ACK) and len(body) >= 9:
            uid = int.from_bytes(body[1:9], "big")
            if uid in self.device_uids:
                return []
            self.device_uids.add(uid)
            return [{"what": "device_uid", "device_uid": uid}]
        return []


def sniff(sim: Simulation, window: tuple[int, int], *, proximity: bool = True) -> KnowledgeUpdate:
    """Replay what a passive eavesdropper would have captured in cycles [start, stop).

    Legacy pairing leaks the hopping table and the device UniqueID; secured pairing
    leaves only sealed configuration frames and ciphertext.
    """
    knowledge = KnowledgeUpdate()
    if not proximity:
        return knowledge
    start, stop = window
    for event in sim.trace.of_kind(EventKind.BURST):
        if not start <= event.cycle < stop or not event.detail.get("legitimate"):
            continue
        port = PortId.parse(event.port) if event.port else None
        device = sim.device(port) if port is not None else None
        knowledge.learn(port, event.detail["channel"], bytes.fromhex(event.detail["frame"]), device)
    return knowledge


def current_channel(sim: Simulation, track: TrackKey) -> int:
    """Channel the track hops to in the current sub-cycle."""
    return next_channel(sim.table(track), sim.sub_cycle + sim.cell.phases[track])


# =============================================================================
# Actors
# =============================================================================


class ActorState(Enum):
    ARMED = "armed"
    RUNNING = "running"
    REFUSED = "refused"
    STOPPED = "stopped"


class AttackActor:
    """Base attacker: prerequisite gate and lifecycle; every hook is inert by default."""

    sniffs = False

    def __init__(self, scenario: AttackScenario, sim: Simulation):
        self.scenario = scenario
        self.name = scenario.origin
        self.target = scenario.port
        self.rng: np.random.Generator = sim.stream(f"attack:{scenario.name}")
        self.knowledge = KnowledgeUpdate()
        self.state = ActorState.ARMED
        self.captured: deque[bytes] = deque(maxlen=CAPTURE_DEPTH)

    @property
    def running(self) -> bool:
        return self.state is ActorState.RUNNING

    def stop_cycle(self, sim: Simulation) -> int:
        stop = self.scenario.schedule.stop_cycle
        return sim.horizon_cycles if stop is None else min(stop, sim.horizon_cycles)

    # ------------------------------------------------------------ lifecycle

    def knows_table(self, sim: Simulation, track: TrackKey) -> bool:
        if self.scenario.knowledge.hopping_table:
            return True
        return self.knowledge.generation(track) == sim.table(track).generation

    def holds(self, prerequisite: Prerequisite, sim: Simulation) -> bool:
        knowledge, physical = self.scenario.knowledge, self.scenario.physical
        match prerequisite:
            case Prerequisite.PROXIMITY:
                return physical.proximity
            case Prerequisite.DEVICE_ACCESS:
                return physical.device_access
            case Prerequisite.HOPPING_TABLE:
                return self.knows_table(sim, self.target.track)
            case Prerequisite.IOLW_CONFIG:
                return knowledge.iolw_config
            case Prerequisite.PAIRING_MODE:
                return sim.pairing.master_in_service_mode(self.target.master_id)
            case Prerequisite.SNIFFED_TRAFFIC:
                return bool(self.captured)
            case Prerequisite.COUNTER_VALUE:
                return knowledge.counter_value
            case Prerequisite.LEAKED_KEY:
                return knowledge.leaked_key
        return False

    def missing_prerequisites(self, sim: Simulation) -> list[Prerequisite]:
        required = PREREQUISITES[self.scenario.kind]
        return sorted((p for p in required if not self.holds(p, sim)), key=lambda p: p.value)

    def on_cycle(self, sim: Simulation, cycle: int) -> None:
        schedule = self.scenario.schedule
        if self.state is ActorState.ARMED and cycle >= schedule.start_cycle:
            missing = self.missing_prerequisites(sim)
            if missing:
                self.state = ActorState.REFUSED
                names = [p.value for p in missing]
                logger.warning("attack %s refused: missing %s", self.scenario.name, ", ".join(names))
                sim.trace.record(EventKind.ATTACK_REFUSED, sim.sub_cycle, actor=self.name, port=self.target,
                                 kind=self.scenario.kind.value, missing=names)
                return
            self.state = ActorState.RUNNING
            logger.info("attack %s started at cycle %d", self.scenario.name, cycle)
            sim.trace.record(EventKind.ATTACK_STARTED, sim.sub_cycle, actor=self.name, port=self.target,
                             kind=self.scenario.kind.value,
                             prerequisites=sorted(p.value for p in PREREQUISITES[self.scenario.kind]))
            self.started(sim)
        if self.running and cycle >= self.stop_cycle(sim):
            self.state = ActorState.STOPPED
            logger.info("attack %s stopped at cycle %d", self.scenario.name, cycle)
            sim.trace.record(EventKind.ATTACK_STOPPED, sim.sub_cycle, actor=self.name, port=self.target,
                             kind=self.scenario.kind.value)

    def started(self, sim: Simulation) -> None:
        pass

    # ---------------------------------------------------------------- hooks

    def bursts(self, sim: Simulation, sub_cycle: int, leg: Direction) -> list[Burst]:
        return []

    def jammed_channels(self, sim: Simulation, sub_cycle: int) -> frozenset[int]:
        return frozenset()

    def device_override(self, sim: Simulation, port: PortId, sub_cycle: int) -> Optional[DeviceOverride]:
        return None

    def device_received(self, sim: Simulation, port: PortId, plaintext: bytes) -> None:
        pass

    def observe(self, sim: Simulation, burst: Burst, outcome: DeliveryOutcome) -> None:
        if not self.sniffs or not self.scenario.physical.proximity:
            return
        if self.state not in (ActorState.ARMED, ActorState.RUNNING) or not burst.legitimate:
            return
        if outcome.outcome in (Outcome.COLLIDED, Outcome.JAMMED):
            return
        on_data_channel = burst.channel not in CONFIG_CHANNELS
        if on_data_channel and (burst.port is None or not self.knows_table(sim, burst.port.track)):
            return
        device = sim.device(burst.port) if burst.port is not None else None
        for item in self.knowledge.learn(burst.port, burst.channel, burst.frame, device):
            sim.trace.record(EventKind.KNOWLEDGE, burst.sub_cycle, **{"actor": self.name, "port": burst.port or "", **item})
        if on_data_channel:
            self.capture(sim, burst)

    def capture(self, sim: Simulation, burst: Burst) -> None:
        pass

    # -------------------------------------------------------------- helpers

    def target_grant(self, sim: Simulation) -> Optional[TransmissionGrant]:
        """Grant of the target port in the current sub-cycle, if the port is being polled."""
        if not self.knows_table(sim, self.target.track):
            return None
        k = sim.clock.sub_cycle_index
        for grant in sim.grants_now(self.target.track):
            if grant.sub_cycle_index == k and grant.slot_id == self.target.slot_id:
                return grant
        return None

    def junk(self, octets: int) -> bytes:
        return self.rng.bytes(octets)

    def collide_poll(self, sim: Simulation, grant: TransmissionGrant, device: DeviceConfig) -> Burst:
        """Noise on the target's downlink position so the genuine device never answers."""
        return sim.make_burst(grant.channel_index, grant.slot_id, Direction.DOWNLINK, self.junk(16), self.name,
                              device.slot_kind, self.target)

    def falsified_payload(self, device: DeviceConfig) -> bytes:
        octets = device.process_data_octets
        chosen = bytes.fromhex(self.scenario.payload) if self.scenario.payload else b"\xff" * octets
        return (chosen + bytes(octets))[:octets]

    def record_knowledge(self, sim: Simulation, **item) -> None:
        sim.trace.record(EventKind.KNOWLEDGE, sim.sub_cycle, actor=self.name, port=self.target, **item)


class FloodingActor(AttackActor):
    """Junk pairing requests on the uplink configuration channel while the master is in pairing mode.

    The master processes configuration frames before cyclic data, so ``intensity``
    above its receive capacity displaces the genuine uplink frames. With a known
    hopping table the flooder also raises the burst rate on the data channel.
    """

    sniffs = True

    def bursts(self, sim: Simulation, sub_cycle: int, leg: Direction) -> list[Burst]:
        if not self.running or leg is not Direction.UPLINK:
            return []
        intensity = self.scenario.schedule.intensity
        bursts = []
        for position in range(intensity):
            request = bytes([MSG_PAIRING_REQUEST]) + self.junk(8) + bytes([1])
            frame = with_checksum(config_frame(Direction.UPLINK, request))
            bursts.append(sim.make_burst(UPLINK_CONFIG_CHANNEL, position, Direction.UPLINK, frame, self.name,
                                         FrameKind.CONFIG))
        if self.knows_table(sim, self.target.track):
            channel = current_channel(sim, self.target.track)
            for position in range(intensity):
                bursts.append(sim.make_burst(channel, MAX_SLOTS + position, Direction.UPLINK, self.junk(16),
                                             self.name, FrameKind.DSLOT))
        return bursts


class JammingActor(AttackActor):
    """Carrier on the configured channels (all 80 when none are given)."""

    def jammed_channels(self, sim: Simulation, sub_cycle: int) -> frozenset[int]:
        return self.scenario.jammed_channels() if self.running else frozenset()


class ReplayActor(AttackActor):
    """Captures the target's uplink frames, then suppresses the poll and sends a captured frame instead."""

    sniffs = True

    def __init__(self, scenario: AttackScenario, sim: Simulation):
        super().__init__(scenario, sim)
        self._next = 0

    def capture(self, sim: Simulation, burst: Burst) -> None:
        if burst.port != self.target or burst.leg is not Direction.UPLINK or burst.kind is FrameKind.CONFIG:
            return
        if not self.captured:
            self.record_knowledge(sim, what="sniffed_frame", counter_known=False)
        self.captured.append(burst.frame)

    def bursts(self, sim: Simulation, sub_cycle: int, leg: Direction) -> list[Burst]:
        if not self.running or not self.captured:
            return []
        grant = self.target_grant(sim)
        device = sim.device(self.target)
        if grant is None or device is None:
            return []
        if leg is Direction.DOWNLINK:
            return [self.collide_poll(sim, grant, device)]
        frame = self.captured[self._next % len(self.captured)]
        self._next += 1
        return [sim.make_burst(grant.channel_index, grant.slot_id, Direction.UPLINK, frame, self.name,
                               device.slot_kind, self.target)]


class ForgeryActor(AttackActor):
    """Random ciphertext and tag under the next fresh counter; no key."""

    sniffs = True

    def forged_frame(self, sim: Simulation, device: DeviceConfig, control: ControlOctet) -> Optional[bytes]:
        if not device.secured:
            frame = Frame(device.slot_kind, control, self.falsified_payload(device))
            return with_checksum(encode_frame(frame))
        links = sim.pairing.links.get(self.target)
        if links is None or links.master.state is LinkState.FAIL_STATE:
            return None
        counter = links.master.rx_highwater + 1
        ciphertext = self.junk(device.process_data_octets)
        tag = self.junk(device.tag_bits // 8)
        return with_checksum(encode_frame(Frame(device.slot_kind, control, ciphertext, counter, tag)))

    def bursts(self, sim: Simulation, sub_cycle: int, leg: Direction) -> list[Burst]:
        if not self.running:
            return []
        grant = self.target_grant(sim)
        device = sim.device(self.target)
        if grant is None or device is None:
            return []
        if leg is Direction.DOWNLINK:
            return [self.collide_poll(sim, grant, device)]
        control = ControlOctet(direction=Direction.UPLINK, retry=grant.sub_cycle_index)
        frame = self.forged_frame(sim, device, control)
        if frame is None:
            return []
        return [sim.make_burst(grant.channel_index, grant.slot_id, Direction.UPLINK, frame, self.name,
                               device.slot_kind, self.target)]


class LeakedKeyActor(ForgeryActor):
    """Seals chosen payloads with a copy of the leaked link key."""

    def __init__(self, scenario: AttackScenario, sim: Simulation):
        super().__init__(scenario, sim)
        self.clone: Optional[SecureLink] = None

    def started(self, sim: Simulation) -> None:
        links = sim.pairing.links.get(self.target)
        if links is None:
            return
        master = links.master
        self.clone = SecureLink(master.master_id, master.device_uid, master.key, master.tag_bits,
                                tx_leg=master.rx_leg, tx_counter=master.rx_highwater)
        self.record_knowledge(sim, what="link_key", tag_bits=master.tag_bits)

    def forged_frame(self, sim: Simulation, device: DeviceConfig, control: ControlOctet) -> Optional[bytes]:
        if self.clone is None:
            return super().forged_frame(sim, device, control)
        links = sim.pairing.links.get(self.target)
        if links is not None:
            self.clone.tx_counter = max(self.clone.tx_counter, links.master.rx_highwater)
        sealed = self.clone.seal(bytes([control.to_byte()]), self.falsified_payload(device))
        frame = Frame(device.slot_kind, control, sealed.ciphertext, sealed.counter, sealed.tag)
        return with_checksum(encode_frame(frame))


class CompromisedDeviceActor(AttackActor):
    """Owns the genuine device: falsifies its answers and leaks what it receives, then goes silent."""

    def __init__(self, scenario: AttackScenario, sim: Simulation):
        super().__init__(scenario, sim)
        self.exfiltrated = 0

    def silent_from(self, sim: Simulation) -> int:
        start = self.scenario.schedule.start_cycle
        return start + max(1, (self.stop_cycle(sim) - start) // 2)

    def device_override(self, sim: Simulation, port: PortId, sub_cycle: int) -> Optional[DeviceOverride]:
        if not self.running or port != self.target:
            return None
        if sim.cycle >= self.silent_from(sim):
            return DeviceOverride(origin=self.name, silent=True)
        device = sim.device(port)
        return DeviceOverride(origin=self.name, payload=self.falsified_payload(device))

    def device_received(self, sim: Simulation, port: PortId, plaintext: bytes) -> None:
        if not self.running or port != self.target:
            return
        if self.exfiltrated == 0:
            self.record_knowledge(sim, what="payload_plaintext", octets=len(plaintext))
        self.exfiltrated += 1


ACTORS: dict[AttackKind, type[AttackActor]] = {
    AttackKind.FLOODING: FloodingActor,
    AttackKind.JAMMING: JammingActor,
    AttackKind.REPLAY: ReplayActor,
    AttackKind.FORGERY: ForgeryActor,
    AttackKind.FORGERY_LEAKED_KEY: LeakedKeyActor,
    AttackKind.COMPROMISED_DEVICE: CompromisedDeviceActor,
}


def arm(scenario: AttackScenario, sim: Simulation) -> AttackActor:
    """Attach an attacker to a simulation that has not run yet."""
    try:
        sim.cell.port(scenario.port)
    except KeyError as exc:
        raise InvalidScenario(f"attack {scenario.name}: no port {scenario.target} in the cell") from exc
    if any(getattr(actor, "name", None) == scenario.origin for actor in sim.actors):
        raise InvalidScenario(f"attack {scenario.name} is armed twice")
    actor = ACTORS[scenario.kind](scenario, sim)
    sim.add_actor(actor)
    logger.debug("armed %s against %s", scenario.kind.value, scenario.target)
    return actor


def run_attack(scenario: AttackScenario, sim: Simulation) -> AttackOutcome:
    """Arm one attack, run the simulation to its horizon and classify the trace.

    Raises:
        PrerequisiteUnmet: the attack refused to start; the refusal is in ``sim.trace``.
    """
    from iolwsim.analysis import classify_trace

    arm(scenario, sim)
    trace = sim.run()
    for outcome in classify_trace(trace):
        if outcome.attack != scenario.name:
            continue
        if outcome.refused:
            raise PrerequisiteUnmet(f"attack {scenario.name} refused: missing {', '.join(outcome.missing)}",
                                    tuple(outcome.missing))
        return outcome
    raise PrerequisiteUnmet(f"attack {scenario.name} never reached its start cycle")


# =============================================================================
# Stand-alone forgery against one link
# =============================================================================


@dataclass_json
@dataclass
class ForgeryStatistics:
    attempts: int
    accepted: int
    auth_failures: int
    replays_rejected: int
    locked_out: bool
    tag_bits: int
    with_key: bool

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0


def forge_frames(
    scenario: AttackScenario,
    link: SecureLink,
    attempts: int,
    *,
    rng: Optional[np.random.Generator] = None,
    payload_octets: Optional[int] = None,
) -> ForgeryStatistics:
    """Throw forged uplink frames at the receiving endpoint ``link``.

    Without the key every frame carries a random tag under the next fresh counter;
    the run ends early once the link locks out. With a leaked key the frames are
    sealed properly and should all be accepted.
    """
    with_key = scenario.kind is AttackKind.FORGERY_LEAKED_KEY
    required = [Prerequisite.HOPPING_TABLE, Prerequisite.COUNTER_VALUE]
    if with_key:
        required.append(Prerequisite.LEAKED_KEY)
    flags = scenario.knowledge
    missing = tuple(p.value for p in required if not getattr(flags, p.value))
    if missing:
        raise PrerequisiteUnmet(f"forgery needs {', '.join(missing)}", missing)
    rng = rng or np.random.default_rng(0)
    payload_octets = link.payload_capacity if payload_octets is None else payload_octets
    header = bytes([ControlOctet(direction=link.rx_leg).to_byte()])
    clone = None
    if with_key:
        clone = SecureLink(link.master_id, link.device_uid, link.key, link.tag_bits, tx_leg=link.rx_leg,
                           tx_counter=link.rx_highwater)

    made = accepted = failures = replays = 0
    for _ in range(attempts):
        if link.state is LinkState.FAIL_STATE:
            break
        made += 1
        if clone is not None:
            clone.tx_counter = max(clone.tx_counter, link.rx_highwater)
            counter, ciphertext, tag = clone.seal(header, rng.bytes(payload_octets))
        else:
            counter, ciphertext, tag = link.rx_highwater + 1, rng.bytes(payload_octets), rng.bytes(link.tag_octets)
        try:
            link.open(counter, header, ciphertext, tag)
            accepted += 1
        except AuthFailure:
            failures += 1
        except ReplayRejected:
            replays += 1
    return ForgeryStatistics(
        attempts=made,
        accepted=accepted,
        auth_failures=failures,
        replays_rejected=replays,
        locked_out=link.state is LinkState.FAIL_STATE,
        tag_bits=link.tag_bits,
        with_key=with_key,
    )


def attack_window(trace: SimTrace, name: str) -> Optional[tuple[int, int]]:
    """Sub-cycle span [start, stop) of an attack that ran, or None."""
    origin = name if name.startswith(ATTACKER_PREFIX) else f"{ATTACKER_PREFIX}{name}"
    start = stop = None
    for event in trace.events:
        if event.actor != origin:
            continue
        if event.kind is EventKind.ATTACK_STARTED:
            start = event.sub_cycle
        elif event.kind is EventKind.ATTACK_STOPPED:
            stop = event.sub_cycle
    if start is None:
        return None
    return start, stop if stop is not None else trace.horizon_cycles * trace.sub_cycles_per_cycle
