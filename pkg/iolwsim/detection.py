"""
Detection: a passive sniffer node that watches channel activity for flooding and
jamming, and the master-side anomaly check that mirrors the lockout rule and
reports replays.

The sniffer only consumes observations handed to it by the simulation loop; it
never transmits and draws no random numbers.
"""

import logging
from collections import Counter, deque
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from dataclasses_json import Undefined, dataclass_json

from iolwsim.secure_channel import LOCKOUT_THRESHOLD

logger = logging.getLogger(__name__)


class AlertKind(Enum):
    FLOODING = "FloodingAlert"
    JAMMING = "JammingAlert"
    REPLAY = "ReplayAlert"
    FAIL_STATE_COMMAND = "FailStateCommand"


@dataclass(frozen=True)
class Alert:
    kind: AlertKind
    sub_cycle: int
    channels: tuple[int, ...] = ()
    port: str = ""
    detail: str = ""


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class DetectionConfig:
    enabled: bool = True
    flood_factor: float = 3.0
    window_sub_cycles: int = 30
    jam_window_sub_cycles: int = 9
    table_aware: bool = True

    def __post_init__(self):
        if self.flood_factor <= 1.0:
            raise ValueError("flood_factor must exceed 1")
        if self.window_sub_cycles < 1 or self.jam_window_sub_cycles < 1:
            raise ValueError("detection windows must be at least one sub-cycle")


@dataclass(frozen=True)
class BurstObservation:
    """What the sniffer antenna sees of one burst."""
    sub_cycle: int
    channel: int
    decodable: bool


class Sniffer:
    """Sliding-window rate estimator per channel plus a jamming detector.

    Flooding: over the current sub-cycle and the ``window_sub_cycles - 1`` before
    it, the observed burst count on a channel exceeds ``flood_factor`` times the
    schedule-implied count (at least one). The check runs on every observation, so
    the alert comes with the burst that crosses the line. The table-ignorant
    variant does the same on the sum over all channels, since it cannot tell which
    channel a legitimate burst should use.

    Jamming: a channel carries energy without a single decodable frame for
    ``jam_window_sub_cycles`` consecutive sub-cycles.
    """

    def __init__(self, config: Optional[DetectionConfig] = None):
        self.config = config or DetectionConfig()
        self._window: deque[tuple[Counter, Counter]] = deque(maxlen=self.config.window_sub_cycles - 1)
        self._planned: Counter = Counter()
        self._observed: Counter = Counter()
        self._decodable: Counter = Counter()
        self._energy: set[int] = set()
        self._quiet_runs: dict[int, int] = {}
        self._flooding: set[int] = set()
        self._jammed: set[int] = set()
        self.alerts: list[Alert] = []

    def begin_sub_cycle(self, expected: Mapping[int, int]) -> None:
        """Schedule-implied burst count per channel for the sub-cycle about to be observed."""
        self._planned = Counter(expected)

    def ingest(self, observation: BurstObservation) -> Optional[Alert]:
        """Count one burst; returns the flooding alert it triggered, if any."""
        self._observed[observation.channel] += 1
        self._energy.add(observation.channel)
        if observation.decodable:
            self._decodable[observation.channel] += 1
        fresh = sorted(self._over_schedule() - self._flooding)
        self._flooding.update(fresh)
        raised = self._flooding_alerts(observation.sub_cycle, fresh)
        self._raise(raised, observation.sub_cycle)
        return raised[0] if raised else None

    def ingest_energy(self, channel: int) -> None:
        """Carrier energy without any frame (a jammer)."""
        self._energy.add(channel)

    def end_sub_cycle(self, sub_cycle: int) -> list[Alert]:
        """Close the current sub-cycle and return the alerts raised at its end."""
        over = self._over_schedule()
        fresh = sorted(over - self._flooding)
        self._flooding = over
        raised = self._flooding_alerts(sub_cycle, fresh) + self._check_jamming(sub_cycle, self._energy)
        self._window.append((self._observed, self._planned))
        self._planned = Counter()
        self._observed = Counter()
        self._decodable = Counter()
        self._energy = set()
        self._raise(raised, sub_cycle)
        return raised

    def _raise(self, raised: list[Alert], sub_cycle: int) -> None:
        self.alerts.extend(raised)
        for alert in raised:
            logger.info("sniffer: %s on channels %s at sub-cycle %d", alert.kind.value, alert.channels, sub_cycle)

    def _over_schedule(self) -> set[int]:
        observed, expected = Counter(self._observed), Counter(self._planned)
        for seen, planned in self._window:
            observed.update(seen)
            expected.update(planned)
        factor = self.config.flood_factor
        if not self.config.table_aware:
            total_seen, total_planned = sum(observed.values()), sum(expected.values())
            return {0} if total_seen > factor * max(total_planned, 1) else set()
        return {ch for ch, count in observed.items() if count > factor * max(expected[ch], 1)}

    def _flooding_alerts(self, sub_cycle: int, fresh: list[int]) -> list[Alert]:
        if not fresh:
            return []
        channels = () if not self.config.table_aware else tuple(fresh)
        return [Alert(AlertKind.FLOODING, sub_cycle, channels, detail="burst rate above schedule")]

    def _check_jamming(self, sub_cycle: int, energy: set[int]) -> list[Alert]:
        for channel in list(self._quiet_runs):
            if channel not in energy:
                del self._quiet_runs[channel]
                self._jammed.discard(channel)
        fresh = []
        for channel in sorted(energy):
            if self._decodable[channel]:
                self._quiet_runs.pop(channel, None)
                self._jammed.discard(channel)
                continue
            self._quiet_runs[channel] = self._quiet_runs.get(channel, 0) + 1
            if self._quiet_runs[channel] >= self.config.jam_window_sub_cycles and channel not in self._jammed:
                self._jammed.add(channel)
                fresh.append(channel)
        if not fresh:
            return []
        return [Alert(AlertKind.JAMMING, sub_cycle, tuple(fresh), detail="energy without decodable frames")]


def sniffer_ingest(sniffer: Sniffer, observation: BurstObservation) -> Optional[Alert]:
    """Feed one burst to the sniffer; returns the flooding alert it raised, if any."""
    return sniffer.ingest(observation)


@dataclass
class PortStatistics:
    accepted: int = 0
    auth_failures: int = 0
    replays: int = 0
    consecutive_auth_failures: int = 0
    fail_state_commands: int = 0


@dataclass
class MasterAnomalyMonitor:
    """Per-port counters on the master; issues FailStateCommand and ReplayAlert."""
    threshold: int = LOCKOUT_THRESHOLD
    ports: dict[str, PortStatistics] = field(default_factory=dict)

    def _stats(self, port: str) -> PortStatistics:
        return self.ports.setdefault(port, PortStatistics())

    def accepted(self, port: str) -> None:
        stats = self._stats(port)
        stats.accepted += 1
        stats.consecutive_auth_failures = 0

    def auth_failure(self, port: str, sub_cycle: int) -> Optional[Alert]:
        stats = self._stats(port)
        stats.auth_failures += 1
        stats.consecutive_auth_failures += 1
        if stats.consecutive_auth_failures == self.threshold:
            stats.fail_state_commands += 1
            return Alert(AlertKind.FAIL_STATE_COMMAND, sub_cycle, port=port,
                         detail=f"{self.threshold} consecutive authentication failures")
        return None

    def replay(self, port: str, sub_cycle: int) -> Alert:
        self._stats(port).replays += 1
        return Alert(AlertKind.REPLAY, sub_cycle, port=port, detail="counter not fresh")

    def reset(self, port: str) -> None:
        self._stats(port).consecutive_auth_failures = 0


def master_anomaly_check(monitor: MasterAnomalyMonitor, link_event: str, port: str, sub_cycle: int) -> Optional[Alert]:
    """Feed one link event ("accepted", "auth_failure" or "replay_rejected") to the monitor."""
    if link_event == "accepted":
        monitor.accepted(port)
        return None
    if link_event == "auth_failure":
        return monitor.auth_failure(port, sub_cycle)
    if link_event == "replay_rejected":
        return monitor.replay(port, sub_cycle)
    raise ValueError(f"unknown link event {link_event!r}")
