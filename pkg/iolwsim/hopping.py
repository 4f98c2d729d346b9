"""
Frequency hopping: channel numbering, blocklists and per-track hopping tables.

Channels are numbered 1..80 with carrier f_n = 2400 MHz + n MHz. f1 and f80 carry
configuration traffic, f2 and f78 are guard channels and f79 is left out of the
default table, so cyclic data hops over {3..77}.
"""

import logging
from collections.abc import Iterable
from dataclasses import dataclass, field
from math import gcd

import numpy as np

from iolwsim.errors import ChannelOutOfRange, TooFewChannels

logger = logging.getLogger(__name__)

BASE_FREQUENCY_MHZ = 2400
CHANNEL_COUNT = 80
CONFIG_CHANNELS = (1, 80)
GUARD_CHANNELS = (2, 78)
RESERVED_CHANNELS = frozenset({1, 2, 78, 79, 80})
MIN_USABLE_CHANNELS = 8
DEFAULT_MIN_HOP_DISTANCE_MHZ = 24
MAX_RESTARTS = 64


def carrier_frequency(n: int) -> int:
    """Carrier frequency in MHz of channel n."""
    if not 1 <= n <= CHANNEL_COUNT:
        raise ChannelOutOfRange(f"channel {n} outside 1..{CHANNEL_COUNT}")
    return BASE_FREQUENCY_MHZ + n


def parse_blocklist(items: Iterable[int | str]) -> frozenset[int]:
    """Expand a blocklist of channel numbers and inclusive "a-b" ranges."""
    blocked: set[int] = set()
    for item in items:
        if isinstance(item, str):
            low, sep, high = item.partition("-")
            try:
                first = int(low)
                last = int(high) if sep else first
            except ValueError as exc:
                raise ChannelOutOfRange(f"cannot read blocklist entry {item!r}") from exc
            if first > last:
                raise ChannelOutOfRange(f"empty blocklist range {item!r}")
            members = range(first, last + 1)
        else:
            members = range(int(item), int(item) + 1)
        for n in members:
            if not 1 <= n <= CHANNEL_COUNT:
                raise ChannelOutOfRange(f"blocklisted channel {n} outside 1..{CHANNEL_COUNT}")
            blocked.add(n)
    return frozenset(blocked)


def usable_channels(blocklist: Iterable[int] = ()) -> tuple[int, ...]:
    """Channels available to cyclic data after reserved and blocklisted ones are removed."""
    blocked = set(blocklist) | RESERVED_CHANNELS
    return tuple(n for n in range(1, CHANNEL_COUNT + 1) if n not in blocked)


@dataclass(frozen=True)
class HoppingTable:
    """Ordered channel sequence of one track."""

    sequence: tuple[int, ...]
    seed: int
    min_hop_distance_mhz: int = DEFAULT_MIN_HOP_DISTANCE_MHZ
    generation: int = 0
    blocklist: frozenset[int] = field(default_factory=frozenset)
    salt: int = 0

    def __len__(self) -> int:
        return len(self.sequence)

    @property
    def channels(self) -> frozenset[int]:
        return frozenset(self.sequence)

    def min_hop(self) -> int:
        """Smallest carrier distance between cyclically consecutive entries."""
        return min(abs(a - b) for a, b in zip(self.sequence, self.sequence[1:] + self.sequence[:1]))

    def to_bytes(self) -> bytes:
        """Wire image used when a table is distributed: generation octet followed by the channels."""
        return bytes([self.generation & 0xFF]) + bytes(self.sequence)


def next_channel(table: HoppingTable, sub_cycle_counter: int) -> int:
    return table.sequence[sub_cycle_counter % len(table.sequence)]


def _table_rng(master_id: int, generation: int, salt: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng([(master_id ^ generation) & 0xFFFFFFFF, salt & 0xFFFFFFFF, attempt])


def _repair_walk(order: np.ndarray, min_hop: int) -> tuple[int, ...] | None:
    """Turn a shuffled channel order into a closed walk that respects the hop distance.

    Starts at the first channel of the order and always continues with the allowed
    channel that has the fewest allowed onward neighbours left; ties go to the
    channel that comes first in the shuffled order. Returns None on a dead end.
    """
    m = len(order)
    adjacent = np.abs(order[:, None] - order[None, :]) >= min_hop
    remaining = np.ones(m, dtype=bool)
    current = 0
    remaining[current] = False
    path = [current]
    for _ in range(m - 1):
        candidates = np.flatnonzero(adjacent[current] & remaining)
        if candidates.size == 0:
            return None
        onward = adjacent[candidates][:, remaining].sum(axis=1)
        current = int(candidates[np.argmin(onward)])
        remaining[current] = False
        path.append(current)
    if not adjacent[current, 0]:
        return None
    return tuple(int(order[i]) for i in path)


def _stride_lattice(channels: tuple[int, ...], min_hop: int, rng: np.random.Generator) -> tuple[int, ...] | None:
    """Visit the channels with a fixed index stride; used when the walk keeps failing."""
    m = len(channels)
    strides = []
    for stride in range(1, m):
        if gcd(stride, m) != 1:
            continue
        if all(abs(channels[(i * stride) % m] - channels[((i + 1) * stride) % m]) >= min_hop for i in range(m)):
            strides.append(stride)
    if not strides:
        return None
    stride = strides[int(rng.integers(len(strides)))]
    start = int(rng.integers(m))
    return tuple(channels[(start + i * stride) % m] for i in range(m))


def generate_table(
    master_id: int,
    blocklist: Iterable[int] = (),
    min_hop_distance_mhz: int = DEFAULT_MIN_HOP_DISTANCE_MHZ,
    *,
    generation: int = 0,
    salt: int = 0,
) -> HoppingTable:
    """Build the hopping table of a track.

    The sequence is a pure function of (master_id, blocklist, min_hop_distance_mhz,
    generation, salt). ``salt`` carries the track's configured hopping seed.

    Raises:
        TooFewChannels: fewer than eight usable channels, or no ordering can honour
            the hop distance.
    """
    blocked = frozenset(blocklist)
    channels = usable_channels(blocked)
    if len(channels) < MIN_USABLE_CHANNELS:
        raise TooFewChannels(f"{len(channels)} usable channels left, at least {MIN_USABLE_CHANNELS} required")
    if min_hop_distance_mhz < 1:
        raise TooFewChannels("min_hop_distance_mhz must be at least 1")

    def build(sequence: tuple[int, ...]) -> HoppingTable:
        return HoppingTable(
            sequence=sequence,
            seed=master_id,
            min_hop_distance_mhz=min_hop_distance_mhz,
            generation=generation,
            blocklist=blocked,
            salt=salt,
        )

    for attempt in range(MAX_RESTARTS):
        rng = _table_rng(master_id, generation, salt, attempt)
        order = rng.permutation(np.asarray(channels, dtype=np.int64))
        sequence = _repair_walk(order, min_hop_distance_mhz)
        if sequence is not None:
            return build(sequence)

    sequence = _stride_lattice(channels, min_hop_distance_mhz, _table_rng(master_id, generation, salt, MAX_RESTARTS))
    if sequence is None:
        raise TooFewChannels(
            f"no ordering of {len(channels)} channels keeps consecutive hops {min_hop_distance_mhz} MHz apart"
        )
    logger.debug("master %s: hopping table built by stride lattice", master_id)
    return build(sequence)


def adaptive_switch(table: HoppingTable, new_blocklist: Iterable[int]) -> HoppingTable:
    """Next-generation table for the same track; the caller activates it at a cycle boundary."""
    switched = generate_table(
        table.seed,
        new_blocklist,
        table.min_hop_distance_mhz,
        generation=table.generation + 1,
        salt=table.salt,
    )
    logger.info("master %s: hopping table generation %d ready", table.seed, switched.generation)
    return switched

