"""
Secured link layer: AES-128-CCM with truncated tags, counter-based replay
protection, the lockout that puts a port into FailState, and the closed-form
attacker-advantage calculator.

Nonce (13 octets, big endian):

    leg flag (1) | master_id (4) | device_uid low 32 bits (4) | counter (4)

The leg flag is 0x00 for downlink and 0x01 for uplink, so both directions of a
link can share one key without ever reusing a nonce.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from math import ceil
from typing import NamedTuple, Optional

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESCCM
from cryptography.hazmat.primitives.constant_time import bytes_eq
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from iolwsim.errors import (
    AuthFailure,
    CounterExhausted,
    InvalidParams,
    LinkInFailState,
    NotInFailState,
    ReplayRejected,
    WeakSecret,
)
from iolwsim.protocol import DEFAULT_TAG_BITS, SUPPORTED_TAG_BITS, Direction, FrameKind, SecurityMode, payload_capacity

logger = logging.getLogger(__name__)

KEY_OCTETS = 16
MIN_SECRET_OCTETS = 16
NONCE_OCTETS = 13
COUNTER_MAX = 2**32 - 1
LOCKOUT_THRESHOLD = 3
AES_BLOCK_BITS = 128
KDF_SALT = b"iolwsim link key v1"

PER_ATTEMPT_LIMIT = 1e-6
PER_MINUTE_LIMIT = 1e-5


class LinkState(Enum):
    ACTIVE = "Active"
    FAIL_STATE = "FailState"


class SealedPayload(NamedTuple):
    counter: int
    ciphertext: bytes
    tag: bytes


def _ccm_tag_octets(tag_bits: int) -> int:
    # CCM tags are at least 4 octets; shorter tags are truncations of the 4-octet one
    return max(4, tag_bits // 8)


def build_nonce(leg: Direction, master_id: int, device_uid: int, counter: int) -> bytes:
    flag = 0x01 if leg is Direction.UPLINK else 0x00
    return (
        bytes([flag])
        + master_id.to_bytes(4, "big")
        + (device_uid & 0xFFFFFFFF).to_bytes(4, "big")
        + counter.to_bytes(4, "big")
    )


def _ccm_keystream_decrypt(key: bytes, nonce: bytes, ciphertext: bytes) -> bytes:
    # CCM payload blocks use counter blocks A_1, A_2, ... with flags L-1 = 1 (L = 15 - 13)
    initial = bytes([0x01]) + nonce + (1).to_bytes(2, "big")
    decryptor = Cipher(algorithms.AES(key), modes.CTR(initial)).decryptor()
    return decryptor.update(ciphertext) + decryptor.finalize()


@dataclass
class SecureLink:
    """One endpoint of a master/device link.

    The master endpoint seals downlink frames and opens uplink frames; the device
    endpoint does the opposite. Both derive the same key. Only the master endpoint
    locks out; the device drops a frame that fails authentication and keeps listening.
    """
    master_id: int
    device_uid: int
    key: bytes = field(repr=False)
    tag_bits: int = DEFAULT_TAG_BITS
    tx_leg: Direction = Direction.DOWNLINK
    tx_counter: int = 0
    rx_highwater: int = 0
    consecutive_auth_failures: int = 0
    state: LinkState = LinkState.ACTIVE

    @property
    def rx_leg(self) -> Direction:
        return Direction.UPLINK if self.tx_leg is Direction.DOWNLINK else Direction.DOWNLINK

    @property
    def tag_octets(self) -> int:
        return self.tag_bits // 8

    @property
    def enforces_lockout(self) -> bool:
        return self.tx_leg is Direction.DOWNLINK

    @property
    def payload_capacity(self) -> int:
        """Plaintext octets a secured DSlot carries with this tag length."""
        return payload_capacity(FrameKind.DSLOT, SecurityMode.SECURED, self.tag_bits)

    def _aead(self) -> AESCCM:
        return AESCCM(self.key, tag_length=_ccm_tag_octets(self.tag_bits))

    def seal(self, header_bytes: bytes, payload: bytes, *, capacity: Optional[int] = None) -> SealedPayload:
        """Encrypt and authenticate one payload under the next counter value.

        ``capacity`` defaults to what a secured DSlot carries; configuration
        messages pass their own limit.
        """
        limit = self.payload_capacity if capacity is None else capacity
        if len(payload) > limit:
            raise InvalidParams(f"payload of {len(payload)} octets, at most {limit} fit")
        if self.state is LinkState.FAIL_STATE:
            raise LinkInFailState(f"link {self.master_id}/{self.device_uid} is in FailState")
        if self.tx_counter >= COUNTER_MAX:
            raise CounterExhausted(f"link {self.master_id}/{self.device_uid} transmit counter exhausted")
        self.tx_counter += 1
        counter = self.tx_counter
        nonce = build_nonce(self.tx_leg, self.master_id, self.device_uid, counter)
        sealed = self._aead().encrypt(nonce, payload, header_bytes)
        ciphertext, full_tag = sealed[: len(payload)], sealed[len(payload) :]
        return SealedPayload(counter, ciphertext, full_tag[: self.tag_octets])

    def open(self, counter: int, header_bytes: bytes, ciphertext: bytes, tag: bytes) -> bytes:
        """Verify and decrypt a received frame.

        Raises:
            LinkInFailState: the link is locked out.
            AuthFailure: tag mismatch; on the master endpoint the third one in a row locks the link.
            ReplayRejected: valid tag but the counter is not fresh.
        """
        if self.state is LinkState.FAIL_STATE:
            raise LinkInFailState(f"link {self.master_id}/{self.device_uid} is in FailState")
        if not 0 <= counter <= COUNTER_MAX:
            self._record_auth_failure()
        nonce = build_nonce(self.rx_leg, self.master_id, self.device_uid, counter)
        plaintext = _ccm_keystream_decrypt(self.key, nonce, ciphertext)
        expected = self._aead().encrypt(nonce, plaintext, header_bytes)[len(plaintext) :][: self.tag_octets]
        if len(tag) != self.tag_octets or not bytes_eq(expected, bytes(tag)):
            self._record_auth_failure()
        if counter <= self.rx_highwater:
            raise ReplayRejected(f"counter {counter} not above {self.rx_highwater}")
        self.rx_highwater = counter
        self.consecutive_auth_failures = 0
        return plaintext

    def _record_auth_failure(self):
        self.consecutive_auth_failures += 1
        locked = self.enforces_lockout and self.consecutive_auth_failures >= LOCKOUT_THRESHOLD
        if locked:
            self.state = LinkState.FAIL_STATE
            logger.info("link %s/%s entered FailState", self.master_id, self.device_uid)
        raise AuthFailure(locked_out=locked)


def derive_key(shared_secret: bytes, master_id: int, device_uid: int) -> bytes:
    info = master_id.to_bytes(4, "big") + device_uid.to_bytes(8, "big")
    return HKDF(algorithm=hashes.SHA256(), length=KEY_OCTETS, salt=KDF_SALT, info=info).derive(shared_secret)


def establish_link(
    shared_secret: bytes,
    master_id: int,
    device_uid: int,
    tag_bits: int = DEFAULT_TAG_BITS,
    *,
    tx_leg: Direction = Direction.DOWNLINK,
) -> SecureLink:
    """Derive the session key with HKDF-SHA256 and return a fresh Active endpoint."""
    if len(shared_secret) < MIN_SECRET_OCTETS:
        raise WeakSecret(f"shared secret of {len(shared_secret)} octets; at least {MIN_SECRET_OCTETS} required")
    if tag_bits not in SUPPORTED_TAG_BITS:
        raise InvalidParams(f"tag_bits must be one of {SUPPORTED_TAG_BITS}")
    return SecureLink(
        master_id=master_id,
        device_uid=device_uid,
        key=derive_key(shared_secret, master_id, device_uid),
        tag_bits=tag_bits,
        tx_leg=tx_leg,
    )


def reconfigure(link: SecureLink, shared_secret: bytes) -> SecureLink:
    """Replace a locked-out endpoint by one keyed from a freshly paired secret."""
    if link.state is not LinkState.FAIL_STATE:
        raise NotInFailState(f"link {link.master_id}/{link.device_uid} is {link.state.value}")
    return establish_link(shared_secret, link.master_id, link.device_uid, link.tag_bits, tx_leg=link.tx_leg)


# =============================================================================
# Attacker advantage
# =============================================================================


@dataclass(frozen=True)
class AdvantageParams:
    tag_bits: int = DEFAULT_TAG_BITS
    sigma: int = 1
    block_bits: int = AES_BLOCK_BITS
    q_dec: int = 3

    def __post_init__(self):
        for name in ("tag_bits", "sigma", "block_bits", "q_dec"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise InvalidParams(f"{name} must be a positive integer, got {value!r}")
        if self.tag_bits > self.block_bits:
            raise InvalidParams("tag_bits cannot exceed block_bits")


def advantage_exact(p: AdvantageParams) -> Fraction:
    return Fraction(p.q_dec, 2**p.tag_bits) + Fraction(p.sigma**2, 2**p.block_bits)


def advantage_bound(p: AdvantageParams) -> float:
    """q_dec / 2^tau + sigma^2 / 2^n, evaluated exactly before rounding to float."""
    return float(advantage_exact(p))


@dataclass(frozen=True)
class FipsVerdict:
    per_attempt_ok: bool
    per_minute_ok: bool
    per_attempt: float
    per_minute_locked: float
    per_minute_unlocked: float
    queries_per_minute_unlocked: int


def fips_check(p: AdvantageParams, cycles_per_minute: int = 12_000, queries_per_cycle: int = 3) -> FipsVerdict:
    """Check the bound against the per-attempt and per-minute random-attempt limits.

    With lockout active an attacker gets one window of q_dec queries before the
    port needs a reconfiguration, so the locked one-minute figure equals the bound
    itself; the unlocked figure lets every cycle of the minute spend its trials.
    """
    per_attempt = advantage_bound(p)
    unlocked_queries = cycles_per_minute * queries_per_cycle
    unlocked_params = AdvantageParams(p.tag_bits, p.sigma, p.block_bits, unlocked_queries)
    unlocked = float(min(Fraction(1), advantage_exact(unlocked_params)))
    return FipsVerdict(
        per_attempt_ok=per_attempt < PER_ATTEMPT_LIMIT,
        per_minute_ok=per_attempt < PER_MINUTE_LIMIT,
        per_attempt=per_attempt,
        per_minute_locked=per_attempt,
        per_minute_unlocked=unlocked,
        queries_per_minute_unlocked=unlocked_queries,
    )


@dataclass(frozen=True)
class PublishedValue:
    label: str
    params: AdvantageParams
    printed: float


PUBLISHED_VALUES = (
    PublishedValue("32-bit tag", AdvantageParams(tag_bits=32, sigma=1, q_dec=3), 7e-10),
    PublishedValue("64-bit tag", AdvantageParams(tag_bits=64, sigma=1, q_dec=3), 1.6e-19),
    PublishedValue("16-bit tag", AdvantageParams(tag_bits=16, sigma=1, q_dec=3), 4.6e-5),
    PublishedValue("32-bit tag, 10 queries", AdvantageParams(tag_bits=32, sigma=1, q_dec=10), 7e-9),
    PublishedValue("32-bit tag, 10 blocks", AdvantageParams(tag_bits=32, sigma=10, q_dec=3), 7e-10),
)

# Printed figures are rounded to one or two significant digits
PUBLISHED_TOLERANCE = 0.05


def advantage_table() -> list[dict]:
    """Published parameterisations next to the recomputed bound."""
    rows = []
    for entry in PUBLISHED_VALUES:
        computed = advantage_bound(entry.params)
        deviation = abs(computed - entry.printed) / entry.printed
        rows.append({
            "label": entry.label,
            "tag_bits": entry.params.tag_bits,
            "sigma": entry.params.sigma,
            "q_dec": entry.params.q_dec,
            "printed": entry.printed,
            "computed": computed,
            "relative_deviation": deviation,
            "discrepancy": deviation > PUBLISHED_TOLERANCE,
        })
    return rows


def lockout_sweep(tag_bits: int, windows: int, sigma: int = 1) -> list[dict]:
    """Advantage when k = 1..windows lockout windows are tolerated before reconfiguration."""
    if windows < 1:
        raise InvalidParams("windows must be at least 1")
    rows = []
    for k in range(1, windows + 1):
        params = AdvantageParams(tag_bits=tag_bits, sigma=sigma, q_dec=LOCKOUT_THRESHOLD * k)
        rows.append({"windows": k, "q_dec": params.q_dec, "advantage": advantage_bound(params)})
    return rows


def sigma_for_payload(octets: int, block_bits: int = AES_BLOCK_BITS) -> int:
    """Blocks processed for one message of ``octets`` payload octets."""
    if octets < 1:
        raise InvalidParams("payload must have at least one octet")
    return ceil(octets * 8 / block_bits)
