"""
Analysis: Monte Carlo checks of the forgery and retry laws, the bit-error
diffusion experiment, and impact classification of simulation traces.

Every empirical figure goes out as an ExperimentReport that carries its sample
count, a binomial confidence interval and the seed it was produced with.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from math import expm1, log1p, sqrt
from typing import Any, Optional

import numpy as np
import pandas as pd
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from dataclasses_json import dataclass_json
from scipy.stats import beta, norm

from iolwsim.adversary import (
    ATTACKER_PREFIX,
    AttackerKnowledge,
    AttackKind,
    AttackOutcome,
    AttackScenario,
    Impact,
    attack_window,
    forge_frames,
)
from iolwsim.config import ScenarioFile
from iolwsim.detection import DetectionConfig
from iolwsim.errors import IncompleteTrace, InvalidParams
from iolwsim.medium import DEFAULT_WATCHDOG_CYCLES, MediumConfig, Outcome, air_octets, bsc_p_for_trial_failure, run
from iolwsim.protocol import (
    SUPPORTED_TAG_BITS,
    CellConfig,
    DeviceConfig,
    FrameKind,
    MasterConfig,
    SecurityMode,
    SlotConfig,
    TimingModel,
    TrackConfig,
    build_cell,
)
from iolwsim.secure_channel import LOCKOUT_THRESHOLD, AdvantageParams, advantage_bound, establish_link
from iolwsim.trace import EventKind, SimTrace

logger = logging.getLogger(__name__)

CONFIDENCE = 0.99
SIGMA_TOLERANCE = 3.0
EXACT_CI_BELOW = 10
BEP_TOLERANCE = 0.02
BEP_MIN_BLOCKS = 10_000
CHUNK_EPISODES = 1 << 18
RETRY_LAW_CHUNK_CYCLES = 10_000
RETRY_LAW_DEVICE_UID = 0x1001
RETRY_TRIALS = TimingModel.max_transmissions_per_cycle
EVIDENCE_PER_IMPACT = 16


@dataclass_json
@dataclass
class ExperimentReport:
    experiment: str
    parameters: dict[str, Any]
    theoretical: float
    empirical: float
    samples: int
    ci_low: float
    ci_high: float
    seed: int
    passed: bool
    successes: Optional[int] = None
    confidence: float = CONFIDENCE
    flagged: bool = False
    notes: list[str] = field(default_factory=list)

    def canonical_json(self) -> str:
        return self.to_json(sort_keys=True, separators=(",", ":"))


def binomial_ci(successes: int, samples: int, confidence: float = CONFIDENCE) -> tuple[float, float]:
    """Normal-approximation interval, Clopper-Pearson when fewer than ten successes."""
    if samples < 1 or not 0 <= successes <= samples:
        raise InvalidParams(f"cannot build an interval for {successes} of {samples}")
    alpha = 1.0 - confidence
    if successes < EXACT_CI_BELOW:
        low = 0.0 if successes == 0 else float(beta.ppf(alpha / 2, successes, samples - successes + 1))
        high = 1.0 if successes == samples else float(beta.ppf(1 - alpha / 2, successes + 1, samples - successes))
        return low, high
    p = successes / samples
    half = float(norm.ppf(1 - alpha / 2)) * sqrt(p * (1 - p) / samples)
    return max(0.0, p - half), min(1.0, p + half)


def _within_sigmas(successes: int, samples: int, theory: float) -> bool:
    sigma = sqrt(theory * (1.0 - theory) / samples)
    deviation = abs(successes / samples - theory)
    if sigma == 0.0:
        return deviation == 0.0
    return deviation <= SIGMA_TOLERANCE * sigma


# =============================================================================
# Forgery Monte Carlo
# =============================================================================


def forgery_success_probability(tag_bits: int, attempts: int) -> float:
    """Probability that at least one of ``attempts`` random tags verifies: 1 - (1 - 2^-tau)^attempts."""
    return -expm1(attempts * log1p(-(2.0**-tag_bits)))


def _vectorized_chunk(tag_bits: int, attempts: int, episodes: int, seed: np.random.SeedSequence) -> int:
    """Episodes in which a random guess hits the AES-derived tag of a fresh frame."""
    rng = np.random.default_rng(seed)
    key = rng.bytes(16)
    octets = tag_bits // 8
    # every (episode, attempt) gets its own block: 8 octets of chunk salt, 8 of index
    index = np.arange(episodes * attempts, dtype=np.uint64)
    blocks = np.empty((index.size, 2), dtype=">u8")
    blocks[:, 0] = int.from_bytes(rng.bytes(8), "big")
    blocks[:, 1] = index
    encryptor = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    tags = np.frombuffer(encryptor.update(blocks.tobytes()) + encryptor.finalize(), dtype=np.uint8)
    tags = tags.reshape(-1, 16)[:, :octets]
    guesses = np.frombuffer(rng.bytes(index.size * octets), dtype=np.uint8).reshape(-1, octets)
    hits = (tags == guesses).all(axis=1).reshape(episodes, attempts)
    return int(hits.any(axis=1).sum())


def _link_chunk(tag_bits: int, attempts: int, episodes: int, seed: np.random.SeedSequence) -> int:
    """Episodes won against the real receive path of a secured link."""
    rng = np.random.default_rng(seed)
    template = establish_link(rng.bytes(16), master_id=1, device_uid=1, tag_bits=tag_bits)
    scenario = AttackScenario(
        name="monte-carlo",
        kind=AttackKind.FORGERY,
        target="M1/T0/S0",
        knowledge=AttackerKnowledge(hopping_table=True, counter_value=True),
    )
    wins = 0
    for _ in range(episodes):
        stats = forge_frames(scenario, replace(template), attempts, rng=rng)
        wins += stats.accepted > 0
    return wins


ENGINES = {"vectorized": _vectorized_chunk, "link": _link_chunk}


def _run_chunk(arguments: tuple) -> int:
    engine, tag_bits, attempts, episodes, seed = arguments
    return ENGINES[engine](tag_bits, attempts, episodes, seed)


def monte_carlo_forgery(
    tag_bits: int,
    q_dec: int,
    episodes: int,
    seed: int = 0,
    *,
    engine: str = "link",
    workers: int = 1,
) -> ExperimentReport:
    """Independent episodes of q_dec random-tag attempts, each cut short by the lockout.

    ``engine="link"`` throws every attempt at the real receive path of a SecureLink.
    ``"vectorized"`` draws the true tags from AES in bulk and compares them against
    random guesses; it estimates the same rate much faster but never calls open().
    Chunks get their own seeds, so the result does not depend on ``workers``.
    """
    if tag_bits not in SUPPORTED_TAG_BITS:
        raise InvalidParams(f"tag_bits must be one of {SUPPORTED_TAG_BITS}")
    if q_dec < 1 or episodes < 1 or workers < 1:
        raise InvalidParams("q_dec, episodes and workers must be positive")
    if engine not in ENGINES:
        raise InvalidParams(f"unknown engine {engine!r}")

    attempts = min(q_dec, LOCKOUT_THRESHOLD)
    sizes = [CHUNK_EPISODES] * (episodes // CHUNK_EPISODES)
    if episodes % CHUNK_EPISODES:
        sizes.append(episodes % CHUNK_EPISODES)
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    jobs = [(engine, tag_bits, attempts, size, child) for size, child in zip(sizes, seeds)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            successes = sum(pool.map(_run_chunk, jobs))
    else:
        successes = sum(_run_chunk(job) for job in jobs)

    theory = forgery_success_probability(tag_bits, attempts)
    bound = advantage_bound(AdvantageParams(tag_bits=tag_bits, sigma=1, q_dec=q_dec))
    empirical = successes / episodes
    low, high = binomial_ci(successes, episodes)
    sigma = sqrt(theory * (1 - theory) / episodes)
    flagged = empirical - bound > SIGMA_TOLERANCE * sigma
    notes = []
    if q_dec > LOCKOUT_THRESHOLD:
        notes.append(f"lockout truncates each episode to {LOCKOUT_THRESHOLD} attempts")
    if tag_bits > 16:
        notes.append(f"desk-scale runs cannot resolve this rate; {high:.3g} is an upper bound")
    if flagged:
        notes.append("empirical rate exceeds the advantage bound by more than three sigma")
    logger.info("forgery tau=%d q=%d: %d of %d episodes succeeded", tag_bits, q_dec, successes, episodes)
    return ExperimentReport(
        experiment="monte_carlo_forgery",
        parameters={"tag_bits": tag_bits, "q_dec": q_dec, "attempts_per_episode": attempts, "engine": engine,
                    "advantage_bound": bound},
        theoretical=theory,
        empirical=empirical,
        samples=episodes,
        successes=successes,
        ci_low=low,
        ci_high=high,
        seed=seed,
        passed=_within_sigmas(successes, episodes, theory) and not flagged,
        flagged=flagged,
        notes=notes,
    )


# =============================================================================
# Bit-error diffusion
# =============================================================================


class BepMode(Enum):
    BIT_PRESERVING = "BitPreserving"
    BLOCK_DIFFUSING = "BlockDiffusing"

    @classmethod
    def parse(cls, text: str) -> "BepMode":
        aliases = {"preserving": cls.BIT_PRESERVING, "diffusing": cls.BLOCK_DIFFUSING}
        if text.lower() in aliases:
            return aliases[text.lower()]
        try:
            return cls(text)
        except ValueError as exc:
            raise InvalidParams(f"unknown mode {text!r}; use preserving or diffusing") from exc


def _flip_masks(rng: np.random.Generator, blocks: int, flips: int) -> np.ndarray:
    if flips == 0:
        return np.zeros((blocks, 16), dtype=np.uint8)
    if flips == 1:
        positions = rng.integers(0, 128, size=(blocks, 1))
    else:
        positions = np.argsort(rng.random((blocks, 128)), axis=1)[:, :flips]
    bits = np.zeros((blocks, 128), dtype=np.uint8)
    np.put_along_axis(bits, positions, 1, axis=1)
    return np.packbits(bits, axis=1)


def bep_experiment(
    mode: BepMode,
    blocks: int,
    seed: int = 0,
    flips_per_block: int = 1,
) -> ExperimentReport:
    """Flip ciphertext bits in every 16-octet block and measure the plaintext bit-error fraction.

    BitPreserving decrypts with the counter-mode keystream, so each ciphertext flip
    shows up as exactly one plaintext flip. BlockDiffusing decrypts each block with
    the raw cipher, which scrambles the whole block.
    """
    if blocks < 1:
        raise InvalidParams("blocks must be at least 1")
    if not 0 <= flips_per_block <= 128:
        raise InvalidParams("flips_per_block must be within 0..128")
    rng = np.random.default_rng(seed)
    key = rng.bytes(16)
    initial = rng.bytes(16)
    plaintext = rng.bytes(blocks * 16)

    if mode is BepMode.BIT_PRESERVING:
        cipher = Cipher(algorithms.AES(key), modes.CTR(initial))
    else:
        cipher = Cipher(algorithms.AES(key), modes.ECB())
    encryptor = cipher.encryptor()
    ciphertext = np.frombuffer(encryptor.update(plaintext) + encryptor.finalize(), dtype=np.uint8).reshape(blocks, 16)
    tampered = ciphertext ^ _flip_masks(rng, blocks, flips_per_block)
    decryptor = cipher.decryptor()
    recovered = np.frombuffer(decryptor.update(tampered.tobytes()) + decryptor.finalize(), dtype=np.uint8)
    original = np.frombuffer(plaintext, dtype=np.uint8)
    errors = np.unpackbits((recovered ^ original).reshape(blocks, 16), axis=1).sum(axis=1)

    per_block = errors / 128.0
    empirical = float(per_block.mean())
    notes = []
    if mode is BepMode.BIT_PRESERVING or flips_per_block == 0:
        theory = flips_per_block / 128.0
        passed = bool((errors == flips_per_block).all())
        spread = 0.0
    else:
        theory = 0.5
        passed = abs(empirical - theory) <= BEP_TOLERANCE
        spread = float(per_block.std(ddof=1)) if blocks > 1 else 0.0
        if blocks < BEP_MIN_BLOCKS:
            notes.append(f"the {BEP_TOLERANCE} tolerance assumes at least {BEP_MIN_BLOCKS} blocks")
    half = float(norm.ppf(1 - (1 - CONFIDENCE) / 2)) * spread / sqrt(blocks)
    return ExperimentReport(
        experiment="bep",
        parameters={"mode": mode.value, "blocks": blocks, "flips_per_block": flips_per_block,
                    "min_flipped_bits": int(errors.min()), "max_flipped_bits": int(errors.max())},
        theoretical=theory,
        empirical=empirical,
        samples=blocks,
        ci_low=max(0.0, empirical - half),
        ci_high=min(1.0, empirical + half),
        seed=seed,
        passed=passed,
        notes=notes,
    )


# =============================================================================
# Retry law
# =============================================================================


def retry_law_cell(security: SecurityMode) -> CellConfig:
    """One master, one track, one DSlot device: the smallest cell with a retry engine."""
    device = DeviceConfig(RETRY_LAW_DEVICE_UID, FrameKind.DSLOT, security)
    return CellConfig(masters=[MasterConfig(master_id=1, tracks=[TrackConfig(0, [SlotConfig(0, device=device)])])])


def _retry_law_chunk(arguments: tuple) -> tuple[int, int]:
    """Cycles without a delivered exchange and transmissions spent, for one simulated run."""
    security, bsc_p, cycles, seed = arguments
    cell = retry_law_cell(security)
    scenario = ScenarioFile(name="retry-law", cell=cell, horizon_cycles=cycles, medium=MediumConfig(bsc_p=bsc_p),
                            detection=DetectionConfig(enabled=False))
    trace = run(build_cell(cell), scenario, seed, cycles, sniffer=False)
    exchanges = trace.of_kind(EventKind.EXCHANGE)
    delivered = sum(1 for e in exchanges if e.detail["success"])
    return cycles - delivered, sum(e.detail["trials"] for e in exchanges)


def retry_law_experiment(
    q: float,
    cycles: int = 20_000,
    seed: int = 0,
    *,
    security: SecurityMode | str = SecurityMode.SECURED,
    workers: int = 1,
) -> ExperimentReport:
    """Residual cycle failure of the simulated retry engine when one trial fails with probability q.

    The medium's bit-error rate is tuned so that a poll and its answer together
    get through intact with probability 1 - q. A repetition is only sent after
    the previous trial failed, so the cycle fails when all three trials fail: q^3.
    A cycle counts as failed whenever the port delivered nothing, including
    cycles it was not polled at all.
    """
    if isinstance(security, str):
        try:
            security = SecurityMode(security.capitalize())
        except ValueError as exc:
            raise InvalidParams(f"unknown security mode {security!r}") from exc
    if not 0.0 <= q < 1.0:
        raise InvalidParams("q must be in [0, 1)")
    if cycles < 1 or workers < 1:
        raise InvalidParams("cycles and workers must be positive")
    frame_bits = 8 * air_octets(retry_law_cell(security).masters[0].tracks[0].slots[0].device)
    bsc_p = bsc_p_for_trial_failure(q, frame_bits)
    sizes = [RETRY_LAW_CHUNK_CYCLES] * (cycles // RETRY_LAW_CHUNK_CYCLES)
    if cycles % RETRY_LAW_CHUNK_CYCLES:
        sizes.append(cycles % RETRY_LAW_CHUNK_CYCLES)
    seeds = [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(len(sizes))]
    jobs = [(security, bsc_p, size, child) for size, child in zip(sizes, seeds)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_retry_law_chunk, jobs))
    else:
        results = [_retry_law_chunk(job) for job in jobs]
    failures = sum(failed for failed, _ in results)
    transmissions = sum(sent for _, sent in results)

    theory = q**RETRY_TRIALS
    low, high = binomial_ci(failures, cycles)
    logger.info("retry law q=%g (%s): %d of %d cycles failed", q, security.value, failures, cycles)
    return ExperimentReport(
        experiment="retry_law",
        parameters={"q": q, "cycles": cycles, "trials": RETRY_TRIALS, "security": security.value,
                    "frame_bits": frame_bits, "bsc_p": bsc_p,
                    "mean_transmissions": transmissions / cycles,
                    "expected_transmissions": sum(q**k for k in range(RETRY_TRIALS))},
        theoretical=theory,
        empirical=failures / cycles,
        samples=cycles,
        successes=failures,
        ci_low=low,
        ci_high=high,
        seed=seed,
        passed=_within_sigmas(failures, cycles, theory),
    )


# =============================================================================
# Impact classification
# =============================================================================


IMPACT_REFERENCE: dict[AttackKind, tuple[bool, frozenset[Impact]]] = {
    AttackKind.FLOODING: (False, frozenset({Impact.AVAILABILITY})),
    AttackKind.JAMMING: (False, frozenset({Impact.AVAILABILITY})),
    AttackKind.REPLAY: (False, frozenset({Impact.AVAILABILITY})),
    AttackKind.FORGERY: (True, frozenset({Impact.AVAILABILITY, Impact.INTEGRITY})),
    AttackKind.FORGERY_LEAKED_KEY: (True, frozenset({Impact.AVAILABILITY, Impact.INTEGRITY})),
    AttackKind.COMPROMISED_DEVICE: (
        True, frozenset({Impact.AVAILABILITY, Impact.INTEGRITY, Impact.CONFIDENTIALITY})
    ),
}

LOST = {Outcome.COLLIDED.value, Outcome.JAMMED.value, Outcome.DISPLACED.value}


def classify_trace(trace: SimTrace) -> list[AttackOutcome]:
    """One outcome per attack in the trace, derived only from evidence events.

    Availability: a SafeState entry during the attack (or within the watchdog
    period after it), or a genuine frame lost with the attacker among the culprits.
    Integrity: a frame from the attacker accepted by a master. Confidentiality: the
    attacker learned payload plaintext. Safety impact: Integrity on a safety device.
    """
    if not trace.complete:
        raise IncompleteTrace(f"trace of {trace.scenario or 'run'} stopped before its horizon")
    started = trace.of_kind(EventKind.RUN_STARTED)
    watchdog = started[0].detail.get("watchdog_cycles", DEFAULT_WATCHDOG_CYCLES) if started else DEFAULT_WATCHDOG_CYCLES
    lag = (watchdog + 1) * trace.sub_cycles_per_cycle

    outcomes = []
    for event in trace.of_kind(EventKind.ATTACK_STARTED, EventKind.ATTACK_REFUSED):
        name = event.actor.removeprefix(ATTACKER_PREFIX)
        kind = AttackKind(event.detail["kind"])
        if event.kind is EventKind.ATTACK_REFUSED:
            outcomes.append(AttackOutcome(name, kind, succeeded=False, refused=True,
                                          missing=list(event.detail.get("missing", []))))
            continue
        start, stop = attack_window(trace, name)
        evidence: dict[Impact, list[int]] = {impact: [] for impact in Impact}
        safety = False
        for item in trace.events:
            if item.kind is EventKind.SAFE_STATE_ENTERED and start <= item.sub_cycle < stop + lag:
                evidence[Impact.AVAILABILITY].append(item.seq)
            elif item.kind is EventKind.DELIVERY:
                if item.detail.get("legitimate") and item.detail["outcome"] in LOST \
                        and event.actor in item.detail.get("culprits", []):
                    evidence[Impact.AVAILABILITY].append(item.seq)
            elif item.kind is EventKind.ACCEPTED:
                if item.actor == event.actor and not item.detail.get("legitimate", True):
                    evidence[Impact.INTEGRITY].append(item.seq)
                    safety = safety or bool(item.detail.get("safety"))
            elif item.kind is EventKind.KNOWLEDGE:
                if item.actor == event.actor and item.detail.get("what") == "payload_plaintext":
                    evidence[Impact.CONFIDENTIALITY].append(item.seq)
        impact = [i for i in Impact if evidence[i]]
        references = sorted(seq for i in impact for seq in evidence[i][:EVIDENCE_PER_IMPACT])
        outcomes.append(AttackOutcome(name, kind, succeeded=bool(impact), impact=impact, safety_impact=safety,
                                      evidence=references))
    return outcomes


def outcome_frame(outcomes: list[AttackOutcome]) -> pd.DataFrame:
    rows = []
    for outcome in outcomes:
        rows.append({
            "attack": outcome.attack,
            "kind": outcome.kind.value,
            "refused": outcome.refused,
            "succeeded": outcome.succeeded,
            "safety_impact": outcome.safety_impact,
            "impact": "+".join(i.value for i in outcome.impact) or "-",
        })
    return pd.DataFrame(rows, columns=["attack", "kind", "refused", "succeeded", "safety_impact", "impact"])


def compare_with_reference(outcomes: list[AttackOutcome]) -> pd.DataFrame:
    """Classified outcomes next to the reference row of their attack kind."""
    frame = outcome_frame(outcomes)
    expected_safety, expected_impact, matches = [], [], []
    for outcome in outcomes:
        safety, impact = IMPACT_REFERENCE[outcome.kind]
        expected_safety.append(safety)
        expected_impact.append("+".join(i.value for i in Impact if i in impact))
        matches.append(not outcome.refused and outcome.safety_impact == safety and outcome.impact_set == impact)
    frame["expected_safety_impact"] = expected_safety
    frame["expected_impact"] = expected_impact
    frame["matches"] = matches
    return frame


def report_frame(reports: list[ExperimentReport]) -> pd.DataFrame:
    rows = [{
        "experiment": r.experiment,
        "theoretical": r.theoretical,
        "empirical": r.empirical,
        "samples": r.samples,
        "ci_low": r.ci_low,
        "ci_high": r.ci_high,
        "seed": r.seed,
        "passed": r.passed,
        "flagged": r.flagged,
    } for r in reports]
    return pd.DataFrame(rows, columns=["experiment", "theoretical", "empirical", "samples", "ci_low", "ci_high",
                                       "seed", "passed", "flagged"])
