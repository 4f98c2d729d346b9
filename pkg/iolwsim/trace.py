"""
Simulation traces: an append-only list of events plus the JSON-lines and
summary-CSV exporters.
"""

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import pandas as pd
from dataclasses_json import dataclass_json


class EventKind(Enum):
    RUN_STARTED = "run_started"
    RUN_FINISHED = "run_finished"
    GRANT = "grant"
    BURST = "burst"
    DELIVERY = "delivery"
    ACCEPTED = "accepted"
    AUTH_FAILURE = "auth_failure"
    REPLAY_REJECTED = "replay_rejected"
    FRAME_ERROR = "frame_error"
    EXCHANGE = "exchange"
    FAIL_STATE = "fail_state"
    RECONFIGURED = "reconfigured"
    SAFE_STATE_ENTERED = "safe_state_entered"
    SAFE_STATE_LEFT = "safe_state_left"
    SERVICE_MODE = "service_mode"
    PAIRING = "pairing"
    TABLE_SWITCH = "table_switch"
    ATTACK_STARTED = "attack_started"
    ATTACK_STOPPED = "attack_stopped"
    ATTACK_REFUSED = "attack_refused"
    KNOWLEDGE = "knowledge"
    ALERT = "alert"


@dataclass_json
@dataclass
class TraceEvent:
    seq: int
    sub_cycle: int
    cycle: int
    kind: EventKind
    actor: str = ""
    port: str = ""
    detail: dict[str, Any] = field(default_factory=dict)


@dataclass
class SimTrace:
    """Ordered events of one run. ``complete`` is set once the horizon is reached."""
    seed: int
    horizon_cycles: int
    sub_cycles_per_cycle: int = 3
    scenario: str = ""
    events: list[TraceEvent] = field(default_factory=list)
    complete: bool = False

    def record(self, kind: EventKind, sub_cycle: int, /, *, actor: str = "", port: Any = "", **detail) -> TraceEvent:
        event = TraceEvent(
            seq=len(self.events),
            sub_cycle=sub_cycle,
            cycle=sub_cycle // self.sub_cycles_per_cycle,
            kind=kind,
            actor=actor,
            port=str(port) if port else "",
            detail=detail,
        )
        self.events.append(event)
        return event

    def of_kind(self, *kinds: EventKind) -> list[TraceEvent]:
        return [e for e in self.events if e.kind in kinds]

    def counts(self) -> Counter:
        return Counter(e.kind.value for e in self.events)

    def transcript(self) -> bytes:
        """Every octet that went on the air, in transmission order."""
        return b"".join(bytes.fromhex(e.detail["frame"]) for e in self.events if e.kind is EventKind.BURST)

    def without(self, *kinds: EventKind) -> list[dict]:
        """Events other than ``kinds`` with sequence numbers dropped, for trace comparisons."""
        kept = []
        for event in self.events:
            if event.kind in kinds:
                continue
            data = event.to_dict(encode_json=True)
            data.pop("seq")
            kept.append(data)
        return kept

    def to_jsonl(self) -> str:
        lines = [e.to_json(sort_keys=True, separators=(",", ":")) for e in self.events]
        return "\n".join(lines) + ("\n" if lines else "")

    def write_jsonl(self, path: Path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    def summary_frame(self) -> pd.DataFrame:
        """One row per port: exchanges, failed cycles, retries and security events."""
        rows: dict[str, dict[str, int]] = {}

        def row(port: str) -> dict[str, int]:
            return rows.setdefault(port, {
                "exchanges": 0, "failed_cycles": 0, "retries": 0, "accepted": 0,
                "auth_failures": 0, "replays_rejected": 0, "frame_errors": 0, "safe_state_entries": 0,
            })

        for event in self.events:
            if not event.port:
                continue
            if event.kind is EventKind.EXCHANGE:
                r = row(event.port)
                r["exchanges"] += 1
                r["retries"] += event.detail["trials"] - 1
                if not event.detail["success"]:
                    r["failed_cycles"] += 1
            elif event.kind is EventKind.ACCEPTED:
                row(event.port)["accepted"] += 1
            elif event.kind is EventKind.AUTH_FAILURE:
                row(event.port)["auth_failures"] += 1
            elif event.kind is EventKind.REPLAY_REJECTED:
                row(event.port)["replays_rejected"] += 1
            elif event.kind is EventKind.FRAME_ERROR:
                row(event.port)["frame_errors"] += 1
            elif event.kind is EventKind.SAFE_STATE_ENTERED:
                row(event.port)["safe_state_entries"] += 1

        frame = pd.DataFrame.from_dict(rows, orient="index")
        frame.index.name = "port"
        return frame.sort_index()

    def write_summary_csv(self, path: Path) -> Path:
        path = Path(path)
        self.summary_frame().to_csv(path, lineterminator="\n")
        return path
