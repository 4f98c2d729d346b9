"""
Artifact storage: traces, summaries, attack outcomes and experiment reports on disk.

Files in an output directory:

    trace.jsonl       one TraceEvent per line
    summary.csv       per-port exchange and security counters
    outcomes.json     AttackOutcome list
    reports.json      ExperimentReport list
    comparison.csv    classified outcomes next to the reference impact rows
"""

import json
import logging
from pathlib import Path
from typing import Any, Optional

from iolwsim.adversary import AttackOutcome, Impact
from iolwsim.analysis import ExperimentReport, compare_with_reference
from iolwsim.config import expected_path
from iolwsim.errors import ConfigInvalid, IOFailure
from iolwsim.trace import SimTrace

logger = logging.getLogger(__name__)

TRACE_FILE = "trace.jsonl"
SUMMARY_FILE = "summary.csv"
OUTCOMES_FILE = "outcomes.json"
REPORTS_FILE = "reports.json"
COMPARISON_FILE = "comparison.csv"


class ArtifactStore:
    """JSON/CSV artifacts of one run under a single directory."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IOFailure(f"cannot create {self.directory}: {exc.strerror or exc}") from exc

    def _write(self, name: str, text: str) -> Path:
        path = self.directory / name
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot write {path}: {exc.strerror or exc}") from exc
        logger.info("wrote %s", path)
        return path

    def _read_json(self, name: str) -> Optional[Any]:
        path = self.directory / name
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise IOFailure(f"cannot read {path}: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc.msg}", line=exc.lineno, column=exc.colno) from exc

    def write_trace(self, trace: SimTrace) -> Path:
        return self._write(TRACE_FILE, trace.to_jsonl())

    def write_summary(self, trace: SimTrace) -> Path:
        return self._write(SUMMARY_FILE, trace.summary_frame().to_csv(lineterminator="\n"))

    def save_outcomes(self, outcomes: list[AttackOutcome]) -> Path:
        data = [o.to_dict(encode_json=True) for o in outcomes]
        return self._write(OUTCOMES_FILE, json.dumps(data, indent=2, sort_keys=True) + "\n")

    def load_outcomes(self) -> list[AttackOutcome]:
        return [AttackOutcome.from_dict(item) for item in self._read_json(OUTCOMES_FILE) or []]

    def save_reports(self, reports: list[ExperimentReport]) -> Path:
        data = [r.to_dict(encode_json=True) for r in reports]
        return self._write(REPORTS_FILE, json.dumps(data, indent=2, sort_keys=True) + "\n")

    def load_reports(self) -> list[ExperimentReport]:
        return [ExperimentReport.from_dict(item) for item in self._read_json(REPORTS_FILE) or []]

    def write_comparison(self, outcomes: list[AttackOutcome]) -> Path:
        frame = compare_with_reference([o for o in outcomes if not o.refused])
        return self._write(COMPARISON_FILE, frame.to_csv(index=False, lineterminator="\n"))


# =============================================================================
# Expected-outcome sidecars
# =============================================================================


def load_expected(scenario_path: Path) -> Optional[list[dict]]:
    """Expected outcomes next to a scenario file (``<stem>.expected.json``), if any."""
    path = expected_path(scenario_path)
    if not path.exists():
        return None
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: {exc.msg}", line=exc.lineno, column=exc.colno) from exc
    if not isinstance(data, dict) or not isinstance(data.get("outcomes"), list):
        raise ConfigInvalid(f"{path}: expected an object with an 'outcomes' list")
    return data["outcomes"]


def check_expected(outcomes: list[AttackOutcome], expected: list[dict]) -> list[str]:
    """Mismatches between classified outcomes and the expectation; empty means the check passed."""
    actual = {o.attack: o for o in outcomes}
    problems = []
    for row in expected:
        name = row.get("attack", "?")
        outcome = actual.pop(name, None)
        if outcome is None:
            problems.append(f"{name}: no outcome recorded")
            continue
        want_impact = frozenset(Impact(i) for i in row.get("impact", []))
        if "kind" in row and outcome.kind.value != row["kind"]:
            problems.append(f"{name}: kind {outcome.kind.value}, expected {row['kind']}")
        if "succeeded" in row and outcome.succeeded != row["succeeded"]:
            problems.append(f"{name}: succeeded={outcome.succeeded}, expected {row['succeeded']}")
        if outcome.impact_set != want_impact:
            got = sorted(i.value for i in outcome.impact_set)
            problems.append(f"{name}: impact {got}, expected {sorted(i.value for i in want_impact)}")
        if "safety_impact" in row and outcome.safety_impact != row["safety_impact"]:
            problems.append(f"{name}: safety_impact={outcome.safety_impact}, expected {row['safety_impact']}")
    problems.extend(f"{name}: not in the expected outcomes" for name in sorted(actual))
    return problems
