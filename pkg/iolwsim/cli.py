"""
Command-line frontend.

    iolwsim simulate SCENARIO [--seed N] [--out DIR] [--check] [--json]
    iolwsim attack SCENARIO --name ATTACK
    iolwsim advantage [--tau 32] [--sigma 1] [--qdec 3] [--block-bits 128] [--fips] [--table] [--sweep K]
    iolwsim bep --mode preserving|diffusing [--blocks 10000]
    iolwsim forgery [--tau 8] [--qdec 3] [--episodes N] [--engine link|vectorized]
    iolwsim retry-law [--q 0.05 0.1] [--security legacy|secured] [--cycles N]
    iolwsim report DIR [--format table|csv|json]
    iolwsim scenarios
    iolwsim schema

Exit codes: 0 ok, 1 unexpected error, 2 validation error, 3 --check failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

import pandas as pd

from iolwsim.adversary import AttackOutcome
from iolwsim.analysis import (
    BepMode,
    ExperimentReport,
    bep_experiment,
    classify_trace,
    compare_with_reference,
    monte_carlo_forgery,
    outcome_frame,
    report_frame,
    retry_law_experiment,
)
from iolwsim.config import (
    SCHEMA_PATH,
    ExperimentConfig,
    ExperimentKind,
    ScenarioFile,
    bundled_scenarios,
    find_scenario,
    load_scenario,
    resolve_seed,
)
from iolwsim.console import (
    configure_logging,
    console,
    display_error_panel,
    display_header,
    display_info_panel,
    display_success_panel,
    display_table,
    print_json,
)
from iolwsim.errors import ConfigInvalid, InvalidParams, IolwSimError
from iolwsim.medium import run
from iolwsim.protocol import build_cell
from iolwsim.reports import ArtifactStore, check_expected, load_expected
from iolwsim.secure_channel import (
    AES_BLOCK_BITS,
    AdvantageParams,
    advantage_bound,
    advantage_table,
    fips_check,
    lockout_sweep,
    sigma_for_payload,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID = 2
EXIT_CHECK_FAILED = 3

DEFAULT_OUT = Path("iolwsim-out")


# =============================================================================
# Helpers
# =============================================================================


def _fmt(value: float) -> str:
    return f"{value:.3g}"


def _outcome_rows(outcomes: list[AttackOutcome]) -> list[list]:
    frame = outcome_frame(outcomes)
    return frame.values.tolist()


def _report_rows(reports: list[ExperimentReport]) -> list[list]:
    return [
        [r.experiment, _fmt(r.theoretical), _fmt(r.empirical), r.samples, f"[{_fmt(r.ci_low)}, {_fmt(r.ci_high)}]",
         r.seed, "PASS" if r.passed else "FAIL"]
        for r in reports
    ]


def _show_reports(reports: list[ExperimentReport], title: str = "🧪 Experiments"):
    display_table(title, ["experiment", "theory", "empirical", "samples", "99% CI", "seed", "result"],
                  _report_rows(reports))
    for report in reports:
        for note in report.notes:
            console.print(f"[yellow]note[/] {report.experiment}: {note}")


def _run_experiment(experiment: ExperimentConfig, seed: int) -> ExperimentReport:
    params = dict(experiment.params)
    try:
        match experiment.kind:
            case ExperimentKind.FORGERY:
                return monte_carlo_forgery(int(params.pop("tag_bits")), int(params.pop("q_dec", 3)),
                                           int(params.pop("episodes")), seed, **params)
            case ExperimentKind.BEP:
                mode = BepMode.parse(str(params.pop("mode")))
                return bep_experiment(mode, int(params.pop("blocks")), seed, **params)
            case ExperimentKind.RETRY_LAW:
                return retry_law_experiment(float(params.pop("q")), seed=seed, **params)
    except (KeyError, TypeError) as exc:
        raise InvalidParams(f"experiment {experiment.kind.value}: bad parameters ({exc})") from exc
    raise InvalidParams(f"unknown experiment {experiment.kind!r}")


def _output_dir(args: argparse.Namespace, scenario: ScenarioFile) -> Path:
    if args.out:
        return Path(args.out)
    if scenario.outputs.directory:
        return Path(scenario.outputs.directory)
    return DEFAULT_OUT / scenario.name


# =============================================================================
# Commands
# =============================================================================


def _simulate(args: argparse.Namespace, only_attack: Optional[str] = None) -> int:
    path = find_scenario(args.scenario)
    scenario = load_scenario(path)
    if only_attack is not None:
        scenario = scenario.only_attack(only_attack)
    seed = resolve_seed(args.seed, scenario)
    cell = build_cell(scenario.cell)

    if not args.json:
        display_header(f"Scenario {scenario.name}", scenario.description or None)
    trace = run(cell, scenario, seed, args.horizon, sniffer=not args.no_sniffer)
    outcomes = classify_trace(trace)
    reports = [_run_experiment(experiment, seed) for experiment in scenario.experiments]

    store = ArtifactStore(_output_dir(args, scenario))
    written = []
    if scenario.outputs.trace:
        written.append(store.write_trace(trace))
    if scenario.outputs.summary:
        written.append(store.write_summary(trace))
    if scenario.outputs.outcomes:
        written.append(store.save_outcomes(outcomes))
        written.append(store.write_comparison(outcomes))
    if scenario.outputs.reports and reports:
        written.append(store.save_reports(reports))

    problems: Optional[list[str]] = None
    if args.check:
        expected = load_expected(path)
        if expected is None:
            raise ConfigInvalid(f"{path}: no expected-outcome file to check against")
        if only_attack is not None:
            expected = [row for row in expected if row.get("attack") == only_attack]
        problems = check_expected(outcomes, expected)

    if args.json:
        result = {
            "success": not problems,
            "scenario": scenario.name,
            "seed": seed,
            "outcomes": [o.to_dict(encode_json=True) for o in outcomes],
            "reports": [r.to_dict(encode_json=True) for r in reports],
            "artifacts": [str(p) for p in written],
        }
        if problems is not None:
            result["check"] = {"passed": not problems, "mismatches": problems}
        print_json(result)
    else:
        display_table("🎯 Attack outcomes", ["attack", "kind", "refused", "succeeded", "safety impact", "impact"],
                      _outcome_rows(outcomes))
        if reports:
            _show_reports(reports)
        display_info_panel(f"Seed **{seed}**, artifacts in `{store.directory}`", title="📁 Artifacts")
        if problems:
            display_error_panel("\n".join(problems), title="❌ Check failed")
        elif problems is not None:
            display_success_panel("All outcomes match the expectation.", title="✅ Check passed")
    return EXIT_CHECK_FAILED if problems else EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    return _simulate(args)


def cmd_attack(args: argparse.Namespace) -> int:
    return _simulate(args, only_attack=args.name)


def cmd_advantage(args: argparse.Namespace) -> int:
    sigma, reading = args.sigma, "given"
    if args.payload_octets is not None:
        sigma = sigma_for_payload(args.payload_octets, args.block_bits)
        reading = f"per-message blocks of a {args.payload_octets}-octet payload"
    params = AdvantageParams(tag_bits=args.tau, sigma=sigma, block_bits=args.block_bits, q_dec=args.qdec)
    bound = advantage_bound(params)
    result: dict = {
        "success": True,
        "params": {"tag_bits": params.tag_bits, "sigma": params.sigma, "block_bits": params.block_bits,
                   "q_dec": params.q_dec},
        "sigma_reading": reading,
        "advantage": bound,
    }
    if args.fips:
        verdict = fips_check(params)
        result["fips"] = {
            "per_attempt_ok": verdict.per_attempt_ok,
            "per_minute_ok": verdict.per_minute_ok,
            "per_attempt": verdict.per_attempt,
            "per_minute_locked": verdict.per_minute_locked,
            "per_minute_unlocked": verdict.per_minute_unlocked,
            "queries_per_minute_unlocked": verdict.queries_per_minute_unlocked,
        }
    if args.table:
        result["table"] = advantage_table()
    if args.sweep:
        result["sweep"] = lockout_sweep(args.tau, args.sweep, sigma)

    if args.json:
        print_json(result)
        return EXIT_OK

    display_header("Forgery advantage bound", f"q_dec/2^{params.tag_bits} + {params.sigma}²/2^{params.block_bits}")
    display_table("🔐 Advantage", ["tau", "sigma", "n", "q_dec", "Adv"],
                  [[params.tag_bits, params.sigma, params.block_bits, params.q_dec, _fmt(bound)]])
    if "fips" in result:
        fips = result["fips"]
        display_table("📏 Random-attempt limits", ["criterion", "value", "verdict"], [
            ["per attempt < 1e-6", _fmt(fips["per_attempt"]), "PASS" if fips["per_attempt_ok"] else "FAIL"],
            ["per minute < 1e-5 (lockout)", _fmt(fips["per_minute_locked"]),
             "PASS" if fips["per_minute_ok"] else "FAIL"],
            [f"per minute, no lockout ({fips['queries_per_minute_unlocked']} queries)",
             _fmt(fips["per_minute_unlocked"]), "-"],
        ])
    if "table" in result:
        display_table("📚 Published parameterisations", ["case", "tau", "sigma", "q_dec", "printed", "computed",
                                                         "deviation", "discrepancy"], [
            [r["label"], r["tag_bits"], r["sigma"], r["q_dec"], _fmt(r["printed"]), _fmt(r["computed"]),
             f"{r['relative_deviation']:.1%}", "yes" if r["discrepancy"] else ""]
            for r in result["table"]
        ])
    if "sweep" in result:
        display_table("🔁 Lockout windows tolerated", ["windows", "q_dec", "Adv"],
                      [[r["windows"], r["q_dec"], _fmt(r["advantage"])] for r in result["sweep"]])
    return EXIT_OK


def _experiment_output(args: argparse.Namespace, report: ExperimentReport, title: str) -> int:
    if args.json:
        print_json({"success": True, "report": report.to_dict(encode_json=True)})
    else:
        _show_reports([report], title)
    return EXIT_OK


def cmd_bep(args: argparse.Namespace) -> int:
    report = bep_experiment(BepMode.parse(args.mode), args.blocks, resolve_seed(args.seed), args.flips)
    return _experiment_output(args, report, "📶 Plaintext bit-error probability")


def cmd_forgery(args: argparse.Namespace) -> int:
    report = monte_carlo_forgery(args.tau, args.qdec, args.episodes, resolve_seed(args.seed),
                                 engine=args.engine, workers=args.workers)
    return _experiment_output(args, report, "🎲 Forgery Monte Carlo")


def cmd_retry_law(args: argparse.Namespace) -> int:
    seed = resolve_seed(args.seed)
    reports = [retry_law_experiment(q, args.cycles, seed, security=args.security, workers=args.workers)
               for q in args.q]
    if args.json:
        print_json({"success": True, "reports": [r.to_dict(encode_json=True) for r in reports]})
    else:
        _show_reports(reports, "🔁 Residual cycle failure")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    directory = Path(args.directory)
    if not directory.is_dir():
        raise ConfigInvalid(f"{directory}: not an artifact directory")
    store = ArtifactStore(directory)
    outcomes = store.load_outcomes()
    reports = store.load_reports()
    comparison = compare_with_reference([o for o in outcomes if not o.refused])
    experiments = report_frame(reports)

    match args.format:
        case "json":
            print_json({
                "success": True,
                "outcomes": [o.to_dict(encode_json=True) for o in outcomes],
                "comparison": comparison.to_dict(orient="records"),
                "reports": [r.to_dict(encode_json=True) for r in reports],
            })
        case "csv":
            frames = [frame for frame in (comparison, experiments) if not frame.empty]
            text = "\n".join(frame.to_csv(index=False, lineterminator="\n") for frame in frames)
            console.print(text, markup=False, highlight=False, soft_wrap=True, end="")
        case _:
            display_header(f"Report {directory}")
            _render_frame("🎯 Outcomes vs. reference", comparison)
            if reports:
                _show_reports(reports)
    return EXIT_OK


def _render_frame(title: str, frame: pd.DataFrame):
    display_table(title, list(frame.columns), frame.values.tolist())


def cmd_scenarios(args: argparse.Namespace) -> int:
    rows = []
    for path in bundled_scenarios():
        scenario = load_scenario(path)
        rows.append({"file": path.name, "name": scenario.name, "description": scenario.description,
                     "attacks": [a.kind.value for a in scenario.attacks]})
    if args.json:
        print_json({"success": True, "scenarios": rows})
    else:
        display_table("📦 Bundled scenarios", ["file", "name", "attacks", "description"],
                      [[r["file"], r["name"], ", ".join(r["attacks"]) or "-", r["description"]] for r in rows])
    return EXIT_OK


def cmd_schema(args: argparse.Namespace) -> int:
    console.print(SCHEMA_PATH.read_text(encoding="utf-8"), markup=False, highlight=False, soft_wrap=True, end="")
    return EXIT_OK


# =============================================================================
# Entry point
# =============================================================================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iolwsim", description="IO-Link Wireless security simulator")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default) or ERROR")
    commands = parser.add_subparsers(dest="command", required=True)

    def scenario_command(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("scenario", help="scenario file, or the name of a bundled scenario")
        sub.add_argument("--seed", type=int, default=None)
        sub.add_argument("--out", default=None, help="artifact directory")
        sub.add_argument("--horizon", type=int, default=None, help="override horizon_cycles")
        sub.add_argument("--check", action="store_true", help="compare outcomes with <scenario>.expected.json")
        sub.add_argument("--no-sniffer", action="store_true", help="run without the detection sniffer")
        sub.add_argument("--json", action="store_true")
        return sub

    scenario_command("simulate", "run a scenario").set_defaults(handler=cmd_simulate)
    attack = scenario_command("attack", "run a scenario with a single one of its attacks")
    attack.add_argument("--name", required=True)
    attack.set_defaults(handler=cmd_attack)

    advantage = commands.add_parser("advantage", help="forgery advantage bound and random-attempt limits")
    advantage.add_argument("--tau", type=int, default=32)
    advantage.add_argument("--sigma", type=int, default=1)
    advantage.add_argument("--payload-octets", type=int, default=None, help="derive sigma from a payload size")
    advantage.add_argument("--qdec", type=int, default=3)
    advantage.add_argument("--block-bits", type=int, default=AES_BLOCK_BITS)
    advantage.add_argument("--fips", action="store_true")
    advantage.add_argument("--table", action="store_true")
    advantage.add_argument("--sweep", type=int, default=0, metavar="K")
    advantage.add_argument("--json", action="store_true")
    advantage.set_defaults(handler=cmd_advantage)

    bep = commands.add_parser("bep", help="ciphertext bit flips against plaintext bit errors")
    bep.add_argument("--mode", default="diffusing", help="preserving or diffusing")
    bep.add_argument("--blocks", type=int, default=10_000)
    bep.add_argument("--flips", type=int, default=1)
    bep.add_argument("--seed", type=int, default=None)
    bep.add_argument("--json", action="store_true")
    bep.set_defaults(handler=cmd_bep)

    forgery = commands.add_parser("forgery", help="Monte Carlo of random-tag forgery under lockout")
    forgery.add_argument("--tau", type=int, default=8)
    forgery.add_argument("--qdec", type=int, default=3)
    forgery.add_argument("--episodes", type=int, default=100_000)
    forgery.add_argument("--engine", choices=["link", "vectorized"], default="link")
    forgery.add_argument("--workers", type=int, default=1)
    forgery.add_argument("--seed", type=int, default=None)
    forgery.add_argument("--json", action="store_true")
    forgery.set_defaults(handler=cmd_forgery)

    retry = commands.add_parser("retry-law", help="residual cycle failure of the retry engine")
    retry.add_argument("--q", type=float, nargs="+", default=[0.05, 0.1])
    retry.add_argument("--cycles", type=int, default=20_000)
    retry.add_argument("--security", choices=["legacy", "secured"], default="secured")
    retry.add_argument("--workers", type=int, default=1)
    retry.add_argument("--seed", type=int, default=None)
    retry.add_argument("--json", action="store_true")
    retry.set_defaults(handler=cmd_retry_law)

    report = commands.add_parser("report", help="render the artifacts of a previous run")
    report.add_argument("directory")
    report.add_argument("--format", choices=["table", "csv", "json"], default="table")
    report.set_defaults(handler=cmd_report, json=False)

    scenarios = commands.add_parser("scenarios", help="list bundled scenarios")
    scenarios.add_argument("--json", action="store_true")
    scenarios.set_defaults(handler=cmd_scenarios)

    commands.add_parser("schema", help="print the scenario JSON schema").set_defaults(handler=cmd_schema, json=False)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    as_json = getattr(args, "json", False) or getattr(args, "format", None) == "json"

    try:
        return args.handler(args)
    except (ConfigInvalid, InvalidParams) as exc:
        code, title = EXIT_INVALID, "❌ Invalid input"
        message = str(exc)
        if isinstance(exc, ConfigInvalid) and exc.line is not None:
            message = f"{message} (line {exc.line}, column {exc.column})"
    except IolwSimError as exc:
        code = EXIT_INVALID if isinstance(exc, ValueError) else EXIT_ERROR
        title, message = "❌ Error", f"{type(exc).__name__}: {exc}"
    except Exception as exc:
        logger.debug("unexpected failure", exc_info=True)
        code, title, message = EXIT_ERROR, "❌ Unexpected error", f"{type(exc).__name__}: {exc}"

    if as_json:
        print_json({"success": False, "message": message, "exit_code": code})
    else:
        display_error_panel(message, title=title)
    return code


if __name__ == "__main__":
    sys.exit(main())
