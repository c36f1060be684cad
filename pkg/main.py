"""Entry point: load config → load scenario or snapshot → run the subcommand → exit."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from core.config import AppConfig, load_config
from core.rollback import (
    OracleLimitExceeded,
    RollbackAssignment,
    RollbackError,
    brute_force_oracle,
    check_consistent,
    choose_frontiers,
)
from core.scenario import ScenarioError, load_scenario, load_snapshot, snapshot_to_dict
from core.simulator import Simulator, StepLimitExceeded
from core.trace import Trace, compare_external

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 2


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
        stream=sys.stderr,
    )


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Simulate dataflow checkpointing, failures and consistent rollback"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run a scenario and print its trace")
    run.add_argument("scenario", type=Path)
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument(
        "--no-failures", action="store_true", help="drop the failure schedule (reference run)"
    )
    run.add_argument(
        "--compare", type=Path, metavar="TRACE", help="compare external outputs with TRACE"
    )
    run.add_argument("--trace-out", type=Path, help="write the trace here instead of stdout")
    run.add_argument(
        "--snapshot-out", type=Path, help="write the snapshot of the last recovery as JSON"
    )

    choose = commands.add_parser("choose", help="choose rollback frontiers for a snapshot")
    choose.add_argument("snapshot", type=Path)

    oracle = commands.add_parser("oracle", help="enumerate maximal consistent assignments")
    oracle.add_argument("snapshot", type=Path)

    watermarks = commands.add_parser(
        "watermarks", help="monitor watermarks of a scenario run or a saved trace"
    )
    watermarks.add_argument("source", type=Path, metavar="SCENARIO_OR_TRACE")
    watermarks.add_argument("--seed", type=int)

    dump = commands.add_parser("dump-checkpoints", help="persisted checkpoints after a run")
    dump.add_argument("scenario", type=Path)
    dump.add_argument("--seed", type=int)
    dump.add_argument("--out", type=Path, help="write JSON here instead of stdout")
    return parser.parse_args(argv)


# ── commands ──────────────────────────────────────────────────────


def _simulate(path: Path, seed: int | None, config: AppConfig, failures: bool = True) -> Simulator:
    scenario = load_scenario(path)
    if seed is not None:
        scenario = replace(scenario, seed=seed)
    if not failures:
        scenario = scenario.without_failures()
    simulator = Simulator(scenario, config)
    simulator.run()
    return simulator


def cmd_run(args: argparse.Namespace, config: AppConfig) -> int:
    simulator = _simulate(args.scenario, args.seed, config, failures=not args.no_failures)
    trace = simulator.trace
    if args.trace_out:
        trace.write(args.trace_out)
        logger.info("Trace written to %s", args.trace_out)
    else:
        sys.stdout.write(trace.text)
    if args.snapshot_out:
        if simulator.last_snapshot is None:
            logger.warning("No recovery happened; no snapshot written")
        else:
            args.snapshot_out.write_text(
                json.dumps(snapshot_to_dict(simulator.last_snapshot), indent=2) + "\n"
            )
    if args.compare:
        divergence = compare_external(Trace.read(args.compare), trace)
        if divergence is not None:
            print(divergence.text)
            return EXIT_DIVERGED
        print("equal")
    return EXIT_OK


def cmd_choose(args: argparse.Namespace, config: AppConfig) -> int:
    snapshot = load_snapshot(args.snapshot)
    assignment = choose_frontiers(snapshot)
    for line in assignment.lines():
        print(line)
    print(f"iterations {assignment.iterations}")
    violations = check_consistent(snapshot, assignment)
    for violation in violations:
        logger.warning("  %s", violation)
    return EXIT_DIVERGED if violations else EXIT_OK


def _dominates(a: RollbackAssignment, b: RollbackAssignment) -> bool:
    return a.f != b.f and all(b.f[pid] <= a.f[pid] for pid in a.f)


def cmd_oracle(args: argparse.Namespace, config: AppConfig) -> int:
    snapshot = load_snapshot(args.snapshot)
    maximal = brute_force_oracle(snapshot, config.simulation.oracle_limit)
    for i, candidate in enumerate(maximal, 1):
        print(f"maximal #{i}")
        for line in candidate.lines():
            print(f"  {line}")
    chosen = choose_frontiers(snapshot)
    if any(candidate.f == chosen.f for candidate in maximal):
        print("choose: member of the maximal set")
        return EXIT_OK
    if not any(_dominates(candidate, chosen) for candidate in maximal):
        print("choose: dominated by none")
        return EXIT_OK
    logger.warning("choose_frontiers result is dominated by an oracle assignment")
    print("choose: dominated")
    return EXIT_DIVERGED


def cmd_watermarks(args: argparse.Namespace, config: AppConfig) -> int:
    if args.source.suffix == ".json":
        simulator = _simulate(args.source, args.seed, config)
        current = {pid: f.text for pid, f in simulator.monitor.watermarks.items()}
    else:
        current = {}
        for line in Trace.read(args.source).lines:
            kind, _, rest = line.partition(" ")
            if kind == "watermark":
                pid, _, frontier = rest.partition(" ")
                current[pid] = frontier
    for pid, frontier in current.items():
        print(f"{pid} {frontier}")
    return EXIT_OK


def cmd_dump_checkpoints(args: argparse.Namespace, config: AppConfig) -> int:
    simulator = _simulate(args.scenario, args.seed, config)
    if args.out:
        simulator.store.save(args.out)
        logger.info("Checkpoints written to %s", args.out)
    else:
        print(json.dumps(simulator.store.dump(), indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "choose": cmd_choose,
    "oracle": cmd_oracle,
    "watermarks": cmd_watermarks,
    "dump-checkpoints": cmd_dump_checkpoints,
}


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    _configure_logging(args.verbose)
    try:
        config = load_config()
    except EnvironmentError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_ERROR
    try:
        return COMMANDS[args.command](args, config)
    except ScenarioError as exc:
        logger.error("cannot use %s", exc.source)
        for diagnostic in exc.diagnostics:
            logger.error("  %s", diagnostic)
        return EXIT_ERROR
    except StepLimitExceeded as exc:
        logger.error("%s; trace prefix follows", exc)
        sys.stdout.write(exc.trace.text)
        return EXIT_ERROR
    except (OracleLimitExceeded, RollbackError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
