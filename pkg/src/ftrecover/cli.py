"""Command-line front end.

Exit codes: 0 success, 1 verification mismatch, 2 bad config, 3 the
scenario could not be recovered.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from importlib import resources
from pathlib import Path
from typing import List, Optional

from .config import load_config
from .errors import FaultToleranceError, InvalidConfig, InvalidInjection, Unrecoverable
from .pipeline import bubble_ratio, build_1f1b_schedule
from .planner import brute_force_group_oracle, group_machines, load_profile, oracle_gap, ORACLE_MAX_N
from .runner import run_training, verify, write_outputs
from .simtime import STRATEGIES, FailureProcess, load_workload, rows_to_csv, simulate_training, speedup, sweep

EXIT_MISMATCH = 1
EXIT_CONFIG = 2
EXIT_UNRECOVERABLE = 3


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def shipped_scenarios() -> List[Path]:
    root = resources.files("ftrecover.data.scenarios")
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".json"))


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or f"runs/{cfg.name}")
    work = out / "work"
    if work.exists():
        shutil.rmtree(work)
    result = run_training(cfg, work)
    write_outputs(result, out)
    summary = {
        "name": cfg.name,
        "iterations": result.job.next_iteration,
        "final_digest": result.trajectory.get(result.job.next_iteration),
        "recoveries": [
            {k: r.get(k) for k in ("strategy", "consensus_iteration", "iterations_replayed", "fallback")}
            for r in result.recoveries
        ],
        "out": str(out),
    }
    _emit(summary)
    return 0


def cmd_plan(args) -> int:
    profile = load_profile(args.profile)
    plan = group_machines(profile)
    out = plan.to_dict()
    if args.oracle:
        if profile.N > ORACLE_MAX_N:
            raise InvalidConfig(f"--oracle supports N <= {ORACLE_MAX_N}")
        best = brute_force_group_oracle(profile)
        out["oracle"] = {"groups": best.groups, "est_recovery_time": best.est_recovery_time}
        out["oracle_gap"] = oracle_gap(plan, best)
    if args.lost_iterations is not None:
        out["expected_recovery_seconds"] = args.lost_iterations * plan.est_recovery_time
    _emit(out)
    return 0


def cmd_simulate(args) -> int:
    workload = load_workload(args.workload)
    proc = FailureProcess(args.mtbf, args.seed, args.failure_mode)
    strategies = args.strategy or ["GlobalCkpt", workload.primary_strategy]
    if args.sweep:
        values = [float(v) for v in args.values.split(",") if v.strip()]
        rows = sweep(workload, strategies, args.sweep, values, proc, args.repetitions)
        text = rows_to_csv(rows)
        if args.csv:
            Path(args.csv).write_text(text)
        else:
            sys.stdout.write(text)
        return 0
    results = [simulate_training(workload, s, proc, args.repetitions).to_dict() for s in strategies]
    out = {"workload": workload.name, "mtbf_hours": args.mtbf, "mode": args.failure_mode, "results": results}
    out.update({k: v for k, v in speedup(workload, proc, args.repetitions).items() if k in ("speedup", "strategy")})
    _emit(out)
    return 0


def cmd_schedule_dump(args) -> int:
    sched = build_1f1b_schedule(args.p, args.m)
    ratio = bubble_ratio(args.p, args.m)
    if args.format == "json":
        _emit(
            {
                "p": args.p,
                "m": args.m,
                "slots": [[str(s) for s in row] for row in sched.slots],
                "bubble_ratio": str(ratio),
            }
        )
    else:
        print(sched.render())
        print(f"bubble ratio {ratio} = {float(ratio):.4f}")
    return 0


def cmd_verify(args) -> int:
    paths = [Path(p) for p in args.configs] or shipped_scenarios()
    ok = True
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        for i, path in enumerate(paths):
            cfg = load_config(path)
            res = verify(cfg, Path(tmp) / f"{i:02d}")
            rows.append(res)
            ok &= res["passed"]
            print(f"{'PASS' if res['passed'] else 'FAIL'} {cfg.name} "
                  f"bit_identical={res['bit_identical']} max_rel_error={res['max_rel_error']:.2e}")
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    return 0 if ok else EXIT_MISMATCH


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ftrecover", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a training scenario with failure injection")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default runs/<name>)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plan", help="choose logging groups for a profile")
    p.add_argument("profile")
    p.add_argument("--oracle", action="store_true", help="also run the exhaustive search")
    p.add_argument("--lost-iterations", type=int)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="simulate end-to-end training time with failures")
    p.add_argument("workload", help="shipped name (wide-resnet-50, bert-128, vit-128-32) or JSON path")
    p.add_argument("--strategy", action="append", choices=STRATEGIES)
    p.add_argument("--mtbf", type=float, default=17.0, help="hours between failures")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--failure-mode", choices=("uniform", "exponential"), default="uniform")
    p.add_argument("--sweep", choices=("checkpoint_interval", "mtbf"))
    p.add_argument("--values", default="", help="comma-separated sweep values")
    p.add_argument("--csv", help="write sweep rows here instead of stdout")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("schedule-dump", help="print the 1F1B schedule grid")
    p.add_argument("p", type=int)
    p.add_argument("m", type=int)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_schedule_dump)

    p = sub.add_parser("verify", help="compare scenarios against their failure-free ghost runs")
    p.add_argument("configs", nargs="*", help="defaults to the shipped scenarios")
    p.add_argument("--json", help="write the comparison rows here")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "simulate" and args.sweep and not args.values:
        parser.error("--sweep needs --values")
    try:
        return args.func(args)
    except (InvalidConfig, InvalidInjection) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Unrecoverable as exc:
        print(f"unrecoverable: {exc}", file=sys.stderr)
        return EXIT_UNRECOVERABLE
    except FaultToleranceError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNRECOVERABLE


if __name__ == "__main__":
    sys.exit(main())
