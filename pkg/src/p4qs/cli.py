"""Command-line entry point: run simulations, evaluate the circulation math,
and regenerate fixtures.

Exit codes: 0 success, 1 configuration error, 2 runtime invariant breach.
Reports are fully serialized before anything is written, so a failed run
leaves no partial output behind.
"""

from __future__ import annotations

import argparse
import os
import random
import sys
from pathlib import Path

from .config import PROTOCOL_P4QS, PROTOCOL_PSEUDONYM, ConfigError, RunConfig
from .report import render_figures, write_report
from .scenarios import PRESETS, run_raw, run_scenario
from .simnet import InvariantViolation, export_trace
from .tickets import ExchangeParams, ownership_probability, ownership_probability_mc

ENV_CONFIG = "P4QS_CONFIG"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="p4qs",
        description="peer-to-peer K-anonymous location query simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario preset or a raw config")
    p_run.add_argument("--config", "-c", default=None,
                       help=f"JSON config file (default: ${ENV_CONFIG})")
    p_run.add_argument("--preset", "-p", choices=sorted(PRESETS), default=None,
                       help="scenario preset; omit for a raw config run")
    p_run.add_argument("--protocol", choices=[PROTOCOL_P4QS, PROTOCOL_PSEUDONYM],
                       default=PROTOCOL_P4QS)
    p_run.add_argument("--seed", "-s", type=int, default=None)
    p_run.add_argument("--seeds", default=None, metavar="A..B",
                       help="inclusive seed range; runs each seed in turn")
    p_run.add_argument("--out", "-o", default=None, help="report output path")
    p_run.add_argument("--format", "-f", choices=["json", "csv"], default=None,
                       help="report format (default from --out extension)")
    p_run.add_argument("--trace", default=None,
                       help="also export the full event trace (ndjson)")
    p_run.add_argument("--figures", default=None, metavar="DIR",
                       help="figure output directory (default: next to --out)")
    p_run.add_argument("--no-figures", action="store_true",
                       help="skip figure rendering")

    p_prob = sub.add_parser("probability",
                            help="ticket-circulation residual ownership")
    p_prob.add_argument("-T", "--tickets", type=int, required=True,
                        help="tickets per batch")
    p_prob.add_argument("-E", "--exchanged", type=int, required=True,
                        help="tickets exchanged per round")
    p_prob.add_argument("-N", "--peers", type=int, required=True)
    p_prob.add_argument("-R", "--rounds", type=int, required=True)
    p_prob.add_argument("--mc", type=int, default=None, metavar="TRIALS",
                        help="also run the Monte-Carlo estimator")
    p_prob.add_argument("--topology", choices=["uniform", "ring"],
                        default="uniform")
    p_prob.add_argument("--seed", "-s", type=int, default=0)

    p_fix = sub.add_parser("fixtures", help="regenerate seeded fixture files")
    p_fix.add_argument("--out", "-o", default=".",
                       help="output root (poi + golden files)")
    p_fix.add_argument("--seed", "-s", type=int, default=None)
    p_fix.add_argument("--count", type=int, default=None,
                       help="POI record count")

    return parser


def _parse_seeds(args) -> list:
    if args.seeds:
        try:
            lo, hi = args.seeds.split("..", 1)
            lo, hi = int(lo), int(hi)
        except ValueError:
            raise ConfigError("seeds", f"expected A..B, got {args.seeds!r}") from None
        if hi < lo:
            raise ConfigError("seeds", "range end before start")
        return list(range(lo, hi + 1))
    return [args.seed if args.seed is not None else 0]


def _load_config(args) -> RunConfig | None:
    path = args.config or os.environ.get(ENV_CONFIG)
    if path:
        return RunConfig.from_file(path)
    return None


def cmd_run(args) -> int:
    try:
        seeds = _parse_seeds(args)
        base_cfg = _load_config(args)
        if args.preset is None and base_cfg is None:
            raise ConfigError("config", "a raw run needs --config (or --preset)")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    for seed in seeds:
        try:
            if args.preset is not None:
                # presets carry their own workload-consistent config; the
                # --config file only drives raw runs
                scenario = run_scenario(args.preset, args.protocol, seed)
            else:
                cfg = RunConfig.from_dict(base_cfg.to_dict())
                cfg.seed = seed
                cfg.protocol = args.protocol
                cfg.validate()
                scenario = run_raw(cfg)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except InvariantViolation as exc:
            print(f"invariant violation: {exc}", file=sys.stderr)
            return EXIT_INVARIANT

        report = scenario.report
        line = (f"[seed {seed}] {report.scenario} {report.protocol}: "
                f"{report.queries_completed}/{report.queries_scheduled} completed, "
                f"min anonymity {report.anonymity_min}, "
                f"ledger linkage {report.linkage_token_ledger:.3f}, "
                f"mean latency {report.latency_mean_ms:.0f} ms")
        print(line)
        if args.out:
            out_path = Path(args.out)
            if len(seeds) > 1:
                out_path = out_path.with_name(
                    f"{out_path.stem}-seed{seed}{out_path.suffix}")
            written = write_report(report, out_path, args.format)
            print(f"report written: {written}")
            if not args.no_figures:
                fig_dir = Path(args.figures) if args.figures else written.parent
                for fig in render_figures(report, fig_dir, stem=written.stem):
                    print(f"figure written: {fig}")
        if args.trace:
            trace_path = Path(args.trace)
            if len(seeds) > 1:
                trace_path = trace_path.with_name(
                    f"{trace_path.stem}-seed{seed}{trace_path.suffix}")
            export_trace(scenario.result.trace, trace_path)
            print(f"trace written: {trace_path}")
    return EXIT_OK


def cmd_probability(args) -> int:
    try:
        params = ExchangeParams(tickets_per_batch=args.tickets,
                                exchanged_per_round=args.exchanged,
                                rounds=args.rounds, peers=args.peers)
        analytic = ownership_probability(params)
    except ValueError as exc:
        print(f"invalid parameters: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"analytic ownership probability: {analytic:.6f}")
    if args.mc:
        try:
            estimate = ownership_probability_mc(params, args.topology,
                                                random.Random(args.seed),
                                                args.mc)
        except ValueError as exc:
            print(f"invalid parameters: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"monte-carlo ({args.topology}, {args.mc} trials): "
              f"{estimate:.6f}  |diff| {abs(estimate - analytic):.6f}")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    from . import fixtures

    out = Path(args.out)
    try:
        seed = args.seed if args.seed is not None else fixtures.POI_SEED
        count = args.count if args.count is not None else fixtures.POI_COUNT
        store = fixtures.generate_poi_fixture(out / "poi_fixture.csv",
                                              seed=seed, count=count)
        golden_seed = args.seed if args.seed is not None else fixtures.GOLDEN_SEED
        paths = fixtures.write_golden_files(out / "golden", seed=golden_seed)
    except OSError as exc:
        print(f"fixture write failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"poi fixture: {out / 'poi_fixture.csv'} ({len(store.entries)} records)")
    for path in paths:
        print(f"golden: {path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "probability":
        return cmd_probability(args)
    if args.command == "fixtures":
        return cmd_fixtures(args)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
