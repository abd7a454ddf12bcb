"""Command line interface.

    latent-replay run <config> [--force] [--data-root DIR]
    latent-replay validate <config>
    latent-replay cost <arch> <strategy>... [--json] [--biases]
    latent-replay table <run-dir> --id T1|T2
    latent-replay plot <run-dir> --id F3|F4|cost-vs-acc

``<config>`` is a TOML file or the name of a bundled recipe. Exit status is
0 on success, 2 for configuration errors and 3 for missing dataset files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from latent_replay.arch import get_preset
from latent_replay.cost import blocks_from_spec, cost_table
from latent_replay.errors import ConfigError, MissingDataError
from latent_replay.replay import ReplayStrategy

EXIT_CONFIG = 2
EXIT_DATA = 3


def parse_strategy(text: str, depth: int) -> ReplayStrategy:
    text = text.strip()
    if text.upper() == "IR":
        return ReplayStrategy.internal_replay(depth)
    text = text.strip("[]")
    try:
        values = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"cannot parse strategy {text!r}") from None
    return ReplayStrategy.parse(values, depth)


def cmd_cost(args) -> int:
    spec = get_preset(args.arch)
    strategies = [parse_strategy(s, spec.depth) for s in args.strategies]
    rows = cost_table(spec, strategies, include_biases=args.biases)
    if args.json:
        print(json.dumps({"arch": args.arch, "blocks": list(blocks_from_spec(spec, args.biases).blocks),
                          "rows": rows}, indent=2))
        return 0
    print(f"{'strategy':<28}{'U':>14}{'R':>9}")
    for row in rows:
        label = "[" + ", ".join(f"{f:g}" for f in row["strategy"]) + "]"
        print(f"{label:<28}{row['U']:>14,.0f}{100 * row['R']:>8.1f}%")
    return 0


def cmd_validate(args) -> int:
    from latent_replay.harness.config import load_config

    cfg = load_config(args.config)
    errs = cfg.errors()
    if errs:
        for e in errs:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{cfg.name}: ok ({cfg.run_dir()})")
    return 0


def cmd_run(args) -> int:
    from latent_replay.harness.config import load_config
    from latent_replay.harness.runner import Runner, summarize

    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    runner = Runner(cfg, data_root=args.data_root, force=args.force)
    results = runner.run()
    for row in summarize(results):
        sem = "" if row["sem"] is None else f" ± {100 * row['sem']:.1f}%"
        print(f"{row['cell']:<32} {100 * row['accuracy']:.1f}%{sem}  ({row['seeds']} seeds)")
    print(runner.run_dir)
    return 0


def cmd_table(args) -> int:
    from latent_replay.harness.report import emit_table
    from latent_replay.harness.runner import load_results

    results = load_results(args.run_dir)
    print(emit_table(results, args.id, args.out or args.run_dir), end="")
    return 0


def cmd_plot(args) -> int:
    from latent_replay.harness.report import emit_plots
    from latent_replay.harness.runner import load_results

    results = load_results(args.run_dir)
    print(emit_plots(results, args.id, args.out or args.run_dir))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-replay", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--force", action="store_true", help="recompute finished cells")
    p.add_argument("--data-root", default=None, help="dataset directory (default $LATENT_REPLAY_DATA)")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a config without running it")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("cost", help="analytic replay cost of strategies")
    p.add_argument("arch")
    p.add_argument("strategies", nargs="+", help="'IR' or comma separated fractions, e.g. 0.5,0.3,0.2")
    p.add_argument("--json", action="store_true")
    p.add_argument("--biases", action="store_true", help="count biases as parameters too")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("table", help="format a results table")
    p.add_argument("run_dir")
    p.add_argument("--id", required=True, choices=["T1", "T2"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("plot", help="render a figure")
    p.add_argument("run_dir")
    p.add_argument("--id", required=True, choices=["F3", "F4", "cost-vs-acc"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingDataError as e:
        print(f"missing data: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
