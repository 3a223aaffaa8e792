"""Command-line entry point: ``sfmtl run|compare|gen-data|louvain|oracle|stats``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort (including
runs in which a client's training diverged), 1 any other input problem.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .community import brute_force_best_partition, louvain, modularity
from .data import export_dataset
from .errors import ConfigurationError, NumericalError, SFMTLError
from .experiment import build_dataset, load_config, run_comparison, run_experiment
from .graph import read_edge_list
from .metrics import METHODS, fairness_stats

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
REPORT_COLUMNS = ("method", "mean", "std", "worst_10", "worst_20", "bits_up", "bits_down", "flops")


def _common(p: argparse.ArgumentParser, method=True) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    if method:
        p.add_argument("--method", choices=METHODS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfmtl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one method and write artifacts")
    _common(run)
    run.add_argument("--rounds", type=int)
    run.add_argument("--lam", type=float)
    run.add_argument("--workers", type=int)
    run.add_argument("--no-figures", dest="figures", action="store_const", const=False)

    cmp_ = sub.add_parser("compare", help="run every method on the same data")
    _common(cmp_, method=False)
    cmp_.add_argument("--rounds", type=int)
    cmp_.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    cmp_.add_argument("--no-figures", dest="figures", action="store_const", const=False)

    gen = sub.add_parser("gen-data", help="generate a client dataset bundle")
    _common(gen, method=False)

    lv = sub.add_parser("louvain", help="edge-list CSV -> node,community CSV")
    lv.add_argument("edges")
    lv.add_argument("--seed", type=int, default=0)
    lv.add_argument("--round", type=int, help="round to read from a multi-round edge list")

    orc = sub.add_parser("oracle", help="exhaustive best partition of a small edge list")
    orc.add_argument("edges")
    orc.add_argument("--round", type=int)

    st = sub.add_parser("stats", help="rounds CSV -> fairness report of each client's latest accuracy")
    st.add_argument("rounds_csv")
    st.add_argument("--round", type=int, help="only use this round")
    return parser


def _overrides(args, *names) -> dict:
    return {n: getattr(args, n, None) for n in ("seed", "out", "method", *names)}


def _report_row(method: str, summary: dict) -> list[str]:
    f = summary["fairness"]
    return [method, *(f"{f[k]:.6f}" for k in ("mean", "std", "worst_10", "worst_20")),
            str(summary["bits_up"]), str(summary["bits_down"]), f"{summary['flops']:.6g}"]


def _cmd_run(args) -> int:
    config = load_config(args.config, _overrides(args, "rounds", "lam", "workers", "figures"))
    out = run_experiment(config)
    summary = json.loads((out / "summary.json").read_text())
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    w.writerow(_report_row(config.method, summary))
    if summary["failures"]:
        print(f"{len(summary['failures'])} client update(s) aborted on non-finite values", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_compare(args) -> int:
    config = load_config(args.config, _overrides(args, "rounds", "figures"))
    summaries = run_comparison(config, args.methods)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for method, s in summaries.items():
        w.writerow(_report_row(method, s))
    return EXIT_NUMERICAL if any(s["failures"] for s in summaries.values()) else EXIT_OK


def _cmd_gen_data(args) -> int:
    config = load_config(args.config, _overrides(args))
    out = export_dataset(build_dataset(config), config.out, seed=config.seed)
    print(out)
    return EXIT_OK


def _cmd_louvain(args) -> int:
    graph = read_edge_list(args.edges, args.round)
    partition = louvain(graph, np.random.default_rng(args.seed))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["node", "community"])
    w.writerows(zip(partition.nodes, partition.labels.tolist()))
    print(f"# Q = {modularity(graph, partition):.9f}")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    graph = read_edge_list(args.edges, args.round)
    partition, q = brute_force_best_partition(graph)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["node", "community"])
    w.writerows(zip(partition.nodes, partition.labels.tolist()))
    print(f"# Q* = {q:.9f}")
    return EXIT_OK


def _cmd_stats(args) -> int:
    latest: dict[int, tuple[int, float]] = {}
    with open(args.rounds_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            t, k = int(row["round"]), int(row["client"])
            if args.round is not None and t != args.round:
                continue
            if k not in latest or t >= latest[k][0]:
                latest[k] = (t, float(row["accuracy"]))
    report = fairness_stats([latest[k][1] for k in sorted(latest)])
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["clients", "mean", "std", "worst_10", "worst_20"])
    w.writerow([len(latest), *(f"{v:.6f}" for v in report.as_dict().values())])
    return EXIT_OK


COMMANDS = {
    "run": _cmd_run,
    "compare": _cmd_compare,
    "gen-data": _cmd_gen_data,
    "louvain": _cmd_louvain,
    "oracle": _cmd_oracle,
    "stats": _cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SFMTLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
