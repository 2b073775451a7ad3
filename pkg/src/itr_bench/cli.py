"""Command-line entry point ``itr-bench``."""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import bench
from .config import ConfigError, load_config
from .dgp import Dataset, DgpSpec, propensity, read_csv, sample_dataset, write_csv
from .temvip import TemVipConfig, filter_report

RESULTS_FILE = "results.csv"


def _cmd_run(args) -> int:
    cfg = load_config(args.config, args.profile)
    out = Path(args.out or cfg.output_dir)
    threads = args.threads if args.threads is not None else 1

    def progress(done, total):
        print(f"[{done}/{total}] replicates finished", file=sys.stderr, flush=True)

    results = bench.run_experiment(cfg, threads, progress)
    bench.write_results(results, out / RESULTS_FILE)
    summary = bench.aggregate(results)
    (out / "summary.csv").write_text(bench.summary_csv(summary))
    (out / "summary.md").write_text(bench.summary_markdown(summary))
    failed = sum(r.status != "ok" for r in results)
    print(f"wrote {len(results)} rows to {out / RESULTS_FILE} ({failed} failed)")
    return 1 if failed else 0


def _cmd_report(args) -> int:
    src = Path(args.inp)
    path = src / RESULTS_FILE if src.is_dir() else src
    summary = bench.aggregate(bench.read_results(path))
    text = bench.summary_csv(summary) if args.format == "csv" else bench.summary_markdown(summary)
    sys.stdout.write(text)
    return 0


def _cmd_simulate(args) -> int:
    spec = DgpSpec.from_id(args.dgp, p=args.p)
    data = sample_dataset(spec, args.n, args.seed, with_potential_outcomes=args.potential_outcomes)
    write_csv(data, args.out)
    return 0


def _cmd_temvip(args) -> int:
    data = read_csv(args.inp)
    if args.mode == "rct":
        # a "pi" column wins; otherwise the simulated RCT assignment rule
        pi = data.pi if data.pi is not None else propensity("pi2_logistic", data.W)
        data = Dataset(data.W, data.A, data.Y, pi=pi)
        config = TemVipConfig(args.fdr, "rct_lasso_interactions")
    else:
        config = TemVipConfig(args.fdr, "observational_super_learner")
    report = filter_report(data, config, args.seed)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["index", "psi_hat", "se", "p", "p_adj", "selected"])
    for j, psi, se, p, padj, sel in report.rows():
        w.writerow([j + 1, repr(float(psi)), repr(float(se)), repr(float(p)), repr(float(padj)),
                    int(sel)])
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="itr-bench", description="Benchmark CATE-based treatment rules.")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a benchmark described by a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--profile", choices=("desk", "paper"))
    r.add_argument("--threads", type=int, help="worker processes for replicates (default 1)")
    r.add_argument("--out", help="output directory (default: config output_dir)")
    r.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="summarize a results directory")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    rep.set_defaults(func=_cmd_report)

    s = sub.add_parser("simulate", help="write one simulated dataset to CSV")
    s.add_argument("--dgp", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--p", type=int, default=500)
    s.add_argument("--potential-outcomes", action="store_true",
                   help="also write the Y0 and Y1 columns")
    s.set_defaults(func=_cmd_simulate)

    t = sub.add_parser("temvip", help="TEM-VIP report for a CSV dataset")
    t.add_argument("--in", dest="inp", required=True)
    t.add_argument("--mode", choices=("rct", "obs"), required=True)
    t.add_argument("--fdr", type=float, default=0.05)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=_cmd_temvip)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"itr-bench: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
