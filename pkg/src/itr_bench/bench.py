"""Benchmark orchestration: replicates, metrics, result files and tables."""
from __future__ import annotations

import csv
import io
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._seeding import derive_seed
from .cate import CateModel, fit_strategy, has_builtin_tems
from .config import ExperimentConfig
from .dgp import Dataset, DgpSpec, monte_carlo_optimal_value, sample_dataset
from .nuisance import FitContext
from .temvip import TemVipConfig, filter_report

RESULT_COLUMNS = ("dgp", "n", "replicate", "estimator", "filtered", "status",
                  "mean_test_outcome", "relative_rule_quality", "fdp", "tnp", "tpp",
                  "selected_tems", "diagnostics", "fit_time")
SUMMARY_COLUMNS = ("dgp", "estimator", "filtered", "n", "replicates", "failures", "rule_quality",
                   "fdr_pct", "tpr_pct", "tnr_pct", "mean_fit_time")


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


def rule_quality(assignments, test: Dataset) -> float:
    """Mean potential outcome under the assigned treatments."""
    if not test.has_potential_outcomes:
        raise MetricError("the test set carries no potential outcomes")
    a = np.asarray(assignments)
    return float(np.mean(np.where(a == 1, test.Y1, test.Y0)))


def relative_rule_quality(value: float, optimal_value: float) -> float:
    """
    >>> round(relative_rule_quality(2.75, 3.055), 3)
    0.9
    """
    if abs(optimal_value) < 1e-9:
        raise MetricError(f"optimal value {optimal_value!r} too close to zero (raw value {value!r})")
    return value / optimal_value


def interpretability_metrics(predicted, truth, p: int):
    """False discovery, true negative and true positive proportions.

    >>> interpretability_metrics(range(20), range(10), 500)[0]
    0.5
    """
    pred = set(int(i) for i in predicted)
    true = set(int(i) for i in truth)
    fdp = len(pred - true) / len(pred) if pred else 0.0
    tpp = len(pred & true) / len(true) if true else 1.0
    negatives = p - len(true)
    tnp = (negatives - len(pred - true)) / negatives if negatives else 1.0
    return fdp, tnp, tpp


@dataclass(frozen=True)
class ReplicateResult:
    dgp: str
    n: int
    replicate: int
    estimator: str
    filtered: bool
    status: str
    mean_test_outcome: float
    relative_rule_quality: float
    fdp: float | None
    tnp: float | None
    tpp: float | None
    selected_tems: tuple | None
    diagnostics: str
    fit_time: float

    def row(self) -> list[str]:
        def num(v):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                return "NA"
            return repr(float(v))
        tems = "NA" if self.selected_tems is None else ";".join(str(i + 1) for i in self.selected_tems)
        return [self.dgp, str(self.n), str(self.replicate), self.estimator,
                "filtered" if self.filtered else "unfiltered", self.status,
                num(self.mean_test_outcome), num(self.relative_rule_quality),
                num(self.fdp), num(self.tnp), num(self.tpp), tems, self.diagnostics,
                num(self.fit_time)]


def _diagnostics(model: CateModel) -> str:
    parts = []
    for k in sorted(model.diagnostics):
        v = model.diagnostics[k]
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    forest = model.components.get("forest")
    if forest is not None and hasattr(forest, "n_fallback_"):
        parts.append(f"cf_fallback={forest.n_fallback_}")
    return ";".join(parts)


# ---------------------------------------------------------------------------
# replicates


def replicate_seeds(master: int, dgp: str, n: int, b: int) -> dict:
    return {k: derive_seed(master, dgp, n, b, k) for k in ("learn", "test", "fit")}


def _failed(dgp, n, b, est, filtered, exc, elapsed):
    msg = f"{type(exc).__name__}: {exc}".replace(",", " ").replace("\n", " ")
    return ReplicateResult(dgp, n, b, est, filtered, "error", math.nan, math.nan, None, None, None,
                           None, msg[:200], elapsed)


def run_replicate(config: ExperimentConfig, dgp: str, n: int, b: int,
                  optimal_value: float | None = None) -> list[ReplicateResult]:
    """Fit every configured estimator in every filter state on one learning
    set and score it on the matching test set.

    Filtered estimators are charged the filtering time; every estimator is
    charged the full cost of the cached nuisances it used.
    """
    spec = DgpSpec.from_id(dgp, p=config.p)
    cov = spec.covariance()
    seeds = replicate_seeds(config.master_seed, dgp, n, b)
    learn = sample_dataset(spec, n, seeds["learn"], covariance=cov)
    test = sample_dataset(spec, config.test_size, seeds["test"], True, covariance=cov)
    if not spec.pi_known:
        learn = Dataset(learn.W, learn.A, learn.Y)
    if optimal_value is None:
        optimal_value = monte_carlo_optimal_value(spec, config.n_mc)[0]
    ctx = FitContext(learn, spec.pi_known, seeds["fit"], config.nuisance)
    truth = spec.true_tems
    results = []

    selection, filter_keys, filter_own, filter_exc = None, frozenset(), 0.0, None
    if True in config.filter_states:
        tv = TemVipConfig(config.fdr_level,
                          "rct_lasso_interactions" if spec.pi_known else "observational_super_learner",
                          config.nuisance.cross_fit_folds, config.nuisance.pi_floor)
        ctx.start_charge()
        t0 = time.perf_counter()
        try:
            selection = filter_report(learn, tv, seeds["fit"], ctx).selected_indices
        except Exception as exc:  # recorded on every filtered row
            filter_exc = exc
        filter_own = time.perf_counter() - t0 - ctx.build_seconds
        filter_keys = ctx.charged_keys

    for est in config.estimators:
        for filtered in config.filter_states:
            est_seed = derive_seed(seeds["fit"], est)
            if filtered and filter_exc is not None:
                results.append(_failed(dgp, n, b, est, True, filter_exc, math.nan))
                continue
            ctx.start_charge()
            t0 = time.perf_counter()
            try:
                model = fit_strategy(est, learn, ctx, est_seed,
                                     columns=selection if filtered else None,
                                     settings=config.strategy)
            except Exception as exc:
                elapsed = time.perf_counter() - t0
                results.append(_failed(dgp, n, b, est, filtered, exc, elapsed))
                continue
            own = time.perf_counter() - t0 - ctx.build_seconds
            keys = ctx.charged_keys | (filter_keys if filtered else frozenset())
            fit_time = own + ctx.recorded_seconds(keys) + (filter_own if filtered else 0.0)
            try:
                value = rule_quality(model.rule().assign(test.W), test)
                rel = relative_rule_quality(value, optimal_value)
            except Exception as exc:
                results.append(_failed(dgp, n, b, est, filtered, exc, fit_time))
                continue
            tems = selection if filtered else model.builtin_tems
            if tems is None:
                fdp = tnp = tpp = None
                tems_out = None
            else:
                fdp, tnp, tpp = interpretability_metrics(tems, truth, spec.p)
                tems_out = tuple(int(i) for i in np.sort(tems))
            results.append(ReplicateResult(dgp, n, b, est, filtered, "ok", value, rel, fdp, tnp, tpp,
                                           tems_out, _diagnostics(model), fit_time))
    return results


def _task(args):
    config, dgp, n, b, opt = args
    try:
        return run_replicate(config, dgp, n, b, opt)
    except Exception as exc:
        tb = traceback.format_exc(limit=1)
        return [_failed(dgp, n, b, est, f, RuntimeError(f"{exc} {tb}"), math.nan)
                for est in config.estimators for f in config.filter_states]


def run_experiment(config: ExperimentConfig, threads: int = 1, progress=None) -> list[ReplicateResult]:
    """Run every (dgp, n, replicate) cell; results come back in grid order."""
    optimal = {}
    for dgp in config.dgps:
        optimal[dgp] = monte_carlo_optimal_value(DgpSpec.from_id(dgp, p=config.p), config.n_mc)[0]
    tasks = [(config, dgp, n, b, optimal[dgp]) for dgp in config.dgps
             for n in config.sample_sizes for b in range(config.replicates)]
    results = []
    if threads <= 1:
        for i, t in enumerate(tasks):
            results.extend(_task(t))
            if progress:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for i, res in enumerate(pool.map(_task, tasks)):
                results.extend(res)
                if progress:
                    progress(i + 1, len(tasks))
    return results


# ---------------------------------------------------------------------------
# files and tables


def write_results(results, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in results:
            w.writerow(r.row())


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != RESULT_COLUMNS:
        raise ValueError(f"{path} does not have the result schema")
    return rows


def _as_float(v):
    return math.nan if v in ("NA", "", None) else float(v)


def aggregate(rows) -> list[dict]:
    """Means over replicates per (dgp, estimator, filter state, n).

    Accepts :class:`ReplicateResult` objects or rows read back from CSV.
    Failed replicates are counted but excluded from the means; proportions
    become percentages and stay NA when every replicate lacks them.
    """
    rows = [dict(zip(RESULT_COLUMNS, r.row())) if isinstance(r, ReplicateResult) else r for r in rows]
    if not rows:
        raise ValueError("no results to aggregate")
    groups: dict = {}
    order = []
    for r in rows:
        key = (r["dgp"], r["estimator"], r["filtered"], int(r["n"]))
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(r)
    out = []
    for key in order:
        g = groups[key]
        ok = [r for r in g if r["status"] == "ok"]

        def mean(col, scale=1.0):
            vals = [_as_float(r[col]) for r in ok]
            vals = [v for v in vals if not math.isnan(v)]
            return scale * float(np.mean(vals)) if vals else math.nan

        out.append({"dgp": key[0], "estimator": key[1], "filtered": key[2], "n": key[3],
                    "replicates": len(g), "failures": len(g) - len(ok),
                    "rule_quality": mean("relative_rule_quality"),
                    "fdr_pct": mean("fdp", 100.0), "tpr_pct": mean("tpp", 100.0),
                    "tnr_pct": mean("tnp", 100.0), "mean_fit_time": mean("fit_time")})
    return out


def _fmt(v, digits=2):
    return "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"


def summary_csv(summary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summary:
        w.writerow([s[c] if c in ("dgp", "estimator", "filtered", "n", "replicates", "failures")
                    else _fmt(s[c], 4) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


_METRICS = (("Rule quality", "rule_quality"), ("Empirical FDR (%)", "fdr_pct"),
            ("Empirical TPR (%)", "tpr_pct"), ("Empirical TNR (%)", "tnr_pct"),
            ("Mean fit time (sec.)", "mean_fit_time"))


def summary_markdown(summary) -> str:
    """One table per DGP: estimators by metric, unfiltered then filtered columns."""
    lines = []
    dgps = list(dict.fromkeys(s["dgp"] for s in summary))
    for dgp in dgps:
        rows = [s for s in summary if s["dgp"] == dgp]
        ns = sorted({s["n"] for s in rows})
        states = [st for st in ("unfiltered", "filtered") if any(s["filtered"] == st for s in rows)]
        cols = [(st, n) for st in states for n in ns]
        lookup = {(s["estimator"], s["filtered"], s["n"]): s for s in rows}
        lines.append(f"### {dgp}")
        lines.append("")
        head = ["Estimator", "Metric"] + [f"{st} n={n}" for st, n in cols]
        lines.append("| " + " | ".join(head) + " |")
        lines.append("|" + "|".join(["---"] * 2 + ["---:"] * len(cols)) + "|")
        for est in dict.fromkeys(s["estimator"] for s in rows):
            for i, (label, key) in enumerate(_METRICS):
                cells = []
                for st, n in cols:
                    s = lookup.get((est, st, n))
                    cells.append("" if s is None else _fmt(s[key]))
                lines.append("| " + " | ".join([est if i == 0 else "", label] + cells) + " |")
        lines.append("")
    return "\n".join(lines)
