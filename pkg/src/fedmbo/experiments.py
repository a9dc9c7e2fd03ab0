"""Desk-scale studies: sweeps over one configuration axis plus estimator statistics.

Sweep cells are ``(axis value, replicate)`` pairs.  Replicate ``r`` uses the
seed ``derive_seed(base.seed, REPLICATE, r)`` for every axis value, so cells
that share a replicate index share their random streams and comparisons
across axis values are paired.  Cells may run on a thread pool; results are
collected in cell order so outputs never depend on the thread count.
"""

import csv
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .constants import derive_constants, measure_family_constants
from .driver import RunConfig, fedmbo_run
from .errors import ConfigError
from .hypergradient import expected_phe, exact_surrogate_gradient, ihgp_chains, phe_chains
from .sampling import Tag, derive_seed

AXES = ("n", "m", "sigma_het", "N", "estimator", "inner")
_PROBLEM_AXES = {"m", "sigma_het"}
_CATEGORICAL = {"estimator", "inner"}
SWEEP_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple
    replicates: int
    base: RunConfig
    epsilon: float = None
    window: int = 10

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if isinstance(self.base, dict):
            object.__setattr__(self, "base", RunConfig.from_dict(self.base))
        self.validate()

    def validate(self):
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {AXES}", key="sweep.axis")
        if len(self.values) < 1:
            raise ConfigError("needs at least one axis value", key="sweep.values")
        if self.replicates < 1:
            raise ConfigError("must be at least 1", key="sweep.replicates")
        if self.window < 1:
            raise ConfigError("must be at least 1", key="sweep.window")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError("must be positive", key="sweep.epsilon")
        for v in self.values:
            self.cell_config(v, 0)

    def cell_config(self, value, replicate):
        seed = replicate_seed(self.base.seed, replicate)
        if self.axis in _PROBLEM_AXES:
            cast = int if self.axis == "m" else float
            return self.base.with_updates(seed=seed, problem={self.axis: cast(value)})
        if self.axis in _CATEGORICAL:
            return self.base.with_updates(seed=seed, **{self.axis: str(value)})
        return self.base.with_updates(seed=seed, **{self.axis: int(value)})

    def to_dict(self):
        return {"axis": self.axis, "values": list(self.values), "replicates": self.replicates,
                "base": self.base.to_dict(), "epsilon": self.epsilon, "window": self.window}

    @classmethod
    def from_dict(cls, data):
        return cls(axis=data["axis"], values=tuple(data["values"]), replicates=data["replicates"],
                   base=RunConfig.from_dict(data["base"]), epsilon=data.get("epsilon"),
                   window=data.get("window", 10))


def replicate_seed(seed, replicate):
    return derive_seed(seed, Tag.REPLICATE, replicate)


def _map_ordered(fn, items, threads):
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def first_hit(record, epsilon, column="stationarity"):
    """``(k, comm_rounds)`` of the first row with ``column <= epsilon`` or ``None``."""
    for row in record.rows:
        val = row[column]
        if val is not None and val <= epsilon:
            return row["k"], row["comm_rounds"]
    return None


def first_average_hit(record, epsilon):
    """``(k, comm_rounds)`` where the running mean of stationarity first reaches ``epsilon``.

    The running mean over rounds ``0..k`` smooths out single noisy dips, so a
    hit means the method has been accurate on average, not just once.
    """
    stat = record.column("stationarity")
    running = np.cumsum(stat) / np.arange(1, len(stat) + 1)
    idx = np.nonzero(running <= epsilon)[0]
    if len(idx) == 0:
        return None
    row = record.rows[int(idx[0])]
    return row["k"], row["comm_rounds"]


def record_metrics(record, epsilon=None, window=10):
    """Summary metrics of one run; ``*_to_eps`` use the running-mean criterion."""
    stat = record.column("stationarity")
    ks = record.column("k")
    K = ks[-1]
    out = {
        "final_stationarity": float(np.mean(stat[-window:])),
        "avg_stationarity": float(np.mean(stat[ks < K])) if K > 0 else float(stat[0]),
        "final_lower_error": float(record.column("lower_error")[-1]),
        "total_comm_rounds": int(record.rows[-1]["comm_rounds"]),
    }
    if epsilon is not None:
        hit = first_average_hit(record, epsilon)
        out["iterations_to_eps"] = None if hit is None else int(hit[0])
        out["comm_rounds_to_eps"] = None if hit is None else int(hit[1])
    return out


@dataclass
class SweepResult:
    spec: SweepSpec
    records: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def metric_matrix(self, name):
        """(len(values), replicates) array; censored entries are ``inf``."""
        out = np.empty((len(self.spec.values), self.spec.replicates))
        for (vi, r), met in self.metrics.items():
            val = met[name]
            out[vi, r] = math.inf if val is None else val
        return out

    def aggregate_rows(self):
        rows = []
        for vi, value in enumerate(self.spec.values):
            for r in range(self.spec.replicates):
                for name, val in self.metrics[(vi, r)].items():
                    rows.append((value, r, name, "censored" if val is None else val))
        return rows

    def summary(self):
        out = {"axis": self.spec.axis, "cells": []}
        for vi, value in enumerate(self.spec.values):
            fin = self.metric_matrix("final_stationarity")[vi]
            entry = {"axis_value": value, "mean_final_stationarity": float(fin.mean()),
                     "se_final_stationarity": float(fin.std(ddof=1) / np.sqrt(len(fin)))
                     if len(fin) > 1 else 0.0}
            if self.spec.epsilon is not None:
                hits = self.metric_matrix("comm_rounds_to_eps")[vi]
                entry["censored"] = int(np.sum(~np.isfinite(hits)))
            out["cells"].append(entry)
        if len(self.spec.values) > 1 and self.spec.replicates > 1:
            out["paired_tests"] = paired_increase_tests(
                np.log(self.metric_matrix("final_stationarity")))
        return out


def run_sweep(spec, threads=1, runner=fedmbo_run):
    cells = [(vi, r) for vi in range(len(spec.values)) for r in range(spec.replicates)]

    def work(cell):
        vi, r = cell
        return runner(spec.cell_config(spec.values[vi], r),
                      header_extra={"sweep": {"axis": spec.axis, "axis_value": spec.values[vi],
                                              "replicate": r}})

    records = _map_ordered(work, cells, threads)
    result = SweepResult(spec)
    for cell, rec in zip(cells, records):
        result.records[cell] = rec
        result.metrics[cell] = record_metrics(rec, spec.epsilon, spec.window)
    return result


def cell_filename(spec, vi, r):
    value = str(spec.values[vi]).replace("/", "_")
    return os.path.join("cells", f"{spec.axis}={value}", f"rep{r:03d}.jsonl")


def write_sweep(result, out_dir, plot=False, effective_config=None):
    """Write per-cell records, aggregate CSV, summary and a replayable manifest."""
    spec = result.spec
    os.makedirs(out_dir, exist_ok=True)
    cells = []
    for (vi, r), rec in sorted(result.records.items()):
        rel = cell_filename(spec, vi, r)
        os.makedirs(os.path.join(out_dir, os.path.dirname(rel)), exist_ok=True)
        rec.to_jsonl(os.path.join(out_dir, rel))
        cells.append({"axis_value": spec.values[vi], "replicate": r,
                      "seed": rec.header["config"]["seed"], "file": rel})
    with open(os.path.join(out_dir, "aggregate.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("axis_value", "replicate", "metric", "value"))
        for row in result.aggregate_rows():
            writer.writerow([row[0], row[1], row[2], repr(row[3]) if isinstance(row[3], float) else row[3]])
    manifest = {"format": "fedmbo-sweep", "version": SWEEP_FORMAT_VERSION,
                "spec": spec.to_dict(), "cells": cells}
    if effective_config is not None:
        manifest["effective_config"] = effective_config
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(result.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if plot:
        plot_sweep(result, out_dir)


def load_manifest(path):
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format") != "fedmbo-sweep":
        raise ConfigError("not a sweep manifest", key="manifest")
    return SweepSpec.from_dict(data["spec"]), data.get("effective_config")


def plot_sweep(result, out_dir):
    """Mean stationarity against outer round and against communication rounds."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    spec = result.spec
    for xcol, name in (("k", "stationarity_vs_round.png"), ("comm_rounds", "stationarity_vs_comm.png")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for vi, value in enumerate(spec.values):
            recs = [result.records[(vi, r)] for r in range(spec.replicates)]
            xs = recs[0].column(xcol) if xcol == "k" else np.mean([r.column(xcol) for r in recs], axis=0)
            ys = np.mean([r.column("stationarity") for r in recs], axis=0)
            ax.semilogy(xs, ys, label=f"{spec.axis}={value}")
        ax.set_xlabel("outer round" if xcol == "k" else "communication rounds")
        ax.set_ylabel("mean squared hypergradient norm")
        ax.legend()
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, name), dpi=100, metadata={"Software": None})
        plt.close(fig)


def paired_increase_tests(values):
    """One-sided paired t-tests that each row is larger than the previous one.

    ``values`` has shape (levels, replicates); returns one entry per
    consecutive pair with the mean difference and p-value.
    """
    out = []
    for a in range(len(values) - 1):
        lo, hi = values[a], values[a + 1]
        res = sps.ttest_rel(hi, lo, alternative="greater")
        out.append({"pair": [a, a + 1], "mean_difference": float(np.mean(hi - lo)),
                    "p_value": float(res.pvalue)})
    return out


def sweep_heterogeneity(base, levels, replicates, threads=1, window=10):
    """Final-window stationarity per heterogeneity level with paired degradation tests."""
    spec = SweepSpec("sigma_het", tuple(float(v) for v in levels), replicates, base, window=window)
    result = run_sweep(spec, threads)
    fin = result.metric_matrix("final_stationarity")
    table = [{"sigma_het": lvl, "mean_final_stationarity": float(fin[i].mean())}
             for i, lvl in enumerate(spec.values)]
    tests = paired_increase_tests(np.log(fin)) if len(levels) > 1 and replicates > 1 else None
    return {"table": table, "tests": tests, "result": result}


def _interp_crossing(horizons, metric, epsilon):
    """Smallest horizon where ``metric`` reaches ``epsilon``, log-log interpolated."""
    horizons = np.asarray(horizons, dtype=float)
    metric = np.asarray(metric, dtype=float)
    below = np.nonzero(metric <= epsilon)[0]
    if len(below) == 0:
        return None
    j = below[0]
    if j == 0:
        return float(horizons[0]) if metric[0] == epsilon else None
    x0, x1 = np.log(horizons[j - 1]), np.log(horizons[j])
    y0, y1 = np.log(metric[j - 1]), np.log(metric[j])
    if y1 == y0:
        return float(horizons[j])
    t = (np.log(epsilon) - y0) / (y1 - y0)
    return float(np.exp(x0 + t * (x1 - x0)))


def loglog_slope(xs, ys):
    res = sps.linregress(np.log(xs), np.log(ys))
    return float(res.slope)


def sweep_speedup(base, n_values, replicates, epsilon, budgets, threads=1):
    """Rounds needed to reach ``epsilon`` as a function of the participation ``n``.

    For every ``n`` and every total budget ``B`` in ``budgets`` a run with
    horizon ``K = B / n`` is made (the step-size schedule depends on ``K``).
    The accuracy of a horizon is the replicate mean of the running average
    ``(1/K) sum_{k<K} ||grad Phi(x^k)||^2``; ``K(epsilon)`` is the smallest
    horizon whose accuracy reaches ``epsilon`` (log-log interpolation between
    grid points).  Values of ``n`` that never reach ``epsilon`` are censored
    and left out of the slope fit with a warning.
    """
    rows = []
    curves = {}
    for n in n_values:
        horizons = sorted({max(1, int(round(B / n))) for B in budgets})
        accs = []
        for K in horizons:
            cfg = base.with_updates(n=int(n), K=int(K))
            seeds = [replicate_seed(base.seed, r) for r in range(replicates)]
            recs = _map_ordered(lambda s: fedmbo_run(cfg.with_updates(seed=s)), seeds, threads)
            accs.append(float(np.mean([record_metrics(r)["avg_stationarity"] for r in recs])))
        curves[int(n)] = {"horizons": horizons, "avg_stationarity": accs}
        k_eps = _interp_crossing(horizons, accs, epsilon)
        rows.append({"n": int(n), "K_eps": k_eps, "censored": k_eps is None})
    fit = [(r["n"], r["K_eps"]) for r in rows if not r["censored"]]
    if len(fit) < len(rows):
        warnings.warn("some participation levels never reached epsilon; excluded from the fit")
    slope = loglog_slope(*zip(*fit)) if len(fit) >= 2 else None
    return {"table": rows, "slope": slope, "curves": curves, "epsilon": epsilon}


def compare_inner(base, replicates, epsilon, threads=1):
    """Communication rounds to ``epsilon`` for minibatch vs local-SGD inner solvers.

    Both solvers consume ``n * T * S`` lower samples per outer round: the
    local solver runs ``T_local = T`` local steps of size ``S`` between two
    aggregations.  A replicate reaches ``epsilon`` when the running mean of
    its stationarity does.  Censored replicates count as ``inf``; the paired
    comparison is a one-sided sign test on the replicate-wise winner.
    """
    spec = SweepSpec("inner", ("minibatch", "local_sgd"), replicates,
                     base.with_updates(T_local=base.T), epsilon=epsilon)
    result = run_sweep(spec, threads)
    rounds = result.metric_matrix("comm_rounds_to_eps")
    mb, loc = rounds[0], rounds[1]
    wins = int(np.sum(mb < loc))
    losses = int(np.sum(mb > loc))
    p = float(sps.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue) if wins + losses else 1.0
    return {"minibatch_rounds": mb.tolist(), "local_sgd_rounds": loc.tolist(), "wins": wins,
            "losses": losses, "p_value": p, "result": result}


def _bootstrap_slope(ns, per_trial, resamples, seed):
    """Bootstrap CI of the variance slope, resampling trials with replacement."""
    rng = np.random.default_rng(derive_seed(seed, Tag.REPLICATE, 999))
    T = per_trial[0].shape[0]
    slopes = []
    for _ in range(resamples):
        idx = rng.integers(0, T, size=T)
        var = [float(np.sum(np.var(m[idx], axis=0, ddof=1))) for m in per_trial]
        slopes.append(loglog_slope(ns, var))
    return [float(np.percentile(slopes, 2.5)), float(np.percentile(slopes, 97.5))]


def estimator_stats(family, x, y, N, n_values, trials, seed=0, estimators=("phe", "ihgp"),
                    constants=None, ell=None, bootstrap=200, backend_name=None):
    """Bias and variance of the batch-mean hypergradient for several ``n``.

    Trial ``t`` of participation ``n`` is the mean of chains labelled
    ``(t, 0..n-1)``.  Returns one row per (estimator, n) and per-estimator
    log-log slopes of the batch-mean variance (trace of covariance) with
    bootstrap intervals.
    """
    if trials < 2:
        raise ValueError("need at least 2 trials")
    x = family.check_x(x)
    y = family.check_y(y)
    target = expected_phe(family, x, y, N, ell)
    surrogate = exact_surrogate_gradient(family, x, y)
    if constants is None:
        constants = derive_constants(measure_family_constants(family), N)
    ns = [int(n) for n in n_values]
    out = {"rows": [], "slopes": {}, "slope_ci": {}, "expected": target.tolist(),
           "surrogate": surrogate.tolist(), "sigma_tilde_f2": constants.sigma_tilde_f2}
    for est in estimators:
        means = []
        for n in ns:
            if est == "phe":
                ks = np.repeat(np.arange(trials), n)
                slots = np.tile(np.arange(n), trials)
                H, _ = phe_chains(family, x, y, N, ks, slots, seed, ell, backend_name)
                M = H.reshape(trials, n, family.p).mean(axis=1)
            elif est == "ihgp":
                H, _ = ihgp_chains(family, x, y, N, np.arange(trials), n, seed, ell)
                M = H.mean(axis=1)
            else:
                raise ValueError(f"unknown estimator {est!r}")
            means.append(M)
            emp = M.mean(axis=0)
            se = M.std(axis=0, ddof=1) / np.sqrt(trials)
            var = float(np.sum(np.var(M, axis=0, ddof=1)))
            out["rows"].append({
                "estimator": est, "n": n, "mean": emp.tolist(), "se": se.tolist(),
                "bias_vs_expected": float(np.linalg.norm(emp - target)),
                "max_z_vs_expected": float(np.max(np.abs(emp - target) / np.maximum(se, 1e-300))),
                "bias_vs_surrogate": float(np.linalg.norm(emp - surrogate)),
                "variance": var, "variance_bound": constants.sigma_tilde_f2 / n,
            })
        variances = [r["variance"] for r in out["rows"] if r["estimator"] == est]
        if len(ns) >= 2 and min(variances) > 0:
            out["slopes"][est] = loglog_slope(ns, variances)
            if bootstrap:
                out["slope_ci"][est] = _bootstrap_slope(ns, means, bootstrap, seed)
        else:
            out["slopes"][est] = None
    return out
