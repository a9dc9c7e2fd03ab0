"""The federated bilevel outer loop and its run records.

Each outer round ``k`` warm-starts the lower solver from ``y^k``, runs the
configured inner solver at ``x^k`` to get ``y^{k+1}``, asks the configured
estimator for a batch of hypergradient estimates at ``(x^k, y^{k+1})`` and
steps ``x^{k+1} = x^k - alpha_k * mean(batch)``.  Metrics use the exact
oracles of the analytic family; the algorithm itself only sees stochastic
oracles.
"""

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache

import numpy as np

from . import backend
from .constants import derive_constants, measure_family_constants, step_schedule
from .errors import ConfigError, NumericAbort
from .hypergradient import ihgp_estimate, phe_estimate
from .inner_solver import InnerConfig, check_beta, local_sgd_lower, minibatch_sgd_lower
from .problems import (QuadraticFamily, family_fingerprint, generate_hyperrep_family,
                       generate_quadratic_family, load_family)
from .sampling import Tag, derive_seed

ROW_COLUMNS = ("k", "alpha", "stationarity", "lower_error", "tracking_error", "phi",
               "comm_rounds", "upper_samples", "lower_samples")


@dataclass(frozen=True)
class ProblemConfig:
    """Where the family comes from: a generator with parameters, or a snapshot file."""

    kind: str = "quadratic"
    m: int = 10
    p: int = 4
    q: int = 4
    samples_per_client: int = 10
    mu_g: float = 1.0
    l_g1: float = 4.0
    sigma_het: float = 1.0
    seed: int = 0
    noise: float = 0.5
    hess_het: float = 0.5
    hess_margin: float = 0.25
    hess_noise: float = None
    v_scale: float = 1.0
    cross_scale: float = 1.0
    upper_het: float = 1.0
    d_in: int = 8
    d_rep: int = 4
    rho: float = 1.0
    val_fraction: float = 0.5
    snapshot: str = None

    def validate(self):
        if self.kind not in ("quadratic", "hyperrep", "snapshot"):
            raise ConfigError("kind must be quadratic, hyperrep or snapshot", key="kind")
        if self.kind == "snapshot" and not self.snapshot:
            raise ConfigError("snapshot kind needs a snapshot path", key="snapshot")
        for name in ("m", "p", "q", "samples_per_client", "d_in", "d_rep"):
            if getattr(self, name) < 1:
                raise ConfigError("must be at least 1", key=name)
        if not 0 < self.mu_g <= self.l_g1:
            raise ConfigError("need 0 < mu_g <= l_g1", key="mu_g")
        if self.sigma_het < 0:
            raise ConfigError("must be non-negative", key="sigma_het")
        if self.rho <= 0:
            raise ConfigError("must be positive", key="rho")
        if self.kind == "hyperrep" and self.samples_per_client < 2:
            raise ConfigError("hyperrep needs at least 2 samples per client", key="samples_per_client")
        if not 0 <= self.hess_margin <= 0.5:
            raise ConfigError("must lie in [0, 0.5]", key="hess_margin")
        if self.noise < 0:
            raise ConfigError("must be non-negative", key="noise")
        if self.upper_het < 0:
            raise ConfigError("must be non-negative", key="upper_het")


@lru_cache(maxsize=64)
def build_family(problem):
    problem.validate()
    if problem.kind == "snapshot":
        return load_family(problem.snapshot)
    if problem.kind == "hyperrep":
        return generate_hyperrep_family(problem.m, problem.d_in, problem.d_rep,
                                        problem.samples_per_client, problem.rho,
                                        problem.sigma_het, problem.seed, noise=problem.noise,
                                        val_fraction=problem.val_fraction)
    return generate_quadratic_family(problem.m, problem.p, problem.q, problem.samples_per_client,
                                     problem.mu_g, problem.l_g1, problem.sigma_het, problem.seed,
                                     noise=problem.noise, hess_het=problem.hess_het,
                                     hess_margin=problem.hess_margin, hess_noise=problem.hess_noise,
                                     v_scale=problem.v_scale, cross_scale=problem.cross_scale,
                                     upper_het=problem.upper_het)


_CONST_CACHE = {}


def family_constants(family, R, probe_count):
    key = (id(family), float(R), int(probe_count))
    hit = _CONST_CACHE.get(key)
    if hit is None or hit[0] is not family:
        hit = (family, measure_family_constants(family, R=R, probe_count=probe_count))
        _CONST_CACHE[key] = hit
    return hit[1]


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run.  ``alpha``/``beta`` override the schedule."""

    problem: ProblemConfig = field(default_factory=ProblemConfig)
    K: int = 100
    T: int = 5
    S: int = 1
    N: int = 10
    n: int = 4
    inner: str = "minibatch"
    estimator: str = "phe"
    T_local: int = None
    alpha_hat3: float = None
    alpha: float = None
    beta: float = None
    eta: float = None
    neumann_l: float = None
    replace: bool = True
    seed: int = 0
    cadence: int = 1
    R: float = 10.0
    probe_count: int = 8
    x0_mode: str = "auto"
    x0: tuple = None
    x0_noise: float = 0.0
    y0_mode: str = "zeros"
    backend: str = "auto"

    def __post_init__(self):
        if isinstance(self.problem, dict):
            object.__setattr__(self, "problem", ProblemConfig(**self.problem))
        if self.x0 is not None:
            object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        self.validate()

    def validate(self):
        for name in ("K", "T", "S", "N", "n", "cadence", "probe_count"):
            if getattr(self, name) < 1:
                raise ConfigError("must be at least 1", key=name)
        if self.inner not in ("minibatch", "local_sgd"):
            raise ConfigError("must be 'minibatch' or 'local_sgd'", key="inner")
        if self.estimator not in ("phe", "ihgp"):
            raise ConfigError("must be 'phe' or 'ihgp'", key="estimator")
        if self.T_local is not None and self.T_local < 0:
            raise ConfigError("must be non-negative", key="T_local")
        for name in ("alpha_hat3", "alpha", "beta", "eta", "neumann_l"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ConfigError("must be positive", key=name)
        if self.beta is not None and self.alpha is None:
            raise ConfigError("an explicit beta needs an explicit alpha", key="beta")
        if self.R <= 0:
            raise ConfigError("must be positive", key="R")
        if self.x0_mode not in ("auto", "zeros", "optimum"):
            raise ConfigError("must be auto, zeros or optimum", key="x0_mode")
        if self.x0_noise < 0:
            raise ConfigError("must be non-negative", key="x0_noise")
        if self.y0_mode not in ("zeros", "exact"):
            raise ConfigError("must be zeros or exact", key="y0_mode")
        if not self.replace and self.n > self.problem.m:
            raise ConfigError("sampling without replacement needs n <= m", key="n")
        try:
            backend.resolve_name(self.backend)
        except ValueError as exc:
            raise ConfigError(str(exc), key="backend") from None
        self.problem.validate()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        prob = data.pop("problem", {})
        known = {f.name for f in fields(cls)}
        bad = set(data) - known
        if bad:
            raise ConfigError("unknown key", key=sorted(bad)[0])
        return cls(problem=ProblemConfig(**prob), **data)

    def with_updates(self, **kw):
        prob = kw.pop("problem", None)
        out = replace(self, **kw)
        if prob:
            out = replace(out, problem=replace(self.problem, **prob))
        return out


@dataclass
class RunRecord:
    header: dict
    rows: list
    wall_times: list = field(default_factory=list)

    def column(self, name):
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    def to_jsonl(self, path, include_time=False):
        with open(path, "w") as fh:
            fh.write(json.dumps({"header": self.header}, sort_keys=True) + "\n")
            for i, row in enumerate(self.rows):
                out = dict(row)
                if include_time and i < len(self.wall_times):
                    out["wall_time"] = self.wall_times[i]
                fh.write(json.dumps(out, sort_keys=True) + "\n")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(ROW_COLUMNS)
            for row in self.rows:
                writer.writerow(["" if row[c] is None else repr(row[c]) for c in ROW_COLUMNS])

    @classmethod
    def from_jsonl(cls, path):
        with open(path) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        return cls(lines[0]["header"], lines[1:])


def evaluate_stationarity(family, x):
    """Squared norm of the exact hypergradient at ``x``."""
    g = family.hypergradient(x)
    return float(g @ g)


def initial_point(config, family):
    if config.x0 is not None:
        x0 = family.check_x(np.array(config.x0, dtype=float))
    elif config.x0_mode == "optimum":
        if not isinstance(family, QuadraticFamily):
            raise ConfigError("x0_mode=optimum needs a quadratic family", key="x0_mode")
        x0 = family.minimizer()
    elif config.x0_mode == "zeros":
        x0 = np.zeros(family.p)
    else:
        x0 = family.default_x0()
    if config.x0_noise > 0:
        rng = np.random.default_rng(derive_seed(config.seed, Tag.START))
        x0 = x0 + config.x0_noise * rng.standard_normal(family.p)
    y0 = family.lower_solution(x0) if config.y0_mode == "exact" else np.zeros(family.q)
    return x0, y0


def resolve_schedule(config, family, constants):
    """Constant ``(alpha, beta)`` used in every round, validated against the inner cap."""
    if config.alpha is not None:
        alpha = config.alpha
        beta = config.beta if config.beta is not None else constants.beta_bar * alpha / config.T
    else:
        alphas, betas = step_schedule(constants, config.K, config.n, config.T, config.alpha_hat3)
        alpha, beta = float(alphas[0]), float(betas[0])
    check_beta(beta, family.l_g1)
    return float(alpha), float(beta)


def _finite(*arrays):
    return all(np.all(np.isfinite(a)) for a in arrays)


def fedmbo_run(config, family=None, header_extra=None):
    """Execute one run; deterministic given ``config`` (and ``family``)."""
    if family is None:
        family = build_family(config.problem)
    base = family_constants(family, config.R, config.probe_count)
    constants = derive_constants(base, config.N, config.T, config.eta)
    alpha, beta = resolve_schedule(config, family, constants)
    inner_cfg = InnerConfig(config.T, config.S, config.n, beta, config.replace)
    T_local = config.T if config.T_local is None else config.T_local
    x, y = initial_point(config, family)
    ell = config.neumann_l
    header = {
        "format": "fedmbo-run", "version": 1, "config": config.to_dict(),
        "constants": constants.to_dict(), "family": {**family.meta(), "fingerprint": family_fingerprint(family)},
        "schedule": {"alpha": alpha, "beta": beta}, "columns": list(ROW_COLUMNS),
    }
    if header_extra:
        header.update(header_extra)
    totals = {"comm_rounds": 0, "upper_samples": 0, "lower_samples": 0}
    rows, times = [], []
    start = time.perf_counter()

    def snapshot(k, x, y, prev_x, a_k):
        ystar = family.lower_solution(x)
        yprev = family.lower_solution(prev_x) if prev_x is not None else ystar
        grad = family.hypergradient(x)
        row = {"k": k, "alpha": a_k, "stationarity": float(grad @ grad),
               "lower_error": float(np.sum((y - yprev) ** 2)),
               "tracking_error": float(np.sum((y - ystar) ** 2)),
               "phi": family.upper_value(x, ystar), **totals}
        return row

    def record(k, x, y, prev_x, a_k):
        rows.append(snapshot(k, x, y, prev_x, a_k))
        times.append(time.perf_counter() - start)

    # overflow is detected explicitly below and turned into NumericAbort
    with np.errstate(over="ignore", invalid="ignore"):
        record(0, x, y, None, alpha if config.K > 0 else None)
        for k in range(config.K):
            if config.inner == "minibatch":
                res = minibatch_sgd_lower(family, x, y, inner_cfg, config.seed, k, config.backend)
            else:
                res = local_sgd_lower(family, x, y, T_local, config.S, config.n, beta, config.seed, k,
                                      rounds=1, replace=config.replace)
            y_new = res.y
            if config.estimator == "phe":
                batch = phe_estimate(family, x, y_new, config.N, config.n, config.seed, k, ell,
                                     config.backend)
            else:
                batch = ihgp_estimate(family, x, y_new, config.N, config.n, config.seed, k, ell)
            h = batch.mean
            x_new = x - alpha * h
            totals["comm_rounds"] += res.comm_rounds + batch.comm_rounds
            totals["upper_samples"] += batch.upper_samples
            totals["lower_samples"] += res.samples_used + batch.lower_samples
            if not _finite(y_new, h, x_new):
                diag = {"k": k + 1, "alpha": None, "stationarity": None, "lower_error": None,
                        "tracking_error": None, "phi": None, **totals, "abort": "non-finite iterate",
                        "x_finite": bool(np.all(np.isfinite(x_new))),
                        "y_finite": bool(np.all(np.isfinite(y_new)))}
                raise NumericAbort(f"non-finite iterate at round {k + 1}", diagnostic=diag)
            last = k + 1 == config.K
            if (k + 1) % config.cadence == 0 or last:
                record(k + 1, x_new, y_new, x, None if last else alpha)
            x, y = x_new, y_new
    return RunRecord(header, rows, times)


def lyapunov(record):
    """``Phi(x^k) + (M_f / L_y) ||y^k - y*(x^k)||^2`` for every row."""
    cs = record.header["constants"]
    return record.column("phi") + cs["M_f"] / cs["L_y"] * record.column("tracking_error")
