"""Command-line entry point: ``fedmbo {run,sweep,stats,verify}``.

Configuration is a TOML document with a top-level ``seed`` and the sections
``[problem]``, ``[algorithm]``, ``[sweep]`` and ``[output]``.  Any key can be
overridden on the command line as ``section.key=value`` (values are parsed
as TOML literals, falling back to plain strings).

Exit codes: 0 success, 1 failed verification, 2 configuration error,
3 numeric abort (non-finite iterate).
"""

import argparse
import json
import os
import sys
from dataclasses import fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


from .checks import run_checks
from .driver import (ProblemConfig, RunConfig, build_family, family_constants, fedmbo_run,
                     initial_point, resolve_schedule)
from .constants import derive_constants
from .errors import ConfigError, NumericAbort
from .experiments import SweepSpec, load_manifest, run_sweep, write_sweep, estimator_stats
from .hypergradient import batch_statistics, phe_estimate

PROBLEM_KEYS = {f.name for f in fields(ProblemConfig)}
ALGORITHM_KEYS = {f.name for f in fields(RunConfig)} - {"problem", "seed"}
SWEEP_KEYS = {"axis", "values", "replicates", "epsilon", "window"}
OUTPUT_KEYS = {"dir", "formats", "plot"}
SECTIONS = {"problem": PROBLEM_KEYS, "algorithm": ALGORITHM_KEYS, "sweep": SWEEP_KEYS,
            "output": OUTPUT_KEYS}
DEFAULT_OUTPUT = {"dir": "fedmbo_out", "formats": ["jsonl", "csv"], "plot": False}


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_document(path=None, overrides=(), seed=None):
    """Merged configuration document: file, then dotted overrides, then ``--seed``."""
    doc = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", key="--config") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}", key="--config") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError("override must look like section.key=value", key=item)
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        value = _parse_value(raw.strip())
        if len(parts) == 1:
            doc[parts[0]] = value
        elif len(parts) == 2:
            doc.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError("overrides have at most one dot", key=dotted)
    if seed is not None:
        doc["seed"] = seed
    validate_document(doc)
    return doc


def validate_document(doc):
    for key, val in doc.items():
        if key == "seed":
            if not isinstance(val, int) or isinstance(val, bool) or val < 0:
                raise ConfigError("must be a non-negative integer", key="seed")
            continue
        if key not in SECTIONS:
            raise ConfigError("unknown section", key=key)
        if not isinstance(val, dict):
            raise ConfigError("must be a table", key=key)
        for sub in val:
            if sub not in SECTIONS[key]:
                raise ConfigError("unknown key", key=f"{key}.{sub}")


def _qualify(key):
    if key is None or "." in str(key) or key.startswith("-"):
        return key
    if key == "seed":
        return key
    if key in PROBLEM_KEYS and key not in ALGORITHM_KEYS:
        return f"problem.{key}"
    if key in ALGORITHM_KEYS:
        return f"algorithm.{key}"
    return key


def run_config_from(doc):
    try:
        return RunConfig(problem=ProblemConfig(**doc.get("problem", {})),
                         seed=doc.get("seed", 0), **doc.get("algorithm", {}))
    except ConfigError as exc:
        raise ConfigError(exc.message,
                          key=_qualify(exc.key)) from None
    except TypeError as exc:
        raise ConfigError(str(exc), key="algorithm") from None


def output_settings(doc, out):
    settings = dict(DEFAULT_OUTPUT)
    settings.update(doc.get("output", {}))
    if out is not None:
        settings["dir"] = out
    bad = set(settings["formats"]) - {"jsonl", "csv"}
    if bad:
        raise ConfigError(f"unknown formats {sorted(bad)}", key="output.formats")
    return settings


def prepare(config):
    """Build the family and validate the schedule before any output is written."""
    family = build_family(config.problem)
    base = family_constants(family, config.R, config.probe_count)
    constants = derive_constants(base, config.N, config.T, config.eta)
    try:
        resolve_schedule(config, family, constants)
    except ConfigError as exc:
        raise ConfigError(exc.message, key=_qualify(exc.key)) from None
    return family


def _emit(args, payload, text):
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def cmd_run(args):
    doc = load_document(args.config, args.overrides, args.seed)
    config = run_config_from(doc)
    settings = output_settings(doc, args.out)
    family = prepare(config)
    out_dir = settings["dir"]
    os.makedirs(out_dir, exist_ok=True)
    try:
        record = fedmbo_run(config, family, header_extra={"effective_config": doc})
    except NumericAbort as exc:
        path = os.path.join(out_dir, "abort.json")
        with open(path, "w") as fh:
            json.dump({"error": str(exc), "diagnostic": exc.diagnostic,
                       "effective_config": doc}, fh, indent=2, sort_keys=True)
        print(f"numeric abort: {exc} (diagnostic written to {path})", file=sys.stderr)
        return 3
    paths = []
    if "jsonl" in settings["formats"]:
        paths.append(os.path.join(out_dir, "run.jsonl"))
        record.to_jsonl(paths[-1])
    if "csv" in settings["formats"]:
        paths.append(os.path.join(out_dir, "run.csv"))
        record.to_csv(paths[-1])
    last = record.rows[-1]
    _emit(args, {"files": paths, "final": last},
          f"run finished: K={config.K} final stationarity {last['stationarity']:.3e}; "
          f"wrote {', '.join(paths)}")
    return 0


def _parse_values(text):
    items = [t.strip() for t in text.split(",") if t.strip()]
    return [_parse_value(t) for t in items]


def cmd_sweep(args):
    if args.manifest:
        spec, doc = load_manifest(args.manifest)
        doc = doc or {}
        settings = output_settings(doc, args.out)
    else:
        doc = load_document(args.config, args.overrides, args.seed)
        sweep = dict(doc.get("sweep", {}))
        if args.axis is not None:
            sweep["axis"] = args.axis
        if args.values is not None:
            sweep["values"] = _parse_values(args.values)
        if args.replicates is not None:
            sweep["replicates"] = args.replicates
        doc["sweep"] = sweep
        if "axis" not in sweep:
            raise ConfigError("sweep axis is required", key="sweep.axis")
        if not sweep.get("values"):
            raise ConfigError("sweep values must be a non-empty list", key="sweep.values")
        config = run_config_from(doc)
        spec = SweepSpec(sweep["axis"], tuple(sweep["values"]), int(sweep.get("replicates", 1)),
                         config, epsilon=sweep.get("epsilon"), window=int(sweep.get("window", 10)))
        settings = output_settings(doc, args.out)
    for value in spec.values:
        prepare(spec.cell_config(value, 0))

    def runner(cfg, header_extra=None):
        return fedmbo_run(cfg, header_extra={**(header_extra or {}), "effective_config": doc})

    try:
        result = run_sweep(spec, threads=args.threads, runner=runner)
    except NumericAbort as exc:
        os.makedirs(settings["dir"], exist_ok=True)
        with open(os.path.join(settings["dir"], "abort.json"), "w") as fh:
            json.dump({"error": str(exc), "diagnostic": exc.diagnostic}, fh, indent=2, sort_keys=True)
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    write_sweep(result, settings["dir"], plot=bool(settings["plot"]), effective_config=doc)
    summary = result.summary()
    lines = [f"sweep over {spec.axis}: {len(spec.values)} values x {spec.replicates} replicates"]
    for cell in summary["cells"]:
        lines.append(f"  {spec.axis}={cell['axis_value']}: mean final stationarity "
                     f"{cell['mean_final_stationarity']:.3e}")
    lines.append(f"wrote {os.path.join(settings['dir'], 'aggregate.csv')}")
    _emit(args, summary, "\n".join(lines))
    return 0


def cmd_stats(args):
    doc = load_document(args.config, args.overrides, args.seed)
    config = run_config_from(doc)
    settings = output_settings(doc, args.out)
    family = prepare(config)
    x, _ = initial_point(config, family)
    y = family.lower_solution(x)
    n_values = [int(v) for v in _parse_values(args.n_values)]
    if not n_values or min(n_values) < 1:
        raise ConfigError("need positive participation levels", key="--n-values")
    if args.trials < 2:
        raise ConfigError("need at least 2 trials", key="--trials")
    base = family_constants(family, config.R, config.probe_count)
    constants = derive_constants(base, config.N, config.T, config.eta)
    stats = estimator_stats(family, x, y, config.N, n_values, args.trials, seed=config.seed,
                            estimators=tuple(args.estimators.split(",")), constants=constants,
                            ell=config.neumann_l, bootstrap=args.bootstrap,
                            backend_name=config.backend)
    batch = phe_estimate(family, x, y, config.N, config.n, config.seed, 0, config.neumann_l,
                         config.backend)
    stats["example_batch"] = batch_statistics(batch)
    stats["effective_config"] = doc
    os.makedirs(settings["dir"], exist_ok=True)
    path = os.path.join(settings["dir"], "stats.json")
    with open(path, "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    lines = [f"{'estimator':<10}{'n':>4}{'variance':>14}{'bound':>14}{'bias':>12}"]
    for row in stats["rows"]:
        lines.append(f"{row['estimator']:<10}{row['n']:>4}{row['variance']:>14.4e}"
                     f"{row['variance_bound']:>14.4e}{row['bias_vs_expected']:>12.2e}")
    for est, slope in stats["slopes"].items():
        lines.append(f"{est} variance slope: {slope}")
    lines.append(f"wrote {path}")
    _emit(args, stats, "\n".join(lines))
    return 0


def cmd_verify(args):
    results = run_checks(l_g1=args.l_g1, seed=args.seed or 0)
    ok = all(r["passed"] for r in results)
    width = max(len(r["check"]) for r in results)
    lines = [f"{'check':<{width}}  result  detail"]
    for r in results:
        lines.append(f"{r['check']:<{width}}  {'PASS' if r['passed'] else 'FAIL':<6}  {r['detail']}")
    lines.append("all checks passed" if ok else "some checks FAILED")
    _emit(args, {"passed": ok, "checks": results}, "\n".join(lines))
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="fedmbo", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for independent cells")
    common.add_argument("--out", help="output directory (overrides [output].dir)")
    common.add_argument("--json", action="store_true", help="machine-readable stdout")
    common.add_argument("--backend", choices=("auto", "compiled", "python"),
                        help="kernel backend (overrides algorithm.backend)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", parents=[common], help="execute one run")
    p_run.add_argument("overrides", nargs="*", help="section.key=value overrides")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", parents=[common], help="sweep one axis with replicates")
    p_sweep.add_argument("overrides", nargs="*")
    p_sweep.add_argument("--axis", help="n, m, sigma_het, N, estimator or inner")
    p_sweep.add_argument("--values", help="comma-separated axis values")
    p_sweep.add_argument("--replicates", type=int)
    p_sweep.add_argument("--manifest", help="replay a sweep from its manifest.json")
    p_sweep.set_defaults(func=cmd_sweep)

    p_stats = sub.add_parser("stats", parents=[common], help="hypergradient estimator statistics")
    p_stats.add_argument("overrides", nargs="*")
    p_stats.add_argument("--n-values", default="1,2,4,8,16")
    p_stats.add_argument("--trials", type=int, default=1000)
    p_stats.add_argument("--estimators", default="phe,ihgp")
    p_stats.add_argument("--bootstrap", type=int, default=200)
    p_stats.set_defaults(func=cmd_stats)

    p_verify = sub.add_parser("verify", parents=[common], help="fast oracle self-checks")
    p_verify.add_argument("--l-g1", type=float, dest="l_g1",
                          help="override the Neumann scale (negative control)")
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "backend", None):
        args.overrides = list(getattr(args, "overrides", [])) + [f"algorithm.backend={json.dumps(args.backend)}"]
    if args.threads is not None and args.threads < 1:
        print("config error: --threads: must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
