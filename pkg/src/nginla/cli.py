"""Batch command-line front end.

Commands::

    nginla fit --config fit.json [--out DIR] [--strategy laplace] [--compare-strategies]
    nginla simulate survival|tmm --out DIR [--seed N] [--param key=value ...]
    nginla compare --config fit.json [--mcmc-iters N]
    nginla study --config study.json [--threads N]

Exit codes: 0 success, 2 configuration error, 3 inference or study failure,
4 sampler failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
import time
from dataclasses import replace
from json.decoder import scanstring

import jsonschema
import numpy as np
from scipy.stats import gaussian_kde

from . import __version__, bundled, sim
from .diagnostics import skld
from .errors import DisjointSupport, NginlaError
from .inla import InlaOptions, fit
from .marginals import PosteriorMarginal
from .mcmc import ChainConfig, mcse_mean, run_chain
from .model import HyperPrior
from .near_gaussian import CorrectionFamily, extend_model

log = logging.getLogger("nginla")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFERENCE = 3
EXIT_ORACLE = 4
SCHEMA_VERSION = 1
STUDY_FAILURE_LIMIT = 0.2

_PRIOR_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["family", "params"],
    "properties": {
        "family": {"enum": ["gamma", "gaussian"]},
        "params": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
    },
}

FIT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "model", "data"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "model": {"enum": list(bundled.BUILDERS)},
        "data": {"type": "string"},
        "priors": {"type": "object", "additionalProperties": _PRIOR_SCHEMA},
        "strategy": {"enum": ["gaussian", "laplace"]},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "step": {"type": "number", "exclusiveMinimum": 0},
                "log_drop": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "baseline_log_precision": {"type": "number"},
        "fixed_precision": {"type": "number", "exclusiveMinimum": 0},
        "link_precision": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
        "mcmc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iterations": {"type": "integer", "minimum": 1},
                "burn_in": {"type": "integer", "minimum": 0},
                "thinning": {"type": "integer", "minimum": 1},
                "proposal_scale": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}

_CELL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["p_b", "p_e", "f"],
    "properties": {
        "p_b": {"type": "number", "minimum": 0, "maximum": 1},
        "p_e": {"type": "number", "minimum": 0, "maximum": 1},
        "f": {"type": "number", "minimum": 1},
    },
}

STUDY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "cells": {"type": "array", "items": _CELL_SCHEMA, "minItems": 1},
        "design": {"enum": ["full"]},
        "reps": {"type": "integer", "minimum": 2},
        "seed": {"type": "integer", "minimum": 0},
        "scale": {"enum": ["sd", "var"]},
        "output": {"type": "string"},
    },
    "oneOf": [{"required": ["cells"]}, {"required": ["design"]}],
}

DATA_COLUMNS = {
    "survival-gamma-frailty": ("group", "covariate", "time", "event"),
    "t-mixed-effects": ("group", "covariate", "y"),
    "gaussian-lgm": ("group", "covariate", "y"),
}

CORRECTION_KIND = {"survival-gamma-frailty": "log-gamma-frailty", "t-mixed-effects": "student-t"}


class ConfigError(Exception):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


# --- configuration ---------------------------------------------------------------

_WS = re.compile(r"[ \t\n\r]*")
_SCALAR = re.compile(r"-?(?:0|[1-9]\d*)(?:\.\d+)?(?:[eE][-+]?\d+)?|true|false|null")


def _line_map(text):
    """Line number of every value in a JSON document, keyed by its path tuple."""
    lines = {}

    def line_at(pos):
        return text.count("\n", 0, pos) + 1

    def skip(pos):
        return _WS.match(text, pos).end()

    def value(pos, path):
        pos = skip(pos)
        lines[path] = line_at(pos)
        ch = text[pos]
        if ch == "{":
            pos = skip(pos + 1)
            if text[pos] == "}":
                return pos + 1
            while True:
                pos = skip(pos)
                key_pos = pos
                key, pos = scanstring(text, pos + 1)
                pos = skip(pos) + 1  # colon
                lines[path + (key,)] = line_at(key_pos)
                end = value(pos, path + (key,))
                lines[path + (key,)] = line_at(key_pos)
                pos = skip(end)
                if text[pos] == "}":
                    return pos + 1
                pos += 1
        if ch == "[":
            pos = skip(pos + 1)
            if text[pos] == "]":
                return pos + 1
            k = 0
            while True:
                pos = skip(value(pos, path + (k,)))
                k += 1
                if text[pos] == "]":
                    return pos + 1
                pos += 1
        if ch == '"':
            return scanstring(text, pos + 1)[1]
        return _SCALAR.match(text, pos).end()

    value(0, ())
    return lines


def _error_line(text, path):
    lines = _line_map(text)
    path = tuple(path)
    while path not in lines and path:
        path = path[:-1]
    return lines.get(path, 1)


def load_config(path, schema):
    """Parse and validate a JSON config; errors carry the offending line."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            if extra:
                path = path + [extra[0]]
                field = ".".join(map(str, path))
                raise ConfigError(f"{field}: unknown key", _error_line(text, path))
        field = ".".join(map(str, path)) or "<root>"
        raise ConfigError(f"{field}: {err.message}", _error_line(text, path))
    cfg["_dir"] = os.path.dirname(os.path.abspath(path))
    cfg["_text"] = text
    return cfg


def _echo(cfg):
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def read_table(path, columns):
    """Columns of a headed CSV file as float arrays."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"data: cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise ConfigError(f"data: {path} is empty")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in columns if c not in header]
    if missing:
        raise ConfigError(f"data: {path} lacks column(s) {', '.join(missing)}")
    body = [r for r in rows[1:] if r]
    if not body:
        raise ConfigError(f"data: {path} has no rows")
    out = {}
    for c in columns:
        k = header.index(c)
        try:
            out[c] = np.array([float(r[k]) for r in body])
        except (ValueError, IndexError):
            raise ConfigError(f"data: column {c} of {path} is not numeric") from None
    return out


def build_model(cfg):
    """The model the config describes, with prior overrides and the chosen baseline."""
    name = cfg["model"]
    data_path = os.path.join(cfg["_dir"], cfg["data"])
    d = read_table(data_path, DATA_COLUMNS[name])
    kw = {}
    for key in ("fixed_precision", "link_precision"):
        if key in cfg:
            kw[key] = cfg[key]
    if name == "survival-gamma-frailty":
        spec = bundled.survival_model(d["time"], d["covariate"], d["group"], event=d["event"], **kw)
    else:
        spec = bundled.BUILDERS[name](d["y"], d["covariate"], d["group"], **kw)
    priors = cfg.get("priors", {})
    known = {h.name: h for h in spec.hypers}
    for key in priors:
        if key not in known:
            raise ConfigError(f"priors.{key}: model has no hyperparameter {key!r}",
                              _error_line(cfg["_text"], ["priors", key]))
    if priors:
        hypers = []
        for h in spec.hypers:
            p = priors.get(h.name)
            if p is None:
                hypers.append(h)
                continue
            try:
                hypers.append(HyperPrior(h.name, h.support, p["family"], tuple(p["params"]), h.shift))
            except NginlaError as exc:
                raise ConfigError(f"priors.{h.name}: {exc}", _error_line(cfg["_text"], ["priors", h.name])) from None
        spec = replace(spec, hypers=tuple(hypers))
    if spec.has_non_gaussian() and "baseline_log_precision" in cfg:
        fam = CorrectionFamily(CORRECTION_KIND[name], baseline_log_precision=cfg["baseline_log_precision"])
        return spec, extend_model(spec, fam)
    return spec, spec


def _options(cfg, args):
    grid = cfg.get("grid", {})
    strategy = args.strategy or cfg.get("strategy", "laplace")
    return InlaOptions(
        strategy=strategy,
        grid_step=grid.get("step", 0.75),
        log_drop=grid.get("log_drop", 2.5),
        threads=max(1, args.threads),
        compare_strategies=bool(args.compare_strategies),
    )


def _out_dir(cfg, args):
    out = args.out or (os.path.join(cfg["_dir"], cfg["output"]) if "output" in cfg else None)
    if out is None:
        raise ConfigError("output: no output directory (use --out or the 'output' key)")
    os.makedirs(out, exist_ok=True)
    return out


def _seed(cfg, args):
    return int(args.seed) if args.seed is not None else int(cfg.get("seed", 0))


# --- outputs -----------------------------------------------------------------------


def _num(v):
    return repr(float(v))


def _summary_row(m: PosteriorMarginal):
    mean, sd, lo, med, hi = m.summary()
    return {"mean": mean, "sd": sd, "q0.025": lo, "q0.5": med, "q0.975": hi}


def write_marginals(path, label, marginals):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([label, "abscissa", "density"])
        for name, m in marginals.items():
            for x, f in zip(m.abscissae, m.densities):
                w.writerow([name, _num(x), _num(f)])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, allow_nan=True)
        fh.write("\n")


def _fit_summary(cfg, seed, res):
    report = res.report.to_dict()
    return {
        "engine": "nginla",
        "version": __version__,
        "config": _echo(cfg),
        "seed": seed,
        "model": cfg["model"],
        "strategy": res.strategy,
        "grid_size": report["grid_size"],
        "eeff": report["eeff_mean"],
        "timings": res.timings,
        "hyperparameters": {k: _summary_row(m) for k, m in res.hyper.items()},
        "latent": {k: _summary_row(m) for k, m in res.latent.items()},
        "report": report,
    }


def _run_fit(cfg, args):
    seed = _seed(cfg, args)
    out = _out_dir(cfg, args)
    _, model = build_model(cfg)
    opts = _options(cfg, args)
    res = fit(model, opts)
    write_marginals(os.path.join(out, "marginals_latent.csv"), "component", res.latent)
    write_marginals(os.path.join(out, "marginals_hyper.csv"), "hyperparameter", res.hyper)
    summary = _fit_summary(cfg, seed, res)
    _write_json(os.path.join(out, "summary.json"), summary)
    return res, out, seed


def _inference_failure(exc):
    theta = getattr(exc, "theta", None)
    where = "" if theta is None else f" at theta = {np.array2string(np.asarray(theta), precision=6)}"
    log.error("inference failed%s: %s", where, exc)
    return EXIT_INFERENCE


def cmd_fit(args) -> int:
    try:
        cfg = load_config(args.config, FIT_SCHEMA)
        _run_fit(cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NginlaError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _inference_failure(exc)
    return EXIT_OK


# --- simulate ------------------------------------------------------------------------

SIM_PARAMS = {
    "survival": {"n_groups": int, "m": int, "beta0": float, "beta1": float, "kappa": float},
    "tmm": {"p_b": float, "p_e": float, "f": float, "scale": str, "rep": int},
}


def _parse_params(kind, items):
    types = SIM_PARAMS[kind]
    out = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep or key not in types:
            raise ConfigError(f"--param {item!r}: expected key=value with key in {sorted(types)}")
        try:
            out[key] = types[key](val)
        except ValueError:
            raise ConfigError(f"--param {key}: cannot parse {val!r}") from None
    return out


def _write_rows(path, header, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([str(int(v)) if isinstance(v, (int, np.integer)) else _num(v) for v in row])


def simulate_to_files(kind, params, seed, out):
    """Write ``<kind>.csv`` and ``<kind>.truth.json`` under ``out``; returns the CSV path."""
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, f"{kind}.csv")
    if kind == "survival":
        d = sim.simulate_survival(seed=seed, **params)
        _write_rows(csv_path, ("group", "unit", "covariate", "time", "event"),
                    (d.group, d.unit, d.covariate, d.times, d.event.astype(np.int64)))
        n_groups, m = params.get("n_groups", 100), params.get("m", 10)
        truth = {"kind": kind, "seed": seed, "n_groups": n_groups, "m": m,
                 "beta0": d.beta[0], "beta1": d.beta[1], "kappa": d.kappa,
                 "log_frailty": [float(v) for v in np.log(d.frailty)]}
    else:
        rep = params.pop("rep", 0)
        cell = sim.ContaminationCell(params.get("p_b", 0.0), params.get("p_e", 0.0), params.get("f", 2.0),
                                     seed=seed, scale=params.get("scale", "sd"))
        d = sim.simulate_tmm(cell, seed, rep)
        _write_rows(csv_path, ("group", "unit", "covariate", "y"), (d.group, d.unit, d.covariate, d.y))
        truth = {"kind": kind, "seed": seed, "rep": rep, "p_b": cell.p_b, "p_e": cell.p_e, "f": cell.f,
                 "scale": cell.scale, "beta0": sim.TMM_TRUTH["beta0"], "beta1": sim.TMM_TRUTH["beta1"],
                 "tau_e": sim.TMM_TRUTH["tau_e"], "tau_b": sim.TMM_TRUTH["tau_b"],
                 "b": [float(v) for v in d.b]}
    _write_json(os.path.join(out, f"{kind}.truth.json"), truth)
    return csv_path


def cmd_simulate(args) -> int:
    try:
        if args.out is None:
            raise ConfigError("--out is required")
        params = _parse_params(args.kind, args.param)
        seed = 0 if args.seed is None else int(args.seed)
        simulate_to_files(args.kind, params, seed, args.out)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


# --- compare ---------------------------------------------------------------------------


def _kde_marginal(samples, name, n=201):
    s = np.asarray(samples, dtype=float)
    sd = float(np.std(s))
    if not sd > 0:
        raise NginlaError(f"{name}: chain did not move")
    lo, hi = s.min() - 2 * sd, s.max() + 2 * sd
    x = np.linspace(lo, hi, n)
    return PosteriorMarginal(x, gaussian_kde(s)(x), name)


def _chain_config(cfg, args, seed):
    m = dict(cfg.get("mcmc", {}))
    if args.mcmc_iters is not None:
        if args.mcmc_iters < 1:
            raise ConfigError("--mcmc-iters must be positive")
        m["iterations"] = args.mcmc_iters
    iters = m.get("iterations", ChainConfig.iterations)
    burn = m.get("burn_in", min(ChainConfig.burn_in, iters // 10))
    try:
        return ChainConfig(
            iterations=iters, burn_in=burn, thinning=m.get("thinning", ChainConfig.thinning),
            proposal_scale=m.get("proposal_scale", ChainConfig.proposal_scale), seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"mcmc: {exc}") from None


def cmd_compare(args) -> int:
    try:
        cfg = load_config(args.config, FIT_SCHEMA)
        seed = _seed(cfg, args)
        chain_cfg = _chain_config(cfg, args, seed)
        res, out, seed = _run_fit(cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NginlaError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _inference_failure(exc)
    spec, _ = build_model(cfg)
    try:
        t0 = time.perf_counter()
        chain = run_chain(spec, chain_cfg)
        t_chain = time.perf_counter() - t0
        hyper_samples = chain.hyper_original(spec)
        deltas, divergences, mcse = {}, {}, {}
        for name, m in res.latent.items():
            if name not in chain.latent_names:
                continue
            s = chain.column(name)
            deltas[name] = m.mean - float(np.mean(s))
            mcse[name] = mcse_mean(s)
            divergences[name] = skld(m, _kde_marginal(s, name))
        for j, name in enumerate(chain.hyper_names):
            if name not in res.hyper:
                continue
            s = hyper_samples[:, j]
            deltas[name] = res.hyper[name].mean - float(np.mean(s))
            mcse[name] = mcse_mean(s)
            divergences[name] = skld(res.hyper[name], _kde_marginal(s, name))
    except DisjointSupport as exc:
        log.error("sampler output does not overlap the approximation: %s", exc)
        return EXIT_ORACLE
    except (NginlaError, FloatingPointError) as exc:
        log.error("sampler failed: %s", exc)
        return EXIT_ORACLE
    largest = max(deltas, key=lambda k: abs(deltas[k])) if deltas else None
    _write_json(os.path.join(out, "compare.json"), {
        "engine": "nginla",
        "version": __version__,
        "seed": seed,
        "model": cfg["model"],
        "strategy": res.strategy,
        "mcmc": {"iterations": chain_cfg.iterations, "burn_in": chain_cfg.burn_in,
                 "thinning": chain_cfg.thinning, "kept": int(chain.latent.shape[0]),
                 "acceptance_mean": float(np.mean(chain.acceptance))},
        "mean_delta": deltas,
        "mcse": mcse,
        "max_abs_delta": None if largest is None else {"component": largest, "value": abs(deltas[largest])},
        "skld": divergences,
        "timings": {"inla": res.timings["total"], "mcmc": t_chain},
    })
    return EXIT_OK


# --- study -----------------------------------------------------------------------------


def cmd_study(args) -> int:
    try:
        cfg = load_config(args.config, STUDY_SCHEMA)
        seed = _seed(cfg, args)
        reps = int(cfg.get("reps", 50))
        scale = cfg.get("scale", "sd")
        if "cells" in cfg:
            cells = [sim.ContaminationCell(c["p_b"], c["p_e"], c["f"], reps, seed, scale) for c in cfg["cells"]]
        else:
            cells = sim.full_design(reps, seed, scale)
        out = _out_dir(cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    result = sim.run_contamination_study(cells, reps=reps, seed=seed, threads=max(1, args.threads))
    result.write_csv(os.path.join(out, "study.csv"))
    worst = max(result.failures.values()) / reps if result.failures else 0.0
    if worst > STUDY_FAILURE_LIMIT:
        log.error("%.0f%% of replications failed in at least one cell", 100 * worst)
        return EXIT_INFERENCE
    return EXIT_OK


# --- entry point -----------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="nginla", description="INLA with near-Gaussian latent fields.")
    p.add_argument("--version", action="version", version=f"nginla {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="random seed (overrides the config)")
        sp.add_argument("--threads", type=int, default=1, help="maximum worker threads")

    f = sub.add_parser("fit", help="fit a model described by a config file")
    common(f)
    f.add_argument("--strategy", choices=("gaussian", "laplace"))
    f.add_argument("--compare-strategies", action="store_true", help="also compute the other flavor and its SKLD")
    f.set_defaults(func=cmd_fit, mcmc_iters=None)

    s = sub.add_parser("simulate", help="write a simulated dataset and its true parameters")
    s.add_argument("kind", choices=tuple(SIM_PARAMS))
    common(s, config=False)
    s.add_argument("--param", action="append", metavar="KEY=VALUE", help="simulator parameter")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="fit and check the result against the sampler")
    common(c)
    c.add_argument("--strategy", choices=("gaussian", "laplace"))
    c.add_argument("--compare-strategies", action="store_true")
    c.add_argument("--mcmc-iters", type=int, help="sampler iterations")
    c.set_defaults(func=cmd_compare)

    st = sub.add_parser("study", help="run the contamination study")
    common(st)
    st.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
