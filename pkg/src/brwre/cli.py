"""Command-line entry point.

Every subcommand reads one INI config, runs one experiment and writes its
outputs into ``--out`` atomically: files are assembled in a sibling
temporary directory that is renamed into place only on success.  Data files
(CSV, ``summary.json``, ``config.ini``) depend on (config, seed) alone; the
wall-clock timestamp and worker count live in ``meta.json``.

Exit codes: 0 ok, 2 config error, 3 resource limit, 4 internal error.
"""

import argparse
import configparser
import csv
from dataclasses import dataclass, fields, replace
import datetime
import json
import logging
import math
import os
import shutil
import sys
import tempfile
import time

import numpy as np

from . import __version__
from ._parallel import default_workers, map_replicas
from ._rng import replica_streams
from .brwre_sim import CSV_HEADER, extinction_estimate, run_trajectory
from .dpre import coupling_identity_check, dpre_clt_criterion, finite_t_comparison, strong_disorder_slope
from .environment import EnvironmentField, classify_phase, env_moments, parse_model
from .errors import ConfigError, ResourceLimitError
from .experiments import (ConvergenceTable, clt_l2_experiment, conditional_clt_experiment,
                          exact_clt_error, overlap_scaling_experiment, parse_test_function)
from .eta import EtaField
from .lattice_walk import DEFAULT_CELL_BUDGET, return_probability, t_step_distribution
from .moments_exact import (PAIR_CELL_BUDGET, annealed_second_moment, normalized_second_moments,
                            overlap_bound_series_all, quenched_log_totals, second_moment_envelope)
from .oracle import brute_force_oracle

EXIT_OK, EXIT_CONFIG, EXIT_RESOURCE, EXIT_INTERNAL = 0, 2, 3, 4
COMMANDS = ("simulate", "moments", "phase", "clt", "overlap", "dpre", "extinction")
SCHEMA_VERSION = 1

log = logging.getLogger("brwre")


@dataclass(frozen=True)
class ExperimentConfig:
    dimension: int = 1
    model: str = "point(2)"
    horizons: tuple = (10,)
    replicas: int = 1
    seed: int = 0
    max_cells: int = DEFAULT_CELL_BUDGET
    pair_cells: int = PAIR_CELL_BUDGET
    max_horizon: int = 100_000
    test_function: str = "constant(1)"
    epsilon: tuple = (0.1,)
    route: str = "polymer"
    confidence: float = 0.99
    population_cap: int = 100_000
    sw_samples: int = 4000


# section and value type for every key
_SCHEMA = {
    "dimension": ("run", int), "horizons": ("run", "ints"), "replicas": ("run", int),
    "seed": ("run", int), "model": ("model", str), "max_cells": ("budget", int),
    "pair_cells": ("budget", int), "max_horizon": ("budget", int),
    "test_function": ("experiment", str), "epsilon": ("experiment", "floats"),
    "route": ("experiment", str), "confidence": ("experiment", float),
    "population_cap": ("experiment", int), "sw_samples": ("experiment", int),
}
_SECTIONS = ("run", "model", "budget", "experiment")


def _convert(kind, text):
    if kind == "ints":
        return tuple(int(v) for v in text.split(",") if v.strip())
    if kind == "floats":
        return tuple(float(v) for v in text.split(",") if v.strip())
    return kind(text.strip())


def _format(kind, value):
    if kind in ("ints", "floats"):
        return ", ".join(repr(v) for v in value)
    return repr(value) if kind is float else str(value)


def validate(cfg):
    """Raise ConfigError unless every field is usable."""
    if not 1 <= cfg.dimension <= 8:
        raise ConfigError("dimension must be in 1..8")
    if not cfg.horizons or min(cfg.horizons) < 1:
        raise ConfigError("horizons must be positive")
    for name in ("replicas", "max_cells", "pair_cells", "max_horizon", "population_cap", "sw_samples"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be positive")
    if not 0 < cfg.confidence < 1:
        raise ConfigError("confidence must be in (0, 1)")
    if cfg.route not in ("polymer", "branching"):
        raise ConfigError(f"unknown route {cfg.route!r}")
    if not cfg.epsilon or min(cfg.epsilon) <= 0:
        raise ConfigError("epsilon values must be positive")
    try:
        parse_model(cfg.model)
        parse_test_function(cfg.test_function, cfg.dimension)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def parse_config(text):
    """ExperimentConfig from INI text; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA or _SCHEMA[key][0] != section:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values[key] = _convert(_SCHEMA[key][1], raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return validate(ExperimentConfig(**values))


def format_config(cfg):
    """Canonical INI text; parse_config(format_config(c)) == c."""
    lines = []
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        for f in fields(cfg):
            sec, kind = _SCHEMA[f.name]
            if sec == section:
                lines.append(f"{f.name} = {_format(kind, getattr(cfg, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path, seed=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    cfg = parse_config(text)
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    if max(cfg.horizons) > cfg.max_horizon:
        raise ResourceLimitError(f"horizon {max(cfg.horizons)} exceeds max_horizon {cfg.max_horizon}")
    return cfg


# --- output ---------------------------------------------------------------

def _clean(obj):
    """JSON-ready copy: numpy scalars to python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


class OutputDir:
    """Collects files in a temporary directory and moves it to ``path`` on commit."""

    def __init__(self, path):
        self.path = os.path.abspath(path)
        parent = os.path.dirname(self.path)
        os.makedirs(parent, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=".brwre-", dir=parent)

    def write_text(self, name, text):
        with open(os.path.join(self.tmp, name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)

    def write_json(self, name, obj):
        self.write_text(name, json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")

    def write_csv(self, name, header, rows):
        with open(os.path.join(self.tmp, name), "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])

    def commit(self):
        if os.path.exists(self.path):
            old = tempfile.mkdtemp(prefix=".brwre-old-", dir=os.path.dirname(self.path))
            os.rename(self.path, os.path.join(old, "prev"))
            os.rename(self.tmp, self.path)
            shutil.rmtree(old)
        else:
            os.rename(self.tmp, self.path)

    def abort(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


# --- subcommands ----------------------------------------------------------

def _simulate_worker(args):
    model, d, T, seed, i = args
    env_seed, rng = replica_streams(seed, i)
    return run_trajectory(EnvironmentField(model, env_seed), T, rng, d)


def cmd_simulate(cfg, out, workers):
    model = parse_model(cfg.model)
    T = max(cfg.horizons)
    runs = map_replicas(_simulate_worker, [(model, cfg.dimension, T, cfg.seed, i)
                                           for i in range(cfg.replicas)], workers)
    summary = []
    for i, st in enumerate(runs):
        out.write_csv(f"replica_{i:04d}.csv", CSV_HEADER, st.rows())
        summary.append({"replica": i, "cause": st.cause, "last_time": int(st.times[-1]),
                        "last_total": int(st.totals[-1]), "last_ln_nbar": float(st.ln_nbar[-1])})
    return {"replicas": summary}


def cmd_moments(cfg, out, workers):
    model = parse_model(cfg.model)
    d = cfg.dimension
    mom = env_moments(model)
    T_max = max(cfg.horizons)
    second = normalized_second_moments(model, d, T_max)
    sitewise = overlap_bound_series_all(model, d, T_max)
    f = parse_test_function(cfg.test_function, d)
    rows = []
    for T in cfg.horizons:
        dt2 = exact_clt_error(model, d, T, f) if f.cosine_terms is not None else math.nan
        rows.append((T, mom.m ** T if T * math.log(mom.m) < 700 else math.inf,
                     float(second[T]), float(sitewise[T]), float(dt2)))
    out.write_csv("moments.csv", ("T", "mean_total", "normalized_second", "sitewise_normalized_second",
                                  "clt_error"), rows)
    env_seed, _ = replica_streams(cfg.seed, 0)
    qlog = quenched_log_totals(EnvironmentField(model, env_seed), T_max, d, cfg.max_cells)
    report = {"m": mom.m, "alpha": mom.alpha, "c": mom.c,
              "quenched_log_mean_total": {str(T): float(qlog[T]) for T in cfg.horizons}}
    if mom.m > 1:
        rig, geo = second_moment_envelope(model, d)
        report["envelope"] = {"rigorous": rig, "geometric": geo}
    if d == 1 and T_max <= 2:
        report["oracle_residuals"] = _oracle_residuals(model, cfg.horizons, cfg.pair_cells)
    return report


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def _oracle_residuals(model, horizons, pair_cells):
    """Max relative differences between enumeration and the DP formulas."""
    m = env_moments(model).m
    out = {}
    for T in horizons:
        tab = brute_force_oracle(model, T)
        second = normalized_second_moments(model, 1, T)[T]
        site = overlap_bound_series_all(model, 1, T)[T]
        pairs = max(_rel(annealed_second_moment(model, 1, T, x, y, pair_cells), tab.second(x, y))
                    for x in range(-T, T + 1) for y in range(-T, T + 1) if tab.second(x, y) > 0)
        p = t_step_distribution(1, T)
        means = max(_rel(m ** T * p.at(np.array([x])), tab.mean(x))
                    for x in range(-T, T + 1) if tab.mean(x) > 0)
        out[str(T)] = {"mean": means, "pair": pairs, "normalized_second": _rel(second, tab.normalized_second),
                       "sitewise": _rel(site, tab.sitewise_normalized_second)}
    return out


def cmd_phase(cfg, out, workers):
    model = parse_model(cfg.model)
    d = cfg.dimension
    pi = return_probability(d)
    rep = classify_phase(model, d, pi)
    report = {"labels": list(rep.labels), "m": rep.m, "alpha": rep.alpha,
              "pi": {"point": pi.point, "lower": pi.lower, "upper": pi.upper},
              "entropy_ratio": rep.entropy_ratio, "l2_regime": rep.l2_regime,
              "a1": rep.a1, "a2": rep.a2, "a3": rep.a3, "inconclusive": rep.inconclusive}
    if model.is_coupled:
        dec = dpre_clt_criterion(model.eta, model.beta, d, pi)
        report["polymer_criterion"] = {"gap": dec.gap, "lower": dec.bound_lower,
                                       "upper": dec.bound_upper, "verdict": dec.verdict}
    return report


def _table_rows(table: ConvergenceTable):
    return [(r.T, r.replicas, r.mean, r.variance, r.target, r.standardized_error) for r in table.rows]


def cmd_clt(cfg, out, workers):
    model = parse_model(cfg.model)
    d = cfg.dimension
    f = parse_test_function(cfg.test_function, d)
    table = clt_l2_experiment(model, d, f, cfg.horizons, cfg.replicas, cfg.seed, workers)
    out.write_csv("clt.csv", ConvergenceTable.HEADER, _table_rows(table))
    T = max(cfg.horizons)
    cond = conditional_clt_experiment(model, d, f, T, cfg.replicas, cfg.epsilon, cfg.seed, workers,
                                      cfg.confidence)
    out.write_csv("conditional.csv", ("epsilon", "rate", "lower", "upper"),
                  [(e, r, lo, hi) for e, r, (lo, hi) in zip(cond.epsilon, cond.rates, cond.intervals)])
    return {"tag": table.tag, "excluded": table.excluded, "conditional_T": T,
            "survivors": cond.survivors, "survival_fraction": cond.survival_fraction,
            "conditional_overflow": cond.overflow}


def cmd_overlap(cfg, out, workers):
    model = parse_model(cfg.model)
    rows = overlap_scaling_experiment(model, cfg.dimension, cfg.horizons, cfg.replicas, cfg.seed, workers)
    out.write_csv("overlap.csv", ("T", "survivors", "overflow", "q50", "q90", "q99", "exact_overlay"),
                  [(r.T, r.survivors, r.overflow, r.q50, r.q90, r.q99, r.exact_overlay) for r in rows])
    return {"horizons": list(cfg.horizons)}


def cmd_dpre(cfg, out, workers):
    model = parse_model(cfg.model)
    d = cfg.dimension
    report = {}
    if model.is_coupled:
        env_seed, _ = replica_streams(cfg.seed, 0)
        res = {}
        for T in cfg.horizons:
            r = coupling_identity_check(EtaField(model.eta, env_seed), model.beta, T, d, cfg.max_cells)
            res[str(T)] = {"total": r.total, "endpoint": r.endpoint}
        report["coupling_residuals"] = res
        dec = dpre_clt_criterion(model.eta, model.beta, d)
        report["polymer_criterion"] = dec.verdict
    est = strong_disorder_slope(model, d, max(cfg.horizons), cfg.replicas, cfg.seed, cfg.route,
                                cfg.confidence, workers)
    report["slope"] = {"mean": est.slope, "lower": est.lower, "upper": est.upper,
                       "replicas_used": est.replicas_used, "excluded": est.excluded,
                       "route": est.route, "tag": est.tag, "confidence": est.confidence}
    # descriptive only: both normalized totals have mean one at finite T
    cmp = finite_t_comparison(model, d, min(cfg.horizons), cfg.replicas, cfg.seed, workers)
    report["finite_t_comparison"] = {"T": cmp.T, "mean_nbar": cmp.mean_nbar, "var_nbar": cmp.var_nbar,
                                     "mean_zbar": cmp.mean_zbar, "var_zbar": cmp.var_zbar,
                                     "replicas_used": cmp.replicas_used, "excluded": cmp.excluded}
    return report


def cmd_extinction(cfg, out, workers):
    model = parse_model(cfg.model)
    rep = extinction_estimate(model, cfg.dimension, max(cfg.horizons), cfg.replicas, cfg.seed,
                              cfg.population_cap, cfg.sw_samples, workers, cfg.confidence)
    return {"e_hat": rep.e_hat, "e_hat_ci": list(rep.e_hat_ci), "extinct": rep.extinct,
            "replicas": rep.replicas, "e_gw": rep.e_gw, "gw_residual": rep.gw_residual,
            "e_sw": rep.e_sw, "e_sw_ci": list(rep.e_sw_ci), "sw_converged": rep.sw_converged,
            "capped": rep.capped, "ordering_holds": rep.ordering_holds()}


HANDLERS = {"simulate": cmd_simulate, "moments": cmd_moments, "phase": cmd_phase, "clt": cmd_clt,
            "overlap": cmd_overlap, "dpre": cmd_dpre, "extinction": cmd_extinction}


def build_parser():
    p = argparse.ArgumentParser(prog="brwre", description="Branching random walks in random environment.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="INI experiment config")
        s.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
        s.add_argument("--out", required=True, help="output directory (replaced atomically)")
        s.add_argument("--workers", type=int, default=None, help="replica processes (default: all cores)")
    return p


def run(command, cfg, out_path, workers=None):
    """Run one subcommand and write its outputs; returns the summary dict."""
    workers = default_workers() if workers is None else max(1, workers)
    out = OutputDir(out_path)
    start = time.time()
    try:
        result = HANDLERS[command](cfg, out, workers)
        summary = {"schema": SCHEMA_VERSION, "command": command, "seed": cfg.seed,
                   "version": __version__, "config": format_config(cfg), "result": result}
        out.write_json("summary.json", summary)
        out.write_text("config.ini", format_config(cfg))
        out.write_json("meta.json", {"timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
                                     "elapsed_seconds": time.time() - start, "workers": workers})
        out.commit()
    except BaseException:
        out.abort()
        raise
    return summary


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.seed)
        log.info("config:\n%s", format_config(cfg))
        log.info("seed: %d", cfg.seed)
        run(args.command, cfg, args.out, args.workers)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except ResourceLimitError as exc:
        log.error("resource limit: %s", exc)
        return EXIT_RESOURCE
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error: %s", exc)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
