"""Batch front-end: validate a JSON run configuration, orchestrate engine
runs and parameter sweeps, and emit CSV tables plus a structured summary.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 resource
limit exceeded.
"""

import argparse
import json
import os
import sys
import time

import jsonschema
import numpy as np

from . import __version__
from .bargmann import time_grid
from .errors import (ConfigError, ModelError, NumericsError,
                     PropagationError, ResourceLimitError)
from .model import check_pseudomode_truncation
from .qfi import EngineConfig, mutual_information, qfi_series, renyi_entropy
from .registry import MODELS, build_model, describe_models

ENV_THREADS = "REPLICAQFI_THREADS"

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "parameter", "propagation"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"type": "string"},
                "params": {"type": "object"},
                "monitored": {"type": "array", "items": {"type": "string"}},
            },
        },
        "parameter": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"type": "string"},
                "value": {"type": "number"},
                "fd_step": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "qfi": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_max": {"type": "integer", "minimum": 0},
                "lambda_q": {"type": "integer", "minimum": 2},
                "convergence_rtol": {"type": "number", "exclusiveMinimum": 0},
                "richardson": {"type": "boolean"},
                "renyi_order": {"type": "integer", "minimum": 2},
            },
        },
        "propagation": {
            "type": "object",
            "additionalProperties": False,
            "required": ["t_final"],
            "properties": {
                "engine": {"enum": ["auto", "dense", "tebd"]},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "scheme": {"enum": ["trotter1", "strang"]},
                "t_final": {"type": "number", "exclusiveMinimum": 0},
                "grid_stride": {"type": "integer", "minimum": 1},
                "chi_max": {"type": "integer", "minimum": 1},
                "discard_tol": {"type": "number", "minimum": 0},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["parameter", "values"],
            "properties": {
                "parameter": {"type": "string"},
                "values": {"type": "array", "minItems": 1,
                           "items": {"type": "number"}},
            },
        },
        "quantities": {
            "type": "array",
            "minItems": 1,
            "items": {"enum": ["qfi", "renyi", "mutual_information",
                               "channel_comparison"]},
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "prefix": {"type": "string"},
                "diagnostics": {"type": "boolean"},
            },
        },
    },
}

_DEFAULTS = {
    "model": {"params": {}, "monitored": None},
    "parameter": {"value": None, "fd_step": None},
    "qfi": {"n_max": 4, "lambda_q": 2, "convergence_rtol": 0.05,
            "richardson": False, "renyi_order": 2},
    "propagation": {"engine": "auto", "dt": 1e-3, "scheme": "trotter1",
                    "grid_stride": 1, "chi_max": 32, "discard_tol": 1e-12},
    "quantities": ["qfi"],
    "output": {"prefix": "run", "diagnostics": False},
}


def resolve_config(raw):
    """Schema-validate and fill defaults; returns the echoable config."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc.message}") from exc
    cfg = {}
    for section in ("model", "parameter", "qfi", "propagation", "output"):
        merged = dict(_DEFAULTS.get(section, {}))
        merged.update(raw.get(section, {}))
        cfg[section] = merged
    cfg["quantities"] = list(raw.get("quantities", _DEFAULTS["quantities"]))
    if "sweep" in raw:
        cfg["sweep"] = dict(raw["sweep"])
    name = cfg["model"]["name"]
    if name not in MODELS:
        raise ConfigError(f"unknown model {name!r}; see list-models")
    entry = MODELS[name]
    par = cfg["parameter"]["name"]
    if par not in entry.theta_choices:
        raise ConfigError(f"parameter {par!r} not estimable for {name!r}")
    if cfg["parameter"]["value"] is None:
        base = dict(entry.parameters)
        base.update(cfg["model"]["params"])
        cfg["parameter"]["value"] = float(base[par])
    if cfg["parameter"]["fd_step"] is None:
        cfg["parameter"]["fd_step"] = 1e-3 * max(
            1.0, abs(cfg["parameter"]["value"]))
    if "sweep" in cfg:
        sp = cfg["sweep"]["parameter"]
        if sp not in entry.parameters:
            raise ConfigError(f"sweep parameter {sp!r} unknown for {name!r}")
    for q in cfg["quantities"]:
        if q in ("mutual_information", "channel_comparison"):
            if len(entry.channels) < 2:
                raise ConfigError(f"{q} needs a two-channel model")
    return cfg


def _engine_config(cfg):
    p = cfg["propagation"]
    return EngineConfig(engine=p["engine"], dt=p["dt"], scheme=p["scheme"],
                        chi_max=p["chi_max"], discard_tol=p["discard_tol"])


def _sweep_points(cfg):
    if "sweep" not in cfg:
        return [None]
    return list(cfg["sweep"]["values"])


def _point_model(cfg, point):
    params = dict(cfg["model"]["params"])
    theta_name = cfg["parameter"]["name"]
    theta_value = cfg["parameter"]["value"]
    if point is not None:
        params[cfg["sweep"]["parameter"]] = point
        if cfg["sweep"]["parameter"] == theta_name:
            theta_value = point
    model = build_model(cfg["model"]["name"], params,
                        cfg["model"]["monitored"], theta_name)
    return model, float(theta_value)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def run(config, out_dir=".", threads=1):
    """Execute a resolved configuration; returns the summary dictionary."""
    cfg = resolve_config(config)
    os.makedirs(out_dir, exist_ok=True)
    prefix = os.path.join(out_dir, cfg["output"]["prefix"])
    engine_cfg = _engine_config(cfg)
    prop = cfg["propagation"]
    grid = time_grid(prop["t_final"], prop["dt"], prop["grid_stride"])
    started = time.time()
    outputs = []
    comparison_rows = []

    for k, point in enumerate(_sweep_points(cfg)):
        model, theta = _point_model(cfg, point)
        if model.mode_projectors:
            check_pseudomode_truncation(model, prop["t_final"],
                                        dt=max(prop["dt"], 1e-2), theta=theta)
        tag = f"_point{k:03d}" if point is not None else ""
        for quantity in cfg["quantities"]:
            if quantity == "qfi":
                result = qfi_series(
                    model, theta, cfg["qfi"]["n_max"], grid,
                    h=cfg["parameter"]["fd_step"], config=engine_cfg,
                    workers=threads, q=cfg["qfi"]["lambda_q"],
                    convergence_rtol=cfg["qfi"]["convergence_rtol"],
                    richardson=cfg["qfi"]["richardson"])
                path = f"{prefix}{tag}.csv"
                result.to_csv(path)
                outputs.append(path)
            elif quantity == "renyi":
                ell = cfg["qfi"]["renyi_order"]
                s = renyi_entropy(model, model.monitored_names, ell, grid,
                                  config=engine_cfg, theta=theta,
                                  workers=threads)
                path = f"{prefix}{tag}_renyi.csv"
                _write_rows(path, ["T", f"S_{ell}"],
                            [[f"{grid[i]:.12e}", f"{s[i]:.12e}"]
                             for i in range(len(grid))])
                outputs.append(path)
            elif quantity == "mutual_information":
                ell = cfg["qfi"]["renyi_order"]
                mi = mutual_information(model, "f", "b", ell, grid,
                                        config=engine_cfg, theta=theta,
                                        workers=threads)
                path = f"{prefix}{tag}_mutual_information.csv"
                _write_rows(
                    path,
                    ["T", "S_a", "S_b", "S_joint", "Y", "Y_over_T"],
                    [[f"{grid[i]:.12e}", f"{mi.s_a[i]:.12e}",
                      f"{mi.s_b[i]:.12e}", f"{mi.s_joint[i]:.12e}",
                      f"{mi.y[i]:.12e}", f"{mi.rate[i]:.12e}"]
                     for i in range(len(grid))])
                outputs.append(path)
            elif quantity == "channel_comparison":
                row = _channel_comparison(model, theta, cfg, grid, engine_cfg,
                                          threads)
                comparison_rows.append(
                    [str(k), "" if point is None else f"{point:.12e}"] + row)

    if comparison_rows:
        path = f"{prefix}_channel_comparison.csv"
        _write_rows(path,
                    ["point", "sweep_value", "I_f", "I_b", "I_fb", "ratio",
                     "Y2", "Y2_over_T"],
                    comparison_rows)
        outputs.append(path)

    summary = {
        "config": cfg,
        "outputs": sorted(os.path.basename(p) for p in outputs),
        "versions": {
            "replicaqfi": __version__,
            "numpy": np.__version__,
            "scipy": __import__("scipy").__version__,
        },
        "threads": threads,
        "wall_time_s": round(time.time() - started, 3),
    }
    with open(f"{prefix}_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def _channel_comparison(model, theta, cfg, grid, engine_cfg, threads):
    """Single-channel vs joint information and field correlation at T_final."""
    from .model import retag_monitored

    n_max = cfg["qfi"]["n_max"]
    h = cfg["parameter"]["fd_step"]
    values = {}
    for names in (("f",), ("b",), ("f", "b")):
        mdl = retag_monitored(model, names)
        res = qfi_series(mdl, theta, n_max, grid, h=h, config=engine_cfg,
                         workers=threads)
        values["".join(names)] = float(res.i_values[n_max, -1])
    mi = mutual_information(model, "f", "b", 2, grid, config=engine_cfg,
                            theta=theta, workers=threads)
    ratio = (values["f"] + values["b"]) / values["fb"]
    return [f"{values['f']:.12e}", f"{values['b']:.12e}",
            f"{values['fb']:.12e}", f"{ratio:.12e}", f"{mi.y[-1]:.12e}",
            f"{mi.rate[-1]:.12e}"]


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="replicaqfi",
        description=("Information limits of continuously monitored open "
                     "sensors (batch runner)"))
    sub = parser.add_subparsers(dest="command")
    run_p = sub.add_parser("run", help="execute a JSON run configuration")
    run_p.add_argument("--config", required=True, help="path to JSON config")
    run_p.add_argument("--engine", choices=["dense", "tebd", "auto"],
                       help="override the propagation engine")
    run_p.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (default ${ENV_THREADS} or 1)")
    run_p.add_argument("--out", default=".", help="output directory")
    run_p.add_argument("--validate-only", action="store_true",
                       help="validate the configuration and exit")
    sub.add_parser("list-models", help="print the model registry")
    args = parser.parse_args(argv)

    if args.command == "list-models":
        print(describe_models())
        return 0
    if args.command != "run":
        parser.print_help()
        return 2

    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.engine:
            raw.setdefault("propagation", {})["engine"] = args.engine
        cfg = resolve_config(raw)
        if args.validate_only:
            print("configuration OK")
            return 0
        threads = args.threads
        if threads is None:
            threads = int(os.environ.get(ENV_THREADS, "1"))
        summary = run(raw if args.engine is None else raw, out_dir=args.out,
                      threads=max(1, threads))
        print(f"wrote {len(summary['outputs'])} result file(s) "
              f"in {summary['wall_time_s']}s")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ResourceLimitError as exc:
        print(f"resource limit: {exc}", file=sys.stderr)
        return 4
    except (NumericsError, PropagationError, ModelError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        diag_path = os.path.join(args.out, "failure_diagnostics.json")
        try:
            os.makedirs(args.out, exist_ok=True)
            with open(diag_path, "w") as fh:
                json.dump({"error": str(exc), "type": type(exc).__name__},
                          fh, indent=2)
        except OSError:
            pass
        return 3


if __name__ == "__main__":
    sys.exit(main())
