"""Command line interface: ``hicap simulate | sweep | bounds | validate``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 failed
validation check.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import itertools
import json
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, bounds, plotting
from .model import SystemConfig, derive_rng
from .montecarlo import (
    ExperimentSpec, analytic_prediction, devices_per_second, run_experiment,
)
from .validation import run_validation

log = logging.getLogger("hicap")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2, 3

CONFIG_KEYS = {f.name for f in dataclasses.fields(SystemConfig)} - {"u", "c"}
# flag name -> SystemConfig field
OVERRIDES = {
    "n": "n", "s": "s", "k_s": "k_s", "t": "t", "p_u": "p_u", "seed": "seed",
    "mode": "detector_mode", "xi": "xi", "iterations": "iterations",
    "birthday_pool": "birthday_pool", "kbar_u": "kbar_u", "m": "m",
}
METRIC_COLUMNS = [
    "n", "m", "c", "kbar_u", "snr_db", "trials", "mean_supported", "std_supported",
    "p_md", "p_fa", "ser", "t", "detection_rate", "exact_recovery", "measured_snr_db",
    "analytic_supported", "devices_per_second",
]
BOUND_COLUMNS = ["bound_name", "n", "m", "t", "s", "k", "k_s", "k_u", "kbar_u", "x",
                 "eps", "xi", "snr_db", "c", "raw_value", "clamped_value"]
VALIDATION_COLUMNS = ["check_name", "parameters", "empirical", "bound", "pass"]


class UsageError(Exception):
    """Bad configuration or arguments; maps to exit code 2."""


# ---------------------------------------------------------------------------
# parsing helpers

def _scalar(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("none", "inf", "+inf", "noise-free", "noisefree"):
        return None
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def parse_list(text, kind=float):
    """Comma separated values; ``inf``/``none`` become ``None`` (noise-free)."""
    if text is None:
        return None
    out = []
    for item in str(text).split(","):
        if not item.strip():
            continue
        v = _scalar(item)
        if v is not None and kind is not None:
            try:
                v = kind(v)
            except (TypeError, ValueError):
                raise UsageError(f"cannot parse {item!r}") from None
        out.append(v)
    if not out:
        raise UsageError(f"empty list {text!r}")
    return out


def load_config_file(path) -> dict:
    """Read ``key = value`` lines (``#`` starts a comment)."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    params = {}
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{num}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS | {"trials"}:
            raise UsageError(f"{path}:{num}: unknown key {key!r}")
        params[key] = _scalar(value)
    return params


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.12g}"
    return str(v)


def write_csv(path: Path, columns, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])
    return path


def write_manifest(out_dir: Path, command: str, options: dict, outputs) -> Path:
    manifest = {
        "tool": "hicap",
        "version": __version__,
        "command": command,
        "options": options,
        "seed": options.get("config", {}).get("seed", options.get("seed")),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "outputs": [str(Path(p).name) for p in outputs],
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path, command) -> dict:
    try:
        manifest = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read manifest {path}: {exc}") from None
    allowed = {"simulate", "sweep"} if command in ("simulate", "sweep") else {command}
    if manifest.get("command") not in allowed:
        raise UsageError(f"manifest was written by {manifest.get('command')!r}, not {command!r}")
    return manifest["options"]


# ---------------------------------------------------------------------------
# simulate / sweep

def resolve_config(args, base: dict | None = None) -> tuple[SystemConfig, dict]:
    """Merge manifest/config-file values with command line overrides.

    Returns the base :class:`SystemConfig` (scalar values only) and the sweep
    axes implied by list-valued ``--n`` / ``--snr-db`` flags.
    """
    params = dict(base or {})
    if getattr(args, "config", None):
        params.update(load_config_file(args.config))
    dims = {"n", "s", "k_s", "p_u", "birthday_pool"}
    if base and any(getattr(args, f, None) is not None for f in dims):
        # derived sizes stored in a manifest are stale once a dimension changes
        for key in ("kbar_u", "m"):
            if getattr(args, key, None) is None:
                params.pop(key, None)
    trials = params.pop("trials", None)
    sweep = {}
    for flag, fieldname in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == "n":
            values = parse_list(value, int)
            if len(values) > 1:
                sweep["n"] = values
            params["n"] = values[0]
        else:
            params[fieldname] = value
    if getattr(args, "snr_db", None) is not None:
        values = parse_list(args.snr_db, float)
        if len(values) > 1:
            sweep["snr_db"] = values
        params["snr_db"] = values[0]
    if trials is not None and getattr(args, "trials", None) is None:
        args.trials = trials
    for key in ("u", "c"):
        params.pop(key, None)
    try:
        cfg = SystemConfig(**params)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    return cfg, sweep


def _metric_rows(result):
    rows = []
    for pt in result:
        cfg = pt.config
        rows.append({
            "n": cfg.n, "m": cfg.m, "c": cfg.c, "kbar_u": cfg.kbar_u,
            "snr_db": math.inf if cfg.snr_db is None else cfg.snr_db,
            "trials": pt.trials,
            "mean_supported": pt.mean["supported_users"],
            "std_supported": pt.std["supported_users"],
            "p_md": pt.mean["p_md"], "p_fa": pt.mean["p_fa"],
            "ser": pt.mean["symbol_error_rate"], "t": cfg.t,
            "detection_rate": pt.mean["detection_rate"],
            "exact_recovery": pt.mean["exact_recovery_rate"],
            "measured_snr_db": pt.mean["measured_snr_db"],
            "analytic_supported": analytic_prediction(cfg),
            "devices_per_second": devices_per_second(pt.mean["supported_users"], cfg.t),
        })
    return rows


def cmd_simulate(args, command="simulate") -> int:
    base, sweep_opts = None, None
    if args.manifest:
        opts = load_manifest(args.manifest, command)
        base, sweep_opts = opts["config"], opts.get("sweep")
        if args.trials is None:
            args.trials = opts.get("trials")
    cfg, sweep = resolve_config(args, base)
    if sweep_opts and not sweep and not getattr(args, "axis", None):
        sweep = {axis: values for axis, values in sweep_opts}
    if getattr(args, "axis", None):
        if args.values is None:
            raise UsageError("--axis requires --values")
        kind = int if args.axis in ("n", "t", "kbar_u") else float
        sweep[args.axis] = parse_list(args.values, kind)
    elif command == "sweep" and not sweep:
        sweep = {"n": [1024, 2048, 4096, 8192], "snr_db": [None, 10.0, 0.0, -10.0]}
    trials = 100 if args.trials is None else int(args.trials)
    if trials < 1:
        raise UsageError("trials must be >= 1")
    order = [a for a in ("n", "t", "kbar_u", "snr_db") if a in sweep]
    spec = ExperimentSpec(cfg, tuple((a, tuple(sweep[a])) for a in order), trials)
    for point in spec.points():  # surfaces configuration errors before running
        pass

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(spec, args.workers)
    outputs = [write_csv(out / "metrics.csv", METRIC_COLUMNS, _metric_rows(result))]
    if not args.no_plot:
        if len({p.config.n for p in result}) > 1:
            analytic = {p.config.n: analytic_prediction(p.config) for p in result}
            outputs.append(plotting.plot_supported_users(result, out / "supported_users.png",
                                                         analytic))
        elif len({p.config.snr_db for p in result}) > 1:
            outputs.append(plotting.plot_snr_curve(result, out / "supported_users_snr.png"))
    options = {"config": cfg.to_dict(), "sweep": [list(s) for s in spec.sweep],
               "trials": trials}
    write_manifest(out, command, options, outputs)
    for pt in result:
        log.info("n=%d snr=%s supported %.1f +- %.1f (P_md %.4f)", pt.config.n,
                 "inf" if pt.config.snr_db is None else f"{pt.config.snr_db:g}",
                 pt.mean["supported_users"], pt.std["supported_users"], pt.mean["p_md"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# bounds

BOUND_DEFAULTS = {
    "n": "1024", "m": "16", "t": "100", "s": "8", "k": "4", "k_s": "4", "k_u": "512",
    "kbar_u": "4", "x": "64", "eps": "0.5", "xi": "0.5", "snr_db": "-10",
}


def bound_rows(grid: dict, C1=1.0, C2=1.0, draws=10_000, seed=0):
    keys = list(grid)
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        p = dict(zip(keys, combo))
        n, m, t, s, k_s, eps = p["n"], p["m"], p["t"], p["s"], p["k_s"], p["eps"]
        c = n // m
        common = {"n": n, "m": m, "t": t, "eps": eps}
        rows.append({"bound_name": "conc_standard", **common, "k": p["k"],
                     "raw_value": bounds.conc_bound_standard(p["k"], m, eps, clamp=False),
                     "clamped_value": bounds.conc_bound_standard(p["k"], m, eps)})
        args = (m, k_s, p["kbar_u"], t, eps)
        rows.append({"bound_name": "conc_multislot", **common, "k_s": k_s, "kbar_u": p["kbar_u"],
                     "raw_value": bounds.conc_bound_multislot(*args, clamp=False),
                     "clamped_value": bounds.conc_bound_multislot(*args)})
        inputs = bounds.BoundInputs(n=n, s=s, k_s=k_s, m=m, t=t, snr_db=p["snr_db"],
                                    C1=C1, C2=C2)
        raw = bounds.pmd_bound(p["xi"], p["x"], eps, inputs, derive_rng(seed, 0, 300),
                               draws, clamp=False)
        rows.append({"bound_name": "pmd", **common, "s": s, "k_s": k_s, "x": p["x"],
                     "xi": p["xi"], "snr_db": math.inf if p["snr_db"] is None else p["snr_db"],
                     "raw_value": raw, "clamped_value": min(1.0, max(0.0, raw))})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            raw = bounds.capture_bound(n, p["k_u"], p["x"], clamp=False)
            clamped = bounds.capture_bound(n, p["k_u"], p["x"])
        rows.append({"bound_name": "capture", "n": n, "m": m, "k_u": p["k_u"], "x": p["x"],
                     "c": c, "raw_value": raw, "clamped_value": clamped})
        enc = bounds.expected_noncollided(p["k_u"], k_s, c, n)
        rows.append({"bound_name": "expected_noncollided", "n": n, "m": m, "k_s": k_s,
                     "k_u": p["k_u"], "c": c, "raw_value": enc, "clamped_value": max(0.0, enc)})
    return rows


def cmd_bounds(args) -> int:
    opts = load_manifest(args.manifest, "bounds") if args.manifest else {}
    grid = {}
    for key, default in BOUND_DEFAULTS.items():
        text = getattr(args, key)
        if text is None:
            text = opts.get("grid", {}).get(key, default)
        kind = float if key in ("eps", "xi", "snr_db") else int
        grid[key] = parse_list(text, kind) if isinstance(text, str) else list(text)
    for key, values in grid.items():
        for v in values:
            if key == "snr_db":
                continue
            if key == "xi" and v is not None and v >= 0:
                continue
            if v is None or v <= 0:
                raise UsageError(f"--{key.replace('_', '-')} values must be positive, got {v}")
    C1 = args.c1 if args.c1 is not None else opts.get("C1", 1.0)
    C2 = args.c2 if args.c2 is not None else opts.get("C2", 1.0)
    draws = args.draws if args.draws is not None else opts.get("draws", 10_000)
    seed = args.seed if args.seed is not None else opts.get("seed", 0)
    try:
        rows = bound_rows(grid, C1, C2, draws, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = write_csv(out / "bounds.csv", BOUND_COLUMNS, rows)
    write_manifest(out, "bounds", {"grid": grid, "C1": C1, "C2": C2, "draws": draws,
                                   "seed": seed}, [path])
    log.info("wrote %d bound rows to %s", len(rows), path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate

def cmd_validate(args) -> int:
    base, opts = None, {}
    if args.manifest:
        opts = load_manifest(args.manifest, "validate")
        base = opts["config"]
    cfg, _ = resolve_config(args, base)
    trials = args.trials if args.trials is not None else opts.get("trials", 2000)
    load_trials = args.load_trials if args.load_trials is not None else opts.get("load_trials", 100_000)
    instances = (args.oracle_instances if args.oracle_instances is not None
                 else opts.get("oracle_instances", 1000))
    if trials is None or int(trials) < 1000:
        raise UsageError("validate needs --trials >= 1000")
    try:
        rows, tables = run_validation(cfg, int(trials), int(load_trials), int(instances),
                                      operator_scale=args.fault_operator_scale)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_rows = [{"check_name": r.check_name, "parameters": r.parameter_string,
                 "empirical": r.empirical, "bound": r.bound, "pass": r.passed} for r in rows]
    outputs = [write_csv(out / "validation.csv", VALIDATION_COLUMNS, csv_rows)]
    if not args.no_plot:
        outputs.append(plotting.plot_tail(tables["concentration"], out / "concentration.png",
                                          "eps", ("m", "t"), "relative deviation eps"))
        outputs.append(plotting.plot_tail(tables["load"], out / "load_tail.png",
                                          "x", ("k_u",), "sub-channel load x"))
    write_manifest(out, "validate", {"config": cfg.to_dict(), "trials": int(trials),
                                     "load_trials": int(load_trials),
                                     "oracle_instances": int(instances)}, outputs)
    failed = [r for r in rows if not r.passed]
    for r in failed:
        log.error("check failed: %s [%s] empirical=%g bound=%g", r.check_name,
                  r.parameter_string, r.empirical, r.bound)
    log.info("%d/%d checks passed", len(rows) - len(failed), len(rows))
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------

def _add_system_flags(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--manifest", help="re-run from a manifest.json written earlier")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--snr-db", help="SNR in dB; comma list sweeps, 'inf' is noise-free")
    p.add_argument("--n", help="signal dimension; comma list sweeps")
    p.add_argument("--s", type=int)
    p.add_argument("--k-s", type=int)
    p.add_argument("--t", type=int)
    p.add_argument("--p-u", type=float)
    p.add_argument("--kbar-u", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--mode", choices=("topk", "threshold"))
    p.add_argument("--xi", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--birthday-pool", choices=("u", "n"))
    p.add_argument("--out-dir", default="out")
    p.add_argument("--workers", type=int, help="worker processes (default HICAP_THREADS or 1)")
    p.add_argument("--no-plot", action="store_true", help="skip figure rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hicap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hicap {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the Monte-Carlo experiment")
    _add_system_flags(sim)
    sw = sub.add_parser("sweep", help="simulate over an axis (default: n x SNR grid)")
    _add_system_flags(sw)
    sw.add_argument("--axis", choices=("n", "snr_db", "t", "kbar_u"))
    sw.add_argument("--values", help="comma separated values for --axis")

    bd = sub.add_parser("bounds", help="tabulate the analytic bounds on a grid")
    for key in BOUND_DEFAULTS:
        bd.add_argument(f"--{key.replace('_', '-')}", dest=key,
                        help=f"comma list (default {BOUND_DEFAULTS[key]})")
    bd.add_argument("--c1", type=float)
    bd.add_argument("--c2", type=float)
    bd.add_argument("--draws", type=int, help="Monte-Carlo draws for the noisy-energy CDF")
    bd.add_argument("--seed", type=int)
    bd.add_argument("--manifest")
    bd.add_argument("--out-dir", default="out")

    va = sub.add_parser("validate", help="run the self-check suite")
    _add_system_flags(va)
    va.add_argument("--load-trials", type=int)
    va.add_argument("--oracle-instances", type=int)
    va.add_argument("--fault-operator-scale", type=float, help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    handlers = {"simulate": cmd_simulate, "sweep": lambda a: cmd_simulate(a, "sweep"),
                "bounds": cmd_bounds, "validate": cmd_validate}
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"hicap: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, TypeError) as exc:
        # ConfigError and the like raised while building scenarios
        print(f"hicap: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"hicap: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
