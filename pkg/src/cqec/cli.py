"""Command-line entry point: config ingestion, experiment dispatch, artifacts.

Every run writes, under --out/<experiment>/: a manifest (before compute),
a summary JSON, the sweep CSV, and an SVG figure.  Summary JSON bytes are
a deterministic function of (config, seed) for any worker count; plotting
failures never fail a run.

Exit codes: 0 success, 2 usage error, 3 configuration error, 1 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import cavity, controller, model
from .experiments import (
    conditional_coherence_experiment,
    coherence_transfer_experiment,
    dark_count_experiment,
    dead_time_experiment,
    distinguishability_scan,
    logical_t1_experiment,
    optimize_thresholds,
    single_flip_experiment,
)
from .model import ConfigError, DeviceParams
from .trajectory import measurement_rate

CONFIG_ENV = "CQEC_CONFIG"

EXPERIMENTS = (
    "single-flip", "dark-counts", "dead-time", "logical-t1",
    "coherence-transfer", "conditional-coherence", "distinguishability-scan",
)


def _canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _load_params(config_path) -> tuple[DeviceParams, str | None]:
    path = config_path or os.environ.get(CONFIG_ENV)
    return model.load_params(path), (str(path) if path else None)


def _manifest_hash(doc: dict) -> str:
    core = {k: doc[k] for k in ("experiment", "config_hash", "seed", "engine", "args")}
    return hashlib.sha256(_canonical_json(core).encode()).hexdigest()[:16]


def _write_manifest(out_dir: Path, experiment: str, params: DeviceParams,
                    config_path, seed: int, engine: str, workers, args: dict) -> str:
    config_doc = model.params_to_config(params)
    config_hash = hashlib.sha256(_canonical_json(config_doc).encode()).hexdigest()[:16]
    doc = {
        "experiment": experiment,
        "config_path": config_path,
        "config_hash": config_hash,
        "resolved_config": config_doc,
        "seed": seed,
        "engine": engine,
        "workers": workers,
        "args": args,
        "artifacts": ["summary.json", f"{experiment}.csv", f"{experiment}.svg"],
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    doc["manifest_hash"] = _manifest_hash(doc)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(_canonical_json(doc))
    return doc["manifest_hash"]


def _fmt_cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_sweep_csv(path: Path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(result.sweep_columns)
        for row in result.sweep:
            w.writerow([_fmt_cell(row[c]) for c in result.sweep_columns])


def _emit(result, out_dir: Path, manifest_hash: str) -> None:
    from .plots import apply_house_style, render_figure

    summary = result.summary_dict()
    summary["manifest_hash"] = manifest_hash
    (out_dir / "summary.json").write_text(_canonical_json(summary))
    if result.sweep_columns:
        write_sweep_csv(out_dir / f"{result.experiment}.csv", result)
    apply_house_style()
    render_figure(result, out_dir / f"{result.experiment}.svg")


def _parse_pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"expected a pair like 0,2 got {text!r}") from exc
    if not (0 <= a <= 2 and 0 <= b <= 2):
        raise ConfigError("pair entries must be qubit indices 0..2")
    return a, b


def _parse_delays(text: str) -> list[float]:
    try:
        start, stop, step = (float(x) for x in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"expected delays as start:stop:step (ns), got {text!r}") from exc
    if step <= 0 or stop < start:
        raise ConfigError("delays must satisfy step > 0 and stop >= start")
    return list(np.arange(start, stop + 0.5 * step, step))


def _parse_flip(text: str):
    if text == "none":
        return None
    q = int(text)
    if q not in (0, 1, 2):
        raise ConfigError("flip must be a qubit index 0..2 or 'none'")
    return q


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cqec",
        description="Continuous parity-measurement error correction simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None,
                       help=f"JSON config path (default: ${CONFIG_ENV} or built-in)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--trajectories", type=int, default=500)
        p.add_argument("--engine", choices=("sme", "telegraph"), default="sme")
        p.add_argument("--workers", type=int, default=None,
                       help="worker threads (default: available parallelism)")

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("experiment", choices=EXPERIMENTS)
    common(run)
    run.add_argument("--qubit", type=int, default=0, help="flipped qubit (single-flip)")
    run.add_argument("--pair", default="0,2", help="flip pair a,b (dead-time)")
    run.add_argument("--delays", default="0:4000:250",
                     help="delay sweep start:stop:step in ns (dead-time)")
    run.add_argument("--duration-us", type=float, default=200.0,
                     help="per-trajectory duration (dark-counts)")
    run.add_argument("--sector", default="OO", choices=model.SECTORS,
                     help="codespace sector (logical-t1)")
    run.add_argument("--feedback", choices=("on", "off"), default="on")
    run.add_argument("--horizon-us", type=float, default=300.0)
    run.add_argument("--from-sector", default="OO", choices=model.SECTORS,
                     help="preparation sector (coherence-transfer)")
    run.add_argument("--flip", default="0",
                     help="flipped qubit or 'none' (coherence experiments)")

    rep = sub.add_parser("replay", help="run the controller over a record CSV")
    rep.add_argument("--records", required=True)
    rep.add_argument("--config", default=None)
    rep.add_argument("--out", default="out")
    rep.add_argument("--codespace", default="EE", choices=model.SECTORS)

    opt = sub.add_parser("optimize-thresholds", help="confusion-matrix grid search")
    common(opt)
    opt.add_argument("--trajectories-per-class", type=int, default=300)

    par = sub.add_parser("params", help="parameter utilities")
    par.add_argument("action", choices=("show",))
    par.add_argument("--config", default=None)

    conv = sub.add_parser("convergence-check",
                          help="compare headline metrics at dt_sim and dt_sim/2")
    common(conv)

    return parser


def cmd_run(args) -> int:
    params, config_path = _load_params(args.config)
    out_dir = Path(args.out) / args.experiment
    run_args = {"experiment": args.experiment, "trajectories": args.trajectories}

    name = args.experiment
    if name == "single-flip":
        run_args["qubit"] = args.qubit
    elif name == "dead-time":
        run_args["pair"] = args.pair
        run_args["delays"] = args.delays
    elif name == "dark-counts":
        run_args["duration_us"] = args.duration_us
    elif name == "logical-t1":
        run_args.update(sector=args.sector, feedback=args.feedback,
                        horizon_us=args.horizon_us)
    elif name == "coherence-transfer":
        run_args.update(from_sector=args.from_sector, flip=args.flip)
    elif name == "conditional-coherence":
        run_args["flip"] = args.flip

    manifest_hash = _write_manifest(out_dir, name, params, config_path,
                                    args.seed, args.engine, args.workers, run_args)

    if name == "single-flip":
        result = single_flip_experiment(params, args.qubit, args.trajectories,
                                        args.seed, engine=args.engine, workers=args.workers)
    elif name == "dark-counts":
        result = dark_count_experiment(params, args.duration_us, args.trajectories,
                                       args.seed, engine=args.engine, workers=args.workers)
    elif name == "dead-time":
        result = dead_time_experiment(params, _parse_pair(args.pair),
                                      _parse_delays(args.delays), args.trajectories,
                                      args.seed, engine=args.engine, workers=args.workers)
    elif name == "logical-t1":
        result = logical_t1_experiment(params, args.sector, args.feedback == "on",
                                       args.horizon_us, args.trajectories, args.seed,
                                       engine=args.engine, workers=args.workers)
    elif name == "coherence-transfer":
        result = coherence_transfer_experiment(params, args.from_sector,
                                               _parse_flip(args.flip), args.trajectories,
                                               args.seed, workers=args.workers)
    elif name == "conditional-coherence":
        flip = _parse_flip(args.flip)
        if flip is None:
            raise ConfigError("conditional-coherence requires a flipped qubit")
        result = conditional_coherence_experiment(params, args.trajectories, args.seed,
                                                  flip_qubit=flip, workers=args.workers)
    else:
        result = distinguishability_scan(params, args.seed)

    _emit(result, out_dir, manifest_hash)
    print(f"{name}: artifacts in {out_dir}")
    return 0


def cmd_replay(args) -> int:
    params, _ = _load_params(args.config)
    out_dir = Path(args.out) / "replay"
    out_dir.mkdir(parents=True, exist_ok=True)
    events = controller.golden_replay(args.records, params, args.codespace)
    out_path = out_dir / "events.csv"
    controller.write_events_csv(out_path, events)
    print(f"replay: {len(events)} events -> {out_path}")
    return 0


def cmd_optimize(args) -> int:
    params, config_path = _load_params(args.config)
    out_dir = Path(args.out) / "optimize-thresholds"
    manifest_hash = _write_manifest(
        out_dir, "optimize-thresholds", params, config_path, args.seed, args.engine,
        args.workers, {"trajectories_per_class": args.trajectories_per_class})
    result = optimize_thresholds(params, args.trajectories_per_class, args.seed,
                                 engine=args.engine, workers=args.workers)
    _emit(result, out_dir, manifest_hash)
    m = result.metrics
    print(f"thresholds: theta1={m['theta1']} theta2={m['theta2']} theta3={m['theta3']} "
          f"objective={m['objective']:.5f}")
    return 0


def cmd_params_show(args) -> int:
    params, config_path = _load_params(args.config)
    doc = model.params_to_config(params)
    derived = {
        "tphi_us": params.tphi_us.tolist(),
        "kappa_rad_per_us": params.kappa_ang.tolist(),
        "chi_rad_per_us": params.chi_ang.tolist(),
        "gamma_meas_rad_per_us": [measurement_rate(params, i) for i in range(2)],
        "nbar_even_steady": [abs(cavity.steady_state_field(0, params, i)) ** 2
                             for i in range(2)],
        "sector_splittings_mhz": {s: model.subspace_splitting(s, params)
                                  for s in model.SECTORS},
        "distinguishability_ratio": [cavity.distinguishability_ratio(params, i)
                                     for i in range(2)],
    }
    print(_canonical_json({"config_path": config_path, "config": doc,
                           "derived": derived}), end="")
    return 0


def cmd_convergence(args) -> int:
    params, config_path = _load_params(args.config)
    out_dir = Path(args.out) / "convergence-check"
    manifest_hash = _write_manifest(out_dir, "convergence-check", params, config_path,
                                    args.seed, "sme", args.workers,
                                    {"trajectories": args.trajectories})
    halved = params.with_updates(dt_sim_ns=params.dt_sim_ns / 2.0)
    rows = []

    for tag, pp in (("dt", params), ("dt/2", halved)):
        r = coherence_transfer_experiment(pp, "OO", 0, args.trajectories, args.seed,
                                          workers=args.workers)
        rows.append({"check": "coherence-transfer", "grid": tag,
                     "metric": "relative_coherence",
                     "value": r.metrics["relative_coherence"],
                     "mc_error": r.metrics["relative_coherence_sigma"]})
    for tag, pp in (("dt", params), ("dt/2", halved)):
        r = conditional_coherence_experiment(pp, args.trajectories, args.seed,
                                             workers=args.workers)
        rows.append({"check": "conditional-coherence", "grid": tag,
                     "metric": "fitted_freq_mhz",
                     "value": r.metrics["fitted_freq_mhz"],
                     "mc_error": r.metrics["fitted_freq_sigma_mhz"]})

    verdicts = []
    for name in ("coherence-transfer", "conditional-coherence"):
        pair = [r for r in rows if r["check"] == name]
        delta = abs(pair[0]["value"] - pair[1]["value"])
        tol = float(np.hypot(pair[0]["mc_error"], pair[1]["mc_error"]))
        verdicts.append({"check": name, "delta": delta, "mc_tolerance": tol,
                         "converged": bool(delta <= max(tol, 1e-12))})

    summary = {
        "experiment": "convergence-check",
        "seed": args.seed,
        "manifest_hash": manifest_hash,
        "rows": rows,
        "verdicts": verdicts,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(_canonical_json(_jsonable_summary(summary)))
    for v in verdicts:
        state = "ok" if v["converged"] else "NOT CONVERGED"
        print(f"{v['check']}: |delta|={v['delta']:.4g} vs mc {v['mc_tolerance']:.4g} [{state}]")
    return 0 if all(v["converged"] for v in verdicts) else 1


def _jsonable_summary(doc):
    from .experiments import _jsonable
    return _jsonable(doc)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "replay":
            return cmd_replay(args)
        if args.command == "optimize-thresholds":
            return cmd_optimize(args)
        if args.command == "params":
            return cmd_params_show(args)
        if args.command == "convergence-check":
            return cmd_convergence(args)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
