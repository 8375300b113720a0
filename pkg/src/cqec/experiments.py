"""Scripted experiments, analysis, and threshold calibration.

Every experiment is a pure function of (DeviceParams, options, seed):
trajectories draw their noise from per-index streams, aggregation is
ordered, and the resulting ExperimentResult serializes to the same bytes
for any worker count.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import lfilter

from . import cavity, model
from ._kernels import classify_trace, confusion_grid
from .controller import one_pole_decay
from .model import DeviceParams, params_to_config, sector_states, subspace_splitting
from .trajectory import (
    EVENT_DETECT,
    EVENT_PULSE,
    TrajectorySpec,
    measurement_rate,
    run_batch,
)


class FitError(RuntimeError):
    """Nonlinear fit failed to converge; carries the best residual found."""


# --------------------------------------------------------------------------
# Small statistics helpers
# --------------------------------------------------------------------------

def wilson_interval(k: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    p = k / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def binomial_sigma(k: int, n: int) -> float:
    if n == 0:
        return 0.0
    p = k / n
    return math.sqrt(max(p * (1 - p), 1.0 / n) / n)


def _config_hash(params: DeviceParams) -> str:
    doc = json.dumps(params_to_config(params), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    return obj


@dataclass
class ExperimentResult:
    """Aggregated outcome of one experiment run."""

    experiment: str
    seed: int
    n_traj: int
    engine: str
    config: dict
    config_hash: str
    metrics: dict
    sweep: list = field(default_factory=list)       # rows for the CSV artifact
    sweep_columns: tuple = ()
    event_counts: dict = field(default_factory=dict)

    def summary_dict(self) -> dict:
        return _jsonable({
            "experiment": self.experiment,
            "seed": self.seed,
            "n_traj": self.n_traj,
            "engine": self.engine,
            "config_hash": self.config_hash,
            "metrics": self.metrics,
            "event_counts": self.event_counts,
        })


def _base(experiment, params, seed, n_traj, engine, metrics, sweep=(),
          sweep_columns=(), event_counts=None) -> ExperimentResult:
    return ExperimentResult(
        experiment=experiment, seed=seed, n_traj=n_traj, engine=engine,
        config=params_to_config(params), config_hash=_config_hash(params),
        metrics=metrics, sweep=list(sweep), sweep_columns=tuple(sweep_columns),
        event_counts=dict(event_counts or {}))


# --------------------------------------------------------------------------
# Event-log bookkeeping
# --------------------------------------------------------------------------

def detections_after(events, t_ns: float):
    """(time, qubit) of detection events at or after t_ns, time-ordered."""
    times, kinds = events
    out = []
    for t, k in zip(times, kinds):
        if EVENT_DETECT <= k < EVENT_DETECT + 3 and t >= t_ns:
            out.append((float(t), int(k)))
    return out


def pulses_after(events, t_ns: float):
    times, kinds = events
    return [(float(t), int(k - EVENT_PULSE)) for t, k in zip(times, kinds)
            if EVENT_PULSE <= k < EVENT_PULSE + 3 and t >= t_ns]


def count_detections(events_list, window_start_ns: float):
    counts = {0: 0, 1: 0, 2: 0}
    for ev in events_list:
        for _, q in detections_after(ev, window_start_ns):
            counts[q] += 1
    return counts


# --------------------------------------------------------------------------
# Exponential fitting
# --------------------------------------------------------------------------

@dataclass
class ExpFit:
    amplitude: float
    time_constant_us: float
    offset: float
    cov: np.ndarray
    residual: float
    degenerate: bool = False

    @property
    def time_constant_sigma(self) -> float:
        v = self.cov[1, 1]
        return float(np.sqrt(v)) if np.isfinite(v) and v >= 0 else math.inf


def fit_exponential(times_us, values, errors) -> ExpFit:
    """Weighted least squares of A*exp(-t/T) + C with deterministic multi-start.

    Requires at least 5 points and strictly positive errors.  A flat data
    set is flagged degenerate (T unidentifiable) instead of fitted.
    """
    t = np.asarray(times_us, dtype=float)
    y = np.asarray(values, dtype=float)
    err = np.asarray(errors, dtype=float)
    if t.size < 5:
        raise FitError("need at least 5 points for an exponential fit")
    if np.any(err <= 0):
        raise FitError("errors must be strictly positive")

    span = float(t[-1] - t[0]) or 1.0
    a0 = float(y[0] - y[-1])
    c0 = float(y[-1])
    if abs(a0) < 1e-3 * max(1.0, np.abs(y).max()) and np.ptp(y) < 3.0 * err.mean():
        cov = np.full((3, 3), np.inf)
        return ExpFit(0.0, math.inf, float(y.mean()), cov, float(np.sum(((y - y.mean()) / err) ** 2)),
                      degenerate=True)

    t_starts = [span / 3.0, span, 3.0 * span]
    mask = y - c0 > 3.0 * err
    if mask.sum() >= 3 and a0 > 0:
        slope = np.polyfit(t[mask], np.log(y[mask] - c0 + 1e-300), 1)[0]
        if slope < 0:
            t_starts.append(-1.0 / slope)

    def resid(theta):
        a, lt, c = theta
        return (a * np.exp(-t / np.exp(lt)) + c - y) / err

    best = None
    for t0 in t_starts:
        sol = least_squares(resid, [a0, math.log(max(t0, 1e-6)), c0], method="lm",
                            max_nfev=2000)
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None or not best.success and best.cost > 1e3 * t.size:
        raise FitError(f"exponential fit did not converge; best residual {best.cost if best else 'n/a'}")

    a, lt, c = best.x
    tau = math.exp(lt)
    jac = best.jac
    try:
        cov_internal = np.linalg.inv(jac.T @ jac)
        # propagate log(T) -> T
        grad = np.diag([1.0, tau, 1.0])
        cov = grad @ cov_internal @ grad
    except np.linalg.LinAlgError:
        cov = np.full((3, 3), np.inf)
    # a time constant far beyond the sampled window is not identifiable
    degenerate = tau > 30.0 * span or not np.isfinite(cov[1, 1])
    return ExpFit(float(a), float(tau), float(c), cov, float(2 * best.cost),
                  degenerate=degenerate)


# --------------------------------------------------------------------------
# Single-flip detection
# --------------------------------------------------------------------------

def single_flip_experiment(params: DeviceParams, qubit: int, n_traj: int, seed: int,
                           engine: str = "sme", workers=None, settle_us: float = 4.0,
                           window_us: float = 12.0, hist_bin_us: float = 0.25) -> ExperimentResult:
    """Inject one bit flip at readout steady state; score the controller.

    Reports detection efficiency (first post-flip detection on the flipped
    qubit), the correction-time density, and the mean correction time.
    """
    t_flip = settle_us
    spec = TrajectorySpec(
        duration_us=settle_us + window_us,
        initial_state=0,
        injections=((t_flip, qubit),),
        feedback_on=True,
        codespace="EE",
    )
    batch = run_batch(params, spec, n_traj, seed, engine=engine, workers=workers)

    flip_ns = t_flip * 1000.0
    n_correct = n_miss = n_wrong = n_pre = 0
    corr_times_us = []
    for ev in batch.events:
        if detections_after(ev, 0.0) and detections_after(ev, 0.0)[0][0] < flip_ns:
            n_pre += 1
        dets = detections_after(ev, flip_ns)
        if not dets:
            n_miss += 1
            continue
        t_det, q_det = dets[0]
        if q_det != qubit:
            n_wrong += 1
            continue
        n_correct += 1
        pulses = [t for t, q in pulses_after(ev, flip_ns) if q == qubit]
        corr_times_us.append((pulses[0] - flip_ns) / 1000.0 if pulses else (t_det - flip_ns) / 1000.0)

    eff = n_correct / n_traj
    lo, hi = wilson_interval(n_correct, n_traj)
    corr = np.array(corr_times_us)
    edges = np.arange(0.0, window_us + hist_bin_us, hist_bin_us)
    hist, _ = np.histogram(corr, bins=edges)
    density = hist / (n_traj * hist_bin_us)

    sweep = [
        {"time_us": 0.5 * (edges[i] + edges[i + 1]), "p_flip_per_us": density[i]}
        for i in range(len(hist))
    ]
    metrics = {
        "qubit": qubit,
        "efficiency": eff,
        "efficiency_wilson_low": lo,
        "efficiency_wilson_high": hi,
        "miss_fraction": n_miss / n_traj,
        "misclassified_fraction": n_wrong / n_traj,
        "class_closure": (n_correct + n_miss + n_wrong) / n_traj,
        "pre_flip_detection_fraction": n_pre / n_traj,
        "mean_correction_time_us": float(corr.mean()) if corr.size else math.nan,
        "median_correction_time_us": float(np.median(corr)) if corr.size else math.nan,
        "flip_time_us": t_flip,
        "gamma_meas_rad_per_us": [measurement_rate(params, i) for i in range(2)],
    }
    return _base("single-flip", params, seed, n_traj, engine, metrics,
                 sweep, ("time_us", "p_flip_per_us"),
                 count_detections(batch.events, flip_ns))


def dark_count_experiment(params: DeviceParams, duration_us: float, n_traj: int,
                          seed: int, engine: str = "telegraph", workers=None,
                          settle_us: float = 4.0) -> ExperimentResult:
    """Ground-state preparation with feedback on; detections are dark counts."""
    spec = TrajectorySpec(
        duration_us=settle_us + duration_us,
        initial_state=0,
        feedback_on=True,
        codespace="EE",
    )
    batch = run_batch(params, spec, n_traj, seed, engine=engine, workers=workers)
    start_ns = settle_us * 1000.0
    exposure_ms = n_traj * duration_us / 1000.0

    counts = {0: 0, 1: 0, 2: 0}
    thermal_assisted = {0: 0, 1: 0, 2: 0}
    lookback_ns = 6.0 * params.tau_ctrl_ns
    for ev in batch.events:
        times, kinds = ev
        jumps = [(float(t), int(k)) for t, k in zip(times, kinds) if k >= 30]
        for t_det, q in detections_after(ev, start_ns):
            counts[q] += 1
            if any(t_det - lookback_ns <= tj <= t_det for tj, _ in jumps):
                thermal_assisted[q] += 1

    metrics = {"duration_us": duration_us}
    sweep = []
    for q in range(3):
        rate = counts[q] / exposure_ms
        err = math.sqrt(max(counts[q], 1)) / exposure_ms
        metrics[f"dark_rate_q{q}_per_ms"] = rate
        metrics[f"dark_rate_q{q}_err_per_ms"] = err
        metrics[f"thermal_assisted_q{q}_per_ms"] = thermal_assisted[q] / exposure_ms
        sweep.append({"qubit": q, "dark_rate_per_ms": rate, "rate_err_per_ms": err,
                      "thermal_assisted_per_ms": thermal_assisted[q] / exposure_ms})
    metrics["thermal_rates_per_ms"] = list(params.gamma_up_per_ms)
    return _base("dark-counts", params, seed, n_traj, engine, metrics,
                 sweep, ("qubit", "dark_rate_per_ms", "rate_err_per_ms",
                         "thermal_assisted_per_ms"),
                 counts)


# --------------------------------------------------------------------------
# Dead time
# --------------------------------------------------------------------------

def _classify_pair_sequence(dets, q_a: int, q_b: int) -> str:
    third = 3 - q_a - q_b if q_a != q_b else None
    kinds = [q for _, q in dets]
    if third is not None and third in kinds:
        return "logical"
    if not kinds:
        return "none"
    if q_a != q_b:
        return "correct" if kinds == [q_a, q_b] else "other"
    return "correct" if kinds == [q_a, q_a] else "other"


def dead_time_experiment(params: DeviceParams, pair: tuple[int, int], delays_ns,
                         n_traj: int, seed: int, engine: str = "sme", workers=None,
                         settle_us: float = 4.0, window_us: float = 14.0) -> ExperimentResult:
    """Two successive flips; classify the controller response vs delay.

    The dead time is the delay at which the logical-error probability
    (third-qubit detection) crosses the correct-sequence probability,
    linearly interpolated between sweep points.
    """
    q_a, q_b = pair
    delays_ns = np.asarray(sorted(delays_ns), dtype=float)
    sweep = []
    curves = {"correct": [], "logical": [], "none": [], "other": []}
    for i_d, delta_ns in enumerate(delays_ns):
        t_flip = settle_us
        t_b = t_flip + delta_ns / 1000.0
        spec = TrajectorySpec(
            duration_us=t_b + window_us,
            initial_state=0,
            injections=((t_flip, q_a), (t_b, q_b)),
            feedback_on=True,
            codespace="EE",
        )
        batch = run_batch(params, spec, n_traj, seed + i_d, engine=engine, workers=workers)
        tally = {"correct": 0, "logical": 0, "none": 0, "other": 0}
        for ev in batch.events:
            dets = detections_after(ev, t_flip * 1000.0)
            tally[_classify_pair_sequence(dets, q_a, q_b)] += 1
        row = {"delay_ns": float(delta_ns)}
        for k in ("correct", "logical", "none", "other"):
            p = tally[k] / n_traj
            curves[k].append(p)
            row[f"p_{k}"] = p
            row[f"p_{k}_err"] = binomial_sigma(tally[k], n_traj)
        sweep.append(row)

    p_corr = np.array(curves["correct"])
    p_log = np.array(curves["logical"])
    dead_time_ns = math.nan
    bounded = False
    diff = p_log - p_corr
    for i in range(len(delays_ns) - 1):
        if diff[i] > 0 >= diff[i + 1]:
            frac = diff[i] / (diff[i] - diff[i + 1])
            dead_time_ns = float(delays_ns[i] + frac * (delays_ns[i + 1] - delays_ns[i]))
            bounded = True
            break

    metrics = {
        "pair": [q_a, q_b],
        "dead_time_ns": dead_time_ns,
        "dead_time_bounded": bounded,
        "p_logical_at_zero": float(p_log[0]) if delays_ns[0] == 0 else math.nan,
        "delays_ns": delays_ns.tolist(),
    }
    return _base("dead-time", params, seed, n_traj, engine, metrics, sweep,
                 ("delay_ns", "p_correct", "p_correct_err", "p_logical", "p_logical_err",
                  "p_none", "p_none_err", "p_other", "p_other_err"))


# --------------------------------------------------------------------------
# Logical lifetime
# --------------------------------------------------------------------------

def logical_t1_experiment(params: DeviceParams, sector: str, feedback_on: bool,
                          horizon_us: float, n_traj: int, seed: int,
                          engine: str = "telegraph", workers=None,
                          sample_every_us: float = 2.0, settle_us: float = 4.0,
                          burn_in_us: float = 6.0) -> ExperimentResult:
    """Population decay of a sector's excited logical basis state.

    The population relaxes toward the feedback-maintained steady state;
    the logical T1 is the fitted exponential time constant.  The first
    burn_in_us are excluded from the fit: with feedback on, an equilibrium
    share of trajectories sits mid-correction, which shows up as a fast
    initial offset unrelated to the logical decay.
    """
    s0, s1 = sector_states(sector)
    if not feedback_on:
        settle_us = 0.0  # the settle window only serves the feedback filters
    times = np.arange(sample_every_us, horizon_us + 1e-9, sample_every_us)
    spec = TrajectorySpec(
        duration_us=settle_us + horizon_us,
        initial_state=s1,
        feedback_on=feedback_on,
        codespace=sector,
        snapshot_times_us=list(settle_us + times),
    )
    batch = run_batch(params, spec, n_traj, seed, engine=engine, workers=workers)

    if engine == "telegraph":
        pop_1l = (batch.labels == s1).mean(axis=0)
        pop_0l = (batch.labels == s0).mean(axis=0)
    else:
        pop_1l = np.real(batch.snapshots[:, :, s1, s1]).mean(axis=0)
        pop_0l = np.real(batch.snapshots[:, :, s0, s0]).mean(axis=0)

    err = np.sqrt(np.maximum(pop_1l * (1 - pop_1l), 1.0 / n_traj) / n_traj)
    keep = times >= (burn_in_us if feedback_on else 0.0)
    fit = fit_exponential(times[keep], pop_1l[keep], err[keep])
    tail = slice(int(0.8 * len(times)), None)
    codespace_pop = float((pop_1l + pop_0l)[tail].mean())

    bare_max = float(params.t1_us.max())
    metrics = {
        "sector": sector,
        "feedback_on": feedback_on,
        "t1_logical_us": fit.time_constant_us,
        "t1_logical_sigma_us": fit.time_constant_sigma,
        "fit_amplitude": fit.amplitude,
        "fit_offset": fit.offset,
        "fit_degenerate": fit.degenerate,
        "bare_t1_max_us": bare_max,
        "lifetime_ratio": fit.time_constant_us / bare_max,
        "steady_codespace_population": codespace_pop,
        "horizon_us": horizon_us,
    }
    sweep = [{"time_us": float(times[i]), "p_excited_logical": float(pop_1l[i]),
              "p_excited_err": float(err[i]), "p_codespace": float(pop_1l[i] + pop_0l[i])}
             for i in range(len(times))]
    return _base("logical-t1", params, seed, n_traj, engine, metrics, sweep,
                 ("time_us", "p_excited_logical", "p_excited_err", "p_codespace"))


# --------------------------------------------------------------------------
# Coherence transfer (ring-down dephasing)
# --------------------------------------------------------------------------

def _plus_x_state(sector: str) -> np.ndarray:
    s0, s1 = sector_states(sector)
    psi = np.zeros(8, dtype=complex)
    psi[s0] = psi[s1] = 1.0 / math.sqrt(2.0)
    return psi


def _sector_after_flip(sector: str, qubit: int) -> str:
    p0 = sector[0] if qubit == 2 else ("E" if sector[0] == "O" else "O")
    p1 = sector[1] if qubit == 0 else ("E" if sector[1] == "O" else "O")
    return p0 + p1


def predicted_flip_dephasing(params: DeviceParams, from_sector: str, qubit: int) -> float:
    """Total ring-down zeta for a flip out of `from_sector` on `qubit`.

    Only resonators whose pair parity changes from odd to even contribute.
    """
    zeta = 0.0
    for i, (qa, qb) in enumerate(model.RES_PAIRS):
        if qubit not in (qa, qb):
            continue
        was_odd = (from_sector[i] == "O")
        if was_odd:
            zeta += cavity.expected_flip_dephasing(params, i)
    return zeta


def coherence_transfer_experiment(params: DeviceParams, from_sector: str,
                                  flip, n_traj: int, seed: int, workers=None,
                                  settle_us: float = 0.5, tomo_delay_us: float | None = None,
                                  antithetic: bool = True) -> ExperimentResult:
    """Transfer of logical coherence through a bit flip under measurement.

    Prepares (|0_L> + |1_L>)/sqrt(2) in `from_sector` with the tones on and
    no feedback, optionally flips one qubit, and reads the coherence in
    the destination codespace from the trajectory-averaged state shortly
    after the ring-down.  Normalized against a tones-off reference run of
    the same timeline (the reference is noiseless, hence deterministic).
    """
    if tomo_delay_us is None:
        tomo_delay_us = float(3.0 / params.kappa_ang.min())
    psi = _plus_x_state(from_sector)
    t_flip = settle_us
    t_tomo = t_flip + tomo_delay_us
    injections = () if flip is None else ((t_flip, int(flip)),)
    to_sector = from_sector if flip is None else _sector_after_flip(from_sector, int(flip))
    s0, s1 = sector_states(to_sector)

    spec = TrajectorySpec(
        duration_us=t_tomo, initial_state=psi, injections=injections,
        feedback_on=False, measurement_on=True, codespace=from_sector,
        snapshot_times_us=[t_tomo], antithetic=antithetic,
    )
    batch = run_batch(params, spec, n_traj, seed, engine="sme", workers=workers)
    coh_traj = batch.snapshots[:, 0, s0, s1]
    coh = complex(coh_traj.mean())
    coh_sigma = float(coh_traj.std() / math.sqrt(n_traj))

    ref_spec = TrajectorySpec(
        duration_us=t_tomo, initial_state=psi, injections=injections,
        feedback_on=False, measurement_on=False, codespace=from_sector,
        snapshot_times_us=[t_tomo], mean_mode=True,
    )
    ref = run_batch(params, ref_spec, 1, seed, engine="sme", workers=1)
    coh_ref = complex(ref.snapshots[0, 0, s0, s1])

    relative = abs(coh) / abs(coh_ref)
    rel_sigma = coh_sigma / abs(coh_ref)
    zeta = 0.0 if flip is None else predicted_flip_dephasing(params, from_sector, int(flip))
    metrics = {
        "from_sector": from_sector,
        "to_sector": to_sector,
        "flip": None if flip is None else int(flip),
        "relative_coherence": relative,
        "relative_coherence_sigma": rel_sigma,
        "predicted_zeta": zeta,
        "predicted_relative_coherence": math.exp(-zeta),
        "reference_coherence": abs(coh_ref),
        "tomo_delay_us": tomo_delay_us,
        "nbar_odd": list(params.nbar_odd),
    }
    return _base("coherence-transfer", params, seed, n_traj, "sme", metrics,
                 [{"from_sector": from_sector, "flip": -1 if flip is None else int(flip),
                   "relative_coherence": relative, "sigma": rel_sigma,
                   "predicted": math.exp(-zeta)}],
                 ("from_sector", "flip", "relative_coherence", "sigma", "predicted"))


# --------------------------------------------------------------------------
# Conditional coherence (ZZ precession during the error interval)
# --------------------------------------------------------------------------

def conditional_coherence_experiment(params: DeviceParams, n_traj: int, seed: int,
                                     flip_qubit: int = 0, workers=None,
                                     settle_us: float = 2.0, tomo_delay_us: float = 4.5,
                                     bin_width_us: float = 0.2,
                                     min_bin_count: int = 20,
                                     min_correction_us: float | None = None,
                                     backaction_reference: bool = True) -> ExperimentResult:
    """Logical coherence conditioned on the correction time (feedback on).

    Prepares |+X_L> in the odd-odd codespace, injects a flip, lets the
    controller correct it, and bins the tomographed coherence by the
    detection-to-pulse corrected interval T.  The per-bin phase advances
    as 2*pi*delta_beta*T; pooling over T dephases by the spread of phases.

    Corrections faster than min_correction_us are excluded from the
    analysis: while the cavities are still ringing, the measurement Stark
    phase is itself T-dependent and would contaminate the ZZ slope.

    Conditioning on the correction time also selects record noise, which
    rotates the error-space coherence through the imaginary part of the
    even pointer fields; that backaction phase drifts almost linearly in
    T and would bias the fitted frequency.  A paired reference run with
    the ZZ couplings zeroed and identical noise streams reproduces the
    backaction phase alone; the reported frequency comes from the per-bin
    phase difference (raw and reference fits are reported alongside).
    """
    from_sector = "OO"
    error_sector = _sector_after_flip(from_sector, flip_qubit)
    delta_beta = subspace_splitting(error_sector, params) - subspace_splitting(from_sector, params)
    if min_correction_us is None:
        min_correction_us = float(4.0 / params.kappa_ang.min())

    t_kept, c_kept = _conditional_run(params, n_traj, seed, flip_qubit, workers,
                                      settle_us, tomo_delay_us, min_correction_us)
    n_kept = t_kept.size

    edges = np.arange(0.0, t_kept.max() + bin_width_us, bin_width_us) if n_kept else np.array([0.0, 1.0])
    bins = _bin_coherence(t_kept, c_kept, edges, min_bin_count)
    rows = [{"t_bin_us": b["t"], "n": b["n"], "coh_re": b["mean"].real,
             "coh_im": b["mean"].imag, "coh_abs": abs(b["mean"]),
             "coh_phase_rad": math.atan2(b["mean"].imag, b["mean"].real),
             "coh_sigma": b["sigma"]} for b in bins["kept"]]

    raw_freq, raw_freq_sigma = _phase_slope_fit(bins)

    # paired zero-ZZ reference isolates the record-selection backaction phase
    fitted_freq = raw_freq
    fitted_freq_sigma = raw_freq_sigma
    ref_freq = math.nan
    pool_bins = bins["kept"]
    if backaction_reference:
        params_ref = params.with_updates(beta01_mhz=0.0, beta12_mhz=0.0, beta02_mhz=0.0)
        t_ref, c_ref = _conditional_run(params_ref, n_traj, seed, flip_qubit, workers,
                                        settle_us, tomo_delay_us, min_correction_us)
        bins_ref = _bin_coherence(t_ref, c_ref, edges, min_bin_count)
        ref_freq, _ = _phase_slope_fit(bins_ref)
        diff = _phase_slope_diff(bins, bins_ref)
        if diff is not None:
            fitted_freq, fitted_freq_sigma = diff
        # de-rotate each bin by its reference phase so the pooled dephasing
        # measures the ZZ phase spread alone
        by_bin = {b["bin"]: b for b in bins_ref["kept"]}
        pool_bins = [
            {**b, "mean": b["mean"] * np.exp(-1j * np.angle(by_bin[b["bin"]]["mean"]))}
            for b in bins["kept"] if b["bin"] in by_bin
        ]

    if n_kept and pool_bins:
        counts = np.array([b["n"] for b in pool_bins], dtype=float)
        means = np.array([b["mean"] for b in pool_bins])
        pooled = abs(np.average(means, weights=counts))
        aligned = float(np.average(np.abs(means), weights=counts))
        zeta_meas = -math.log(max(pooled / aligned, 1e-300)) if aligned > 0 else math.inf
        t_pooled = np.concatenate([
            t_kept[(t_kept >= edges[b["bin"]]) & (t_kept < edges[b["bin"] + 1])]
            for b in pool_bins
        ])
        phi_pred, zeta_pred = cavity.zz_dephasing(delta_beta, t_pooled)
    else:
        zeta_meas = zeta_pred = math.nan
        phi_pred = math.nan

    metrics = {
        "flip_qubit": flip_qubit,
        "error_sector": error_sector,
        "delta_beta_mhz": delta_beta,
        "fitted_freq_mhz": fitted_freq,
        "fitted_freq_sigma_mhz": fitted_freq_sigma,
        "raw_freq_mhz": raw_freq,
        "backaction_freq_mhz": ref_freq,
        "freq_relative_error": abs(abs(fitted_freq) - abs(delta_beta)) / abs(delta_beta)
            if delta_beta and not math.isnan(fitted_freq) else math.nan,
        "zeta_zz_measured": zeta_meas,
        "zeta_zz_predicted": zeta_pred,
        "pooled_coherence_factor": math.exp(-zeta_meas) if not math.isnan(zeta_meas) else math.nan,
        "predicted_coherence_factor": math.exp(-zeta_pred) if not math.isnan(zeta_pred) else math.nan,
        "predicted_phase_rad": phi_pred,
        "n_corrected": int(n_kept),
        "n_dropped_bins": bins["dropped"],
        "mean_correction_time_us": float(t_kept.mean()) if n_kept else math.nan,
    }
    return _base("conditional-coherence", params, seed, n_traj, "sme", metrics, rows,
                 ("t_bin_us", "n", "coh_re", "coh_im", "coh_abs", "coh_phase_rad", "coh_sigma"))


def _conditional_run(params, n_traj, seed, flip_qubit, workers, settle_us,
                     tomo_delay_us, min_correction_us):
    """One conditioned batch; returns (correction times, coherences) kept."""
    from_sector = "OO"
    psi = _plus_x_state(from_sector)
    s0, s1 = sector_states(from_sector)
    t_flip = settle_us
    t_tomo = t_flip + tomo_delay_us
    spec = TrajectorySpec(
        duration_us=t_tomo, initial_state=psi, injections=((t_flip, flip_qubit),),
        feedback_on=True, codespace=from_sector, snapshot_times_us=[t_tomo],
    )
    batch = run_batch(params, spec, n_traj, seed, engine="sme", workers=workers)
    corr_t_us = np.full(n_traj, np.nan)
    for i, ev in enumerate(batch.events):
        pulses = [t for t, q in pulses_after(ev, t_flip * 1000.0) if q == flip_qubit]
        if pulses:
            corr_t_us[i] = (pulses[0] - t_flip * 1000.0) / 1000.0
    coh = batch.snapshots[:, 0, s0, s1]
    dets_ok = np.array([
        len(detections_after(ev, t_flip * 1000.0)) == 1 for ev in batch.events
    ])
    keep = (np.isfinite(corr_t_us) & (corr_t_us < tomo_delay_us - 0.5)
            & (corr_t_us >= min_correction_us) & dets_ok)
    return corr_t_us[keep], coh[keep]


def _bin_coherence(t_kept, c_kept, edges, min_bin_count):
    idx = np.digitize(t_kept, edges) - 1
    kept = []
    dropped = 0
    for b in range(len(edges) - 1):
        sel = idx == b
        cnt = int(sel.sum())
        if cnt < min_bin_count:
            if cnt:
                dropped += 1
            continue
        kept.append({
            "bin": b,
            "t": float(t_kept[sel].mean()),
            "n": cnt,
            "mean": complex(c_kept[sel].mean()),
            "sigma": float(c_kept[sel].std() / math.sqrt(cnt)),
        })
    return {"kept": kept, "dropped": dropped}


def _phase_slope_fit(bins):
    """Weighted linear fit of unwrapped per-bin phase; returns freq (MHz)."""
    kept = bins["kept"]
    if len(kept) < 3:
        return math.nan, math.nan
    t = np.array([b["t"] for b in kept])
    phases = np.unwrap(np.angle(np.array([b["mean"] for b in kept])))
    w = np.array([b["n"] for b in kept], dtype=float)
    coeff, cov = np.polyfit(t, phases, 1, w=np.sqrt(w), cov=True)
    return coeff[0] / (2.0 * math.pi), math.sqrt(cov[0, 0]) / (2.0 * math.pi)


def _phase_slope_diff(bins_a, bins_b):
    """Slope of the per-bin phase difference between two runs (MHz)."""
    by_bin = {b["bin"]: b for b in bins_b["kept"]}
    t, dphi, w = [], [], []
    for a in bins_a["kept"]:
        b = by_bin.get(a["bin"])
        if b is None:
            continue
        t.append(a["t"])
        dphi.append(np.angle(a["mean"] * np.conj(b["mean"])))
        w.append(min(a["n"], b["n"]))
    if len(t) < 3:
        return None
    t = np.array(t)
    dphi = np.unwrap(np.array(dphi))
    coeff, cov = np.polyfit(t, dphi, 1, w=np.sqrt(np.array(w, dtype=float)), cov=True)
    return coeff[0] / (2.0 * math.pi), math.sqrt(cov[0, 0]) / (2.0 * math.pi)


# --------------------------------------------------------------------------
# Distinguishability scan (analytic, no trajectories)
# --------------------------------------------------------------------------

def distinguishability_scan(params: DeviceParams, seed: int = 0) -> ExperimentResult:
    rows = cavity.distinguishability_table(params)
    metrics = {}
    for i in range(2):
        metrics[f"ratio_r{i}"] = cavity.distinguishability_ratio(params, i)
        metrics[f"ratio_theory_r{i}"] = cavity.theoretical_distinguishability_ratio(params, i)
        metrics[f"gamma_meas_r{i}_rad_per_us"] = measurement_rate(params, i)
    return _base("distinguishability-scan", params, seed, 0, "analytic", metrics,
                 rows, ("resonator", "pair", "distinguishability"))


# --------------------------------------------------------------------------
# Threshold optimization
# --------------------------------------------------------------------------

def _default_lattice(step: float = 0.05):
    th1 = np.round(np.arange(-0.8, -0.099, step), 10)
    th2 = np.round(np.arange(-0.3, 0.501, step), 10)
    th3 = np.round(np.arange(-0.9, -0.199, step), 10)
    return th1, th2, th3


def generate_labeled_traces(params: DeviceParams, n_per_class: int, seed: int,
                            engine: str = "sme", workers=None, settle_us: float = 4.0,
                            window_us: float = 8.0):
    """Filtered V traces for the classes (q0, q1, q2, none), labels 0..3."""
    v0s, v1s, labels = [], [], []
    a_ctrl = one_pole_decay(params.tau_ctrl_ns, params.dt_ctrl_ns)
    for label, flip in ((0, 0), (1, 1), (2, 2), (3, None)):
        inj = () if flip is None else ((settle_us, flip),)
        spec = TrajectorySpec(
            duration_us=settle_us + window_us, initial_state=0, injections=inj,
            feedback_on=False, codespace="EE", store_records=True,
        )
        batch = run_batch(params, spec, n_per_class, seed + 7 * label,
                          engine=engine, workers=workers)
        vdc = batch.records[:, :, 3:5]
        # offline secondary filter, memories settled at the codespace level
        zi = np.array([a_ctrl])
        v0 = lfilter([1 - a_ctrl], [1, -a_ctrl], vdc[:, :, 0], axis=1, zi=np.repeat(zi[None], n_per_class, 0))[0]
        v1 = lfilter([1 - a_ctrl], [1, -a_ctrl], vdc[:, :, 1], axis=1, zi=np.repeat(zi[None], n_per_class, 0))[0]
        start = int(round(settle_us * 1000.0 / params.dt_ctrl_ns)) - 1
        v0s.append(v0[:, start:])
        v1s.append(v1[:, start:])
        labels.extend([label] * n_per_class)
    return (np.ascontiguousarray(np.concatenate(v0s)),
            np.ascontiguousarray(np.concatenate(v1s)),
            np.array(labels, dtype=np.int64))


def confusion_matrix(v0s, v1s, labels, theta1, theta2, theta3) -> np.ndarray:
    """P(classified i | prepared j), classes (q0, q1, q2, none)."""
    counts = np.zeros((4, 4))
    totals = np.zeros(4)
    for tr in range(v0s.shape[0]):
        pred = classify_trace(v0s[tr], v1s[tr], theta1, theta2, theta3)
        counts[pred, labels[tr]] += 1
        totals[labels[tr]] += 1
    return counts / np.maximum(totals, 1.0)


def optimize_thresholds(params: DeviceParams, n_traj_per_class: int, seed: int,
                        engine: str = "sme", workers=None, lattice=None,
                        traces=None) -> ExperimentResult:
    """Exhaustive grid search of (theta1, theta2, theta3).

    Minimizes sum_ij (P_ij - delta_ij)^2 of the offline-classification
    confusion matrix; among exact ties the plateau centroid wins.
    """
    th1s, th2s, th3s = lattice if lattice is not None else _default_lattice()
    th1s, th2s, th3s = (np.asarray(a, dtype=float) for a in (th1s, th2s, th3s))
    feasible = th2s.max() > th1s.min()
    if not feasible:
        raise model.ConfigError("threshold lattice is degenerate: no theta2 > theta1 point")
    if traces is None:
        v0s, v1s, labels = generate_labeled_traces(params, n_traj_per_class, seed,
                                                   engine, workers)
    else:
        v0s, v1s, labels = traces
    obj = np.empty((th1s.size, th2s.size, th3s.size))
    confusion_grid(v0s, v1s, labels, th1s, th2s, th3s, obj)

    best = obj.min()
    winners = np.argwhere(obj <= best + 1e-12)
    centroid = winners.mean(axis=0)
    pick = winners[np.argmin(((winners - centroid) ** 2).sum(axis=1))]
    t1, t2, t3 = float(th1s[pick[0]]), float(th2s[pick[1]]), float(th3s[pick[2]])
    conf = confusion_matrix(v0s, v1s, labels, t1, t2, t3)

    metrics = {
        "theta1": t1, "theta2": t2, "theta3": t3,
        "objective": float(best),
        "n_tied_lattice_points": int(len(winners)),
        "confusion_matrix": conf.tolist(),
        "lattice_shape": [int(th1s.size), int(th2s.size), int(th3s.size)],
    }
    sweep = [{"class": c, "p_correct": float(conf[i, i])}
             for i, c in enumerate(("q0", "q1", "q2", "none"))]
    return _base("optimize-thresholds", params, seed, 4 * (n_traj_per_class if traces is None else len(labels) // 4),
                 engine, metrics, sweep, ("class", "p_correct"))
