"""Stochastic trajectory engines conditioned on two homodyne parity records.

The quantum engine evolves an 8x8 density matrix under the always-on ZZ
Hamiltonian, qubit decay / thermal excitation / pure dephasing, and two
measurement channels with diagonal operators C_i = sqrt(kappa_i) *
diag(alpha_p) built from the classically evolved pointer fields (the
cavities are adiabatically eliminated).  The record convention per
resonator is

    r_i dt = <C_i e^{-i phi_i} + C_i^dag e^{+i phi_i}> dt + dW_i / sqrt(eta_i)

with phi_i the informational quadrature; records are then calibrated
affinely so the steady ensemble means are -1 (odd) and +1 (even).

The telegraph engine replaces the quantum state by a classical basis label
with Poisson flips and reuses the identical pointer fields, calibration,
noise scaling, and controller, serving as a fast cross-check for
population-only experiments.

Trajectories are deterministic functions of (seed, config, trajectory
index) for any worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import cavity, model
from ._kernels import sme_kernel, telegraph_kernel
from ._rng import py_stream_normals
from .controller import controller_config, initial_controller_state
from .model import N_STATES, DeviceParams, InvalidStateError


class IntegratorError(RuntimeError):
    """A trajectory violated the state invariants beyond tolerance."""


HERM_TOL = 1e-10
POS_TOL = 1e-6
DEFAULT_MAX_EVENTS = 4096

EVENT_DETECT = 0      # + qubit
EVENT_PULSE = 10      # + qubit
EVENT_INJECT = 20     # + qubit
EVENT_DECAY = 30      # + qubit (telegraph only)
EVENT_EXCITE = 40     # + qubit (telegraph only)


def measurement_rate(params: DeviceParams, resonator: int) -> float:
    """Parity measurement rate eta * kappa/2 * |alpha_odd - alpha_even|^2 (rad/us)."""
    a_odd = cavity.steady_state_field(1, params, resonator)
    a_even = cavity.steady_state_field(0, params, resonator)
    return float(params.eta[resonator]) * 0.5 * float(params.kappa_ang[resonator]) * (
        abs(a_odd - a_even) ** 2
    )


def record_calibration(params: DeviceParams):
    """Affine record calibration (a, b) and homodyne phases phi per resonator.

    Maps the odd steady-state ensemble mean to -1 and the even one to +1.
    Computed analytically from the pointer steady states, never fit per run.
    """
    a = np.empty(model.N_RES)
    b = np.empty(model.N_RES)
    phi = np.empty(model.N_RES)
    for i in range(model.N_RES):
        a_odd = cavity.steady_state_field(1, params, i)
        a_even = 0.5 * (cavity.steady_state_field(0, params, i)
                        + cavity.steady_state_field(3, params, i))
        phi[i] = float(np.angle(a_odd - a_even))
        sqk = np.sqrt(float(params.kappa_ang[i]))
        rot = np.exp(-1j * phi[i])
        x_odd = 2.0 * sqk * float((a_odd * rot).real)
        x_even = 2.0 * sqk * float((a_even * rot).real)
        a[i] = 2.0 / (x_even - x_odd)
        b[i] = 1.0 - a[i] * x_even
    return a, b, phi


def inject_flip(rho: np.ndarray, fields: cavity.PointerFields, qubit: int):
    """Apply a bit flip: rho -> X_q rho X_q, pointer labels permuted."""
    if qubit not in (0, 1, 2):
        raise ValueError(f"qubit index must be 0..2, got {qubit}")
    x = model.PAULI_X[qubit]
    return x @ rho @ x, cavity.permute_fields_on_flip(fields, qubit)


def _as_density_matrix(initial_state) -> np.ndarray:
    if isinstance(initial_state, (int, np.integer)):
        return model.basis_state_density(int(initial_state))
    arr = np.asarray(initial_state, dtype=complex)
    if arr.shape == (N_STATES,):
        arr = arr / np.linalg.norm(arr)
        return np.outer(arr, arr.conj())
    if arr.shape == (N_STATES, N_STATES):
        if abs(np.trace(arr) - 1.0) > 1e-9:
            raise InvalidStateError("initial density matrix must have unit trace")
        return arr.copy()
    raise InvalidStateError(f"cannot interpret initial state of shape {arr.shape}")


@dataclass
class TrajectorySpec:
    """One trajectory timeline shared by every member of a batch."""

    duration_us: float
    initial_state: object = 0
    injections: tuple = ()              # ((t_us, qubit), ...)
    feedback_on: bool = True
    measurement_on: bool = True
    drive_on: bool = True
    codespace: str = "EE"
    snapshot_times_us: object = None    # sequence of times, or None
    store_records: bool = False
    record_every: int = 1               # controller periods per stored row
    mean_mode: bool = False             # conditioning off: deterministic ensemble mean
    antithetic: bool = False            # pair trajectories with sign-flipped noise
    check_every: int = 0                # sim steps between invariant checks (0 = off)
    max_events: int = DEFAULT_MAX_EVENTS


@dataclass
class BatchResult:
    """Aggregated outputs of a trajectory batch, ordered by trajectory index."""

    engine: str
    n_traj: int
    seed: int
    snapshot_times_us: np.ndarray
    events: list = field(default_factory=list)   # per traj (times_ns, kinds)
    snapshots: np.ndarray | None = None          # (n_traj, S, 8, 8) for sme
    labels: np.ndarray | None = None             # (n_traj, S) for telegraph
    records: np.ndarray | None = None            # (n_traj, R, 7)
    diagnostics: np.ndarray | None = None        # (n_traj, 4) sme invariants
    final_labels: np.ndarray | None = None

    def mean_rho(self, snap_index: int) -> np.ndarray:
        if self.snapshots is None:
            raise ValueError("no density-matrix snapshots in this batch")
        return self.snapshots[:, snap_index].mean(axis=0)

    def label_fractions(self, snap_index: int) -> np.ndarray:
        if self.labels is None:
            raise ValueError("no label snapshots in this batch")
        return np.bincount(self.labels[:, snap_index], minlength=N_STATES) / self.n_traj


# --------------------------------------------------------------------------
# Pack builders
# --------------------------------------------------------------------------

def _dissipator_channels(params: DeviceParams, dt_us: float):
    chan_dst = np.zeros((6, 16, 2), dtype=np.int64)
    chan_mask = np.zeros(6, dtype=np.int64)
    chan_rate_dt = np.zeros(6)
    decay = params.decay_rate_per_us
    excite = params.excitation_rate_per_us
    for q in range(3):
        mask = 4 >> q
        for ch, (rate, dst_bit) in enumerate(((decay[q], 0), (excite[q], 1))):
            idx = 2 * q + ch
            chan_mask[idx] = mask
            chan_rate_dt[idx] = rate * dt_us
            entries = [(s, t) for s in range(8) for t in range(8)
                       if model.excitation_bit(s, q) == dst_bit
                       and model.excitation_bit(t, q) == dst_bit]
            chan_dst[idx] = np.array(entries, dtype=np.int64)
    return chan_dst, chan_mask, chan_rate_dt


def _static_factors(params: DeviceParams, dt_us: float):
    energies = params.hamiltonian_energies()
    decay = params.decay_rate_per_us
    excite = params.excitation_rate_per_us
    gamma_s = np.array([
        sum(decay[q] if model.excitation_bit(s, q) else excite[q] for q in range(3))
        for s in range(8)
    ])
    static_m = np.exp((-1j * energies - 0.5 * gamma_s) * dt_us)
    gphi = params.dephasing_rate_per_us
    deph = np.ones((8, 8))
    for s in range(8):
        for t in range(8):
            rate = sum(gphi[q] for q in range(3)
                       if model.excitation_bit(s, q) != model.excitation_bit(t, q))
            deph[s, t] = np.exp(-rate * dt_us)
    return static_m, deph


def _pair_map(params: DeviceParams) -> np.ndarray:
    return np.array([[model.pair_index(s, i) for s in range(8)] for i in range(2)],
                    dtype=np.int64)


class _SmePacks:
    """Precomputed constant arrays for the quantum engine."""

    def __init__(self, params: DeviceParams, spec: TrajectorySpec):
        dt_us = params.dt_sim_ns * 1e-3
        self.n_sub = params.steps_per_ctrl
        self.dt_us = dt_us
        self.static_m, self.deph = _static_factors(params, dt_us)
        self.chan_dst, self.chan_mask, self.chan_rate_dt = _dissipator_channels(params, dt_us)
        self.pair_map = _pair_map(params)
        self.alpha_ss = cavity.steady_alpha_matrix(params, spec.drive_on)
        self.ffac = cavity.field_step_factors(params, dt_us)
        a, b, phi = record_calibration(params)
        self.e_miphi = np.exp(-1j * phi)
        pf = np.zeros(16)
        pf[0] = dt_us
        pf[1] = params.dt_sim_ns
        pf[3] = np.sqrt(params.kappa_ang[0])
        pf[4] = np.sqrt(params.kappa_ang[1])
        pf[5] = params.eta[0]
        pf[6] = params.eta[1]
        pf[7] = 1.0 if spec.measurement_on else 0.0
        pf[8] = 1.0 if spec.mean_mode else 0.0
        pf[9] = 1.0
        pf[10], pf[11], pf[12], pf[13] = a[0], b[0], a[1], b[1]
        pf[14] = POS_TOL
        pf[15] = HERM_TOL
        self.pf = pf


class _TelegraphPacks:
    """Precomputed constant arrays for the classical engine."""

    def __init__(self, params: DeviceParams, spec: TrajectorySpec):
        dt_us = params.dt_ctrl_ns * 1e-3
        self.dt_us = dt_us
        self.pair_map = _pair_map(params)
        self.alpha_ss = cavity.steady_alpha_matrix(params, spec.drive_on)
        self.ffac = cavity.field_step_factors(params, dt_us)
        a, b, phi = record_calibration(params)
        self.e_miphi = np.exp(-1j * phi)
        self.rates = np.column_stack([params.decay_rate_per_us,
                                      params.excitation_rate_per_us])
        tf = np.zeros(12)
        tf[0] = dt_us
        tf[1] = params.dt_ctrl_ns
        tf[2] = np.sqrt(params.kappa_ang[0])
        tf[3] = np.sqrt(params.kappa_ang[1])
        tf[4] = abs(a[0]) / np.sqrt(params.eta[0] * dt_us)
        tf[5] = abs(a[1]) / np.sqrt(params.eta[1] * dt_us)
        tf[6] = 1.0 if spec.measurement_on else 0.0
        tf[7] = 1.0
        tf[8], tf[9], tf[10], tf[11] = a[0], b[0], a[1], b[1]
        self.tf = tf


def _prepare_common(params: DeviceParams, spec: TrajectorySpec):
    n_ctrl = int(math.ceil(spec.duration_us * 1000.0 / params.dt_ctrl_ns - 1e-9))
    horizon_ns = n_ctrl * params.dt_ctrl_ns
    inj = sorted(spec.injections, key=lambda e: e[0])
    inj_t = np.array([t * 1000.0 for t, _ in inj], dtype=float)
    inj_q = np.array([q for _, q in inj], dtype=np.int64)
    snaps_us = np.array([] if spec.snapshot_times_us is None
                        else sorted(spec.snapshot_times_us), dtype=float)
    if snaps_us.size and snaps_us[-1] * 1000.0 > horizon_ns + 1e-6:
        raise model.ConfigError("snapshot time beyond the trajectory horizon")
    snap_t = snaps_us * 1000.0
    n_rec = n_ctrl // max(spec.record_every, 1) if spec.store_records else 0
    return n_ctrl, inj_t, inj_q, snaps_us, snap_t, n_rec


def _resolve_workers(workers):
    if workers is None:
        workers = os.cpu_count() or 1
    return max(1, int(workers))


def _run_indexed(fn, n_traj: int, workers: int):
    if workers <= 1 or n_traj <= 1:
        for idx in range(n_traj):
            fn(idx)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fn, range(n_traj)))


def run_batch(params: DeviceParams, spec: TrajectorySpec, n_traj: int, seed: int,
              engine: str = "sme", workers: int | None = None) -> BatchResult:
    """Run n_traj independent trajectories; deterministic in (seed, config)."""
    if engine == "sme":
        return _run_sme_batch(params, spec, n_traj, seed, workers)
    if engine == "telegraph":
        return _run_telegraph_batch(params, spec, n_traj, seed, workers)
    raise model.ConfigError(f"unknown engine {engine!r}")


def _traj_stream_args(spec: TrajectorySpec, idx: int):
    if spec.antithetic:
        return idx // 2, -1.0 if (idx % 2) else 1.0
    return idx, 1.0


def _run_sme_batch(params, spec, n_traj, seed, workers):
    packs = _SmePacks(params, spec)
    n_ctrl, inj_t, inj_q, snaps_us, snap_t, n_rec = _prepare_common(params, spec)
    rho0 = _as_density_matrix(spec.initial_state)
    ccfg = controller_config(params, codespace=spec.codespace,
                             feedback_on=spec.feedback_on and spec.measurement_on)

    n_snap = snap_t.size
    snapshots = np.zeros((n_traj, n_snap, 8, 8), dtype=complex) if n_snap else None
    records = np.zeros((n_traj, n_rec, 7)) if n_rec else None
    diagnostics = np.zeros((n_traj, 4))
    events: list = [None] * n_traj
    errors: list = [None] * n_traj

    def one(idx: int):
        stream_id, gsign = _traj_stream_args(spec, idx)
        pf = packs.pf.copy()
        pf[9] = gsign
        rho = rho0.copy()
        alpha = packs.alpha_ss.copy()
        cst = initial_controller_state()
        ev_t = np.empty(spec.max_events)
        ev_k = np.empty(spec.max_events, dtype=np.int64)
        diag = np.array([0.0, 1.0, 0.0, -1.0])
        rho_out = snapshots[idx] if snapshots is not None else np.zeros((0, 8, 8), dtype=complex)
        rec_out = records[idx] if records is not None else np.zeros((0, 7))
        err, nev = sme_kernel(
            rho, alpha, pf, packs.static_m, packs.deph, packs.alpha_ss, packs.ffac,
            packs.e_miphi, packs.pair_map, packs.chan_dst, packs.chan_mask,
            packs.chan_rate_dt, ccfg, cst, inj_t, inj_q, snap_t, rho_out,
            rec_out, ev_t, ev_k, diag,
            n_ctrl, packs.n_sub, spec.check_every, spec.record_every if n_rec else 0,
            np.uint64(seed), np.uint64(stream_id))
        diagnostics[idx] = diag
        events[idx] = (ev_t[:nev].copy(), ev_k[:nev].copy())
        errors[idx] = err

    _run_indexed(one, n_traj, _resolve_workers(workers))

    for idx, err in enumerate(errors):
        if err == 1:
            d = diagnostics[idx]
            raise IntegratorError(
                f"trajectory {idx} violated state invariants at step {int(d[3])}: "
                f"max hermiticity deviation {d[0]:.3e}, min eigenvalue {d[1]:.3e}")
        if err == 2:
            raise IntegratorError(f"trajectory {idx} overflowed its event buffer")

    return BatchResult(engine="sme", n_traj=n_traj, seed=seed,
                       snapshot_times_us=snaps_us, events=events,
                       snapshots=snapshots, records=records,
                       diagnostics=diagnostics)


def _run_telegraph_batch(params, spec, n_traj, seed, workers):
    packs = _TelegraphPacks(params, spec)
    n_ctrl, inj_t, inj_q, snaps_us, snap_t, n_rec = _prepare_common(params, spec)
    if not isinstance(spec.initial_state, (int, np.integer)):
        raise model.ConfigError("telegraph engine requires a basis-state initial state")
    label0 = int(spec.initial_state)
    ccfg = controller_config(params, codespace=spec.codespace,
                             feedback_on=spec.feedback_on and spec.measurement_on)

    n_snap = snap_t.size
    labels = np.zeros((n_traj, n_snap), dtype=np.int64) if n_snap else None
    records = np.zeros((n_traj, n_rec, 7)) if n_rec else None
    final_labels = np.zeros(n_traj, dtype=np.int64)
    events: list = [None] * n_traj

    def one(idx: int):
        stream_id, gsign = _traj_stream_args(spec, idx)
        tf = packs.tf.copy()
        tf[7] = gsign
        alpha = packs.alpha_ss.copy()
        cst = initial_controller_state()
        ev_t = np.empty(spec.max_events)
        ev_k = np.empty(spec.max_events, dtype=np.int64)
        lab_out = labels[idx] if labels is not None else np.zeros(0, dtype=np.int64)
        rec_out = records[idx] if records is not None else np.zeros((0, 7))
        fin, nev = telegraph_kernel(
            label0, alpha, tf, packs.rates, packs.alpha_ss, packs.ffac,
            packs.e_miphi, packs.pair_map, ccfg, cst, inj_t, inj_q,
            snap_t, lab_out, rec_out, ev_t, ev_k,
            n_ctrl, spec.record_every if n_rec else 0,
            np.uint64(seed), np.uint64(stream_id))
        final_labels[idx] = fin
        events[idx] = (ev_t[:nev].copy(), ev_k[:nev].copy())

    _run_indexed(one, n_traj, _resolve_workers(workers))

    return BatchResult(engine="telegraph", n_traj=n_traj, seed=seed,
                       snapshot_times_us=snaps_us, events=events,
                       labels=labels, records=records, final_labels=final_labels)


# --------------------------------------------------------------------------
# Readable single-step reference (the jitted kernel is tested against it)
# --------------------------------------------------------------------------

def sme_step(rho: np.ndarray, fields: cavity.PointerFields, params: DeviceParams,
             dW: np.ndarray, *, measurement_on: bool = True, mean_mode: bool = False):
    """One dt_sim update of (state, fields); returns (rho', fields', records).

    numpy mirror of the jitted stepper, kept for tests and inspection.
    The diagonal channels (Hamiltonian phases, measurement, pure
    dephasing) act elementwise and are applied as exact per-step
    exponentials: the conditioned share of each measurement channel via
    the stochastic Kraus factor exp(-eta(|c|^2+c^2)dt/2 + sqrt(eta) c dy),
    the unconditioned share via the positive Hadamard kernel
    exp((1-eta)(c_s conj(c_t) - |c_s|^2/2 - |c_t|^2/2) dt); only the
    decay / thermal-excitation population feeds are first order in dt.
    """
    dt = params.dt_sim_ns * 1e-3
    static_m, deph = _static_factors(params, dt)
    pair_map = _pair_map(params)
    a, b, phi = record_calibration(params)
    e_miphi = np.exp(-1j * phi)
    sqk = np.sqrt(params.kappa_ang)
    eta = params.eta
    se = np.sqrt(eta)
    eta_s = np.zeros(2) if mean_mode else np.asarray(eta, dtype=float)

    fields = cavity.evolve_fields(fields, dt, params)
    if measurement_on:
        c = np.array([sqk[i] * fields.alpha[i, pair_map[i]] for i in range(2)])
    else:
        c = np.zeros((2, 8), dtype=complex)

    pops = np.real(np.diag(rho))
    x = np.array([float(np.sum(2.0 * (c[i] * e_miphi[i]).real * pops)) for i in range(2)])
    dW = np.zeros(2) if mean_mode else np.asarray(dW, dtype=float)
    dy = se * x * dt + dW
    rec = x + dW / (se * dt)

    ch = c * e_miphi[:, None]
    f = np.ones((2, 8), dtype=complex)
    for i in range(2):
        f[i] = np.exp(-0.5 * eta_s[i] * (np.abs(ch[i]) ** 2 + ch[i] ** 2) * dt
                      + np.sqrt(eta_s[i]) * ch[i] * dy[i])
    amp2_uncond = ((1.0 - eta_s[0]) * np.abs(c[0]) ** 2
                   + (1.0 - eta_s[1]) * np.abs(c[1]) ** 2)
    m = static_m * np.exp(-0.5 * amp2_uncond * dt) * f[0] * f[1]

    z = ((1.0 - eta_s[0]) * np.outer(c[0], c[0].conj())
         + (1.0 - eta_s[1]) * np.outer(c[1], c[1].conj())) * dt
    feed = 1.0 + z * (1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0)))
    new_rho = np.outer(m, m.conj()) * feed * rho * deph

    chan_dst, chan_mask, chan_rate_dt = _dissipator_channels(params, dt)
    for ch_i in range(6):
        if chan_rate_dt[ch_i] > 0:
            msk = int(chan_mask[ch_i])
            for s_d, t_d in chan_dst[ch_i]:
                new_rho[s_d, t_d] += chan_rate_dt[ch_i] * rho[s_d ^ msk, t_d ^ msk]

    new_rho /= np.trace(new_rho).real
    return new_rho, fields, rec


def reference_noise(seed: int, traj: int, n_steps: int, params: DeviceParams):
    """The exact Wiener increments trajectory `traj` of a batch will draw."""
    dt = params.dt_sim_ns * 1e-3
    g0 = py_stream_normals(seed, traj, 0, n_steps)
    g1 = py_stream_normals(seed, traj, 1, n_steps)
    return np.sqrt(dt) * np.column_stack([g0, g1])
