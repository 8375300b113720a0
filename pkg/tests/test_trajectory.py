"""Trajectory engines: stepper correctness, conditioning, cross-validation."""

import math

import numpy as np
import pytest

from cqec import cavity
from cqec.model import basis_state_density, pauli_z_expectations, sector_of_state
from cqec.trajectory import (
    IntegratorError,
    TrajectorySpec,
    inject_flip,
    measurement_rate,
    record_calibration,
    reference_noise,
    run_batch,
    sme_step,
)
from oracles import lindblad_solve


def test_measurement_rate_vanishes_without_dispersive_shift(params):
    p = params.with_updates(chi_mhz=[1e-9, 1e-9])
    assert measurement_rate(p, 0) == pytest.approx(0.0, abs=1e-12)
    assert measurement_rate(p, 1) == pytest.approx(0.0, abs=1e-12)


def test_measurement_rate_doubles_with_nbar(params):
    g1 = measurement_rate(params, 0)
    g2 = measurement_rate(params.with_updates(nbar_odd=[4.0, 4.0]), 0)
    assert g2 == pytest.approx(2.0 * g1, rel=1e-12)
    assert g1 > 0


def test_record_calibration_maps_parities(params):
    a, b, phi = record_calibration(params)
    for i in range(2):
        sqk = math.sqrt(params.kappa_ang[i])
        rot = np.exp(-1j * phi[i])
        x_odd = 2 * sqk * (cavity.steady_state_field(1, params, i) * rot).real
        x_e0 = 2 * sqk * (cavity.steady_state_field(0, params, i) * rot).real
        x_e1 = 2 * sqk * (cavity.steady_state_field(3, params, i) * rot).real
        assert a[i] * x_odd + b[i] == pytest.approx(-1.0)
        assert a[i] * x_e0 + b[i] == pytest.approx(1.0)
        assert a[i] * x_e1 + b[i] == pytest.approx(1.0)


def test_inject_flip_basics(params):
    rho = basis_state_density(0)
    fields = cavity.steady_fields(params)
    rho1, f1 = inject_flip(rho, fields, 0)
    assert rho1[0b100, 0b100] == pytest.approx(1.0)
    rho2, _ = inject_flip(rho1, f1, 0)
    assert np.allclose(rho2, rho)
    z_before = pauli_z_expectations(rho)
    rho3, _ = inject_flip(rho, fields, 1)
    z_after = pauli_z_expectations(rho3)
    assert z_after[0] == pytest.approx(-z_before[0])
    assert z_after[1] == pytest.approx(-z_before[1])
    with pytest.raises(ValueError):
        inject_flip(rho, fields, 3)


def test_kernel_matches_python_reference_step(params):
    """The jitted stepper and the readable numpy stepper agree bitwise-ish."""
    n_steps = 40
    psi = np.zeros(8, dtype=complex)
    psi[0] = psi[2] = psi[5] = 1 / math.sqrt(3)
    duration = n_steps * params.dt_sim_ns / 1000.0

    spec = TrajectorySpec(duration_us=duration, initial_state=psi, feedback_on=False,
                          snapshot_times_us=[duration])
    batch = run_batch(params, spec, 1, seed=99, engine="sme", workers=1)

    rho = np.outer(psi, psi.conj())
    fields = cavity.steady_fields(params)
    noise = reference_noise(99, 0, n_steps, params)
    for k in range(n_steps):
        rho, fields, _ = sme_step(rho, fields, params, noise[k])
    assert np.allclose(batch.snapshots[0, 0], rho, atol=1e-12)


def test_diagonal_state_fixed_point_of_measurement(quiet_params):
    # no noise (mean mode), no dissipation: diagonal rho is invariant
    spec = TrajectorySpec(duration_us=2.0, initial_state=0b101, feedback_on=False,
                          snapshot_times_us=[2.0], mean_mode=True)
    batch = run_batch(quiet_params, spec, 1, seed=1, engine="sme", workers=1)
    # T1 = 1e9 us in the fixture, not infinity: allow the 4e-9 leak
    assert np.allclose(batch.snapshots[0, 0], basis_state_density(0b101), atol=1e-8)


def test_determinism_and_worker_independence(params):
    spec = TrajectorySpec(duration_us=3.0, initial_state=0, feedback_on=True,
                          snapshot_times_us=[3.0], store_records=True)
    a = run_batch(params, spec, 6, seed=5, engine="sme", workers=1)
    b = run_batch(params, spec, 6, seed=5, engine="sme", workers=2)
    assert np.array_equal(a.snapshots, b.snapshots)
    assert np.array_equal(a.records, b.records)
    for ea, eb in zip(a.events, b.events):
        assert np.array_equal(ea[0], eb[0]) and np.array_equal(ea[1], eb[1])


def test_telegraph_determinism(params):
    spec = TrajectorySpec(duration_us=50.0, initial_state=5, feedback_on=True,
                          codespace="OO", snapshot_times_us=[25.0, 50.0])
    a = run_batch(params, spec, 8, seed=5, engine="telegraph", workers=1)
    b = run_batch(params, spec, 8, seed=5, engine="telegraph", workers=2)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.final_labels, b.final_labels)


def test_ensemble_mean_matches_lindblad(params):
    """Stochastic ensemble average equals the dense master-equation oracle."""
    psi = np.zeros(8, dtype=complex)
    psi[0] = 0.5
    psi[2] = 0.5j
    psi[5] = 0.5
    psi[7] = 0.5
    t_end = 1.5
    oracle = lindblad_solve(params, np.outer(psi, psi.conj()), [t_end])[0]
    spec = TrajectorySpec(duration_us=t_end, initial_state=psi, feedback_on=False,
                          snapshot_times_us=[t_end], check_every=16)
    batch = run_batch(params, spec, 400, seed=17, engine="sme", workers=2)
    snaps = batch.snapshots[:, 0]
    mean = snaps.mean(axis=0)
    se = snaps.std(axis=0) / math.sqrt(batch.n_traj)
    diff = np.abs(mean - oracle)
    # elementwise within 3 standard errors (plus a small absolute floor for
    # elements whose sample variance underestimates at this batch size)
    assert np.all(diff <= 3.0 * np.abs(se) + 2e-4)


def test_mean_mode_equals_lindblad(params):
    rho0 = basis_state_density(0)
    oracle = lindblad_solve(params, rho0, [2.0])[0]
    spec = TrajectorySpec(duration_us=2.0, initial_state=0, feedback_on=False,
                          snapshot_times_us=[2.0], mean_mode=True)
    batch = run_batch(params, spec, 1, seed=1, engine="sme", workers=1)
    assert np.abs(batch.snapshots[0, 0] - oracle).max() < 2e-6


def test_codespace_coherence_decay_rate(quiet_params):
    # rho_{000,111} decays at (1/2) sum_i kappa_i |alpha00 - alpha11|^2
    p = quiet_params
    psi = np.zeros(8, dtype=complex)
    psi[0] = psi[7] = 1 / math.sqrt(2)
    t_end = 1.0
    spec = TrajectorySpec(duration_us=t_end, initial_state=psi, feedback_on=False,
                          snapshot_times_us=[t_end], mean_mode=True)
    batch = run_batch(p, spec, 1, seed=1, engine="sme", workers=1)
    coh = abs(batch.snapshots[0, 0][0, 7])
    rate = sum(0.5 * p.kappa_ang[i] * cavity.distinguishability(0, 3, p, i)
               for i in range(2))
    assert coh / 0.5 == pytest.approx(math.exp(-rate * t_end), rel=0.05)


def test_parity_attractor(quiet_params):
    """Measurement-only dynamics collapse onto a definite parity sector."""
    psi = np.ones(8, dtype=complex) / math.sqrt(8)
    spec = TrajectorySpec(duration_us=10.0, initial_state=psi, feedback_on=False,
                          snapshot_times_us=[10.0])
    batch = run_batch(quiet_params, spec, 40, seed=23, engine="sme", workers=2)
    for k in range(batch.n_traj):
        pops = np.real(np.diag(batch.snapshots[k, 0]))
        by_sector = {}
        for s in range(8):
            by_sector[sector_of_state(s)] = by_sector.get(sector_of_state(s), 0.0) + pops[s]
        assert max(by_sector.values()) > 1.0 - 1e-3


def test_sector_invariance(quiet_params):
    """A definite-parity state stays in its sector under measurement + ZZ."""
    psi = np.zeros(8, dtype=complex)
    psi[2] = psi[5] = 1 / math.sqrt(2)
    t_end = 5.0
    spec = TrajectorySpec(duration_us=t_end, initial_state=psi, feedback_on=False,
                          snapshot_times_us=[t_end])
    batch = run_batch(quiet_params, spec, 10, seed=31, engine="sme", workers=2)
    for k in range(batch.n_traj):
        pops = np.real(np.diag(batch.snapshots[k, 0]))
        p_oo = pops[2] + pops[5]
        assert abs(1.0 - p_oo) < 1e-9 * t_end


def test_snr_growth_recovers_measurement_rate(quiet_params):
    """d'(t)^2 of integrated raw records grows as 8 Gamma_meas t."""
    p = quiet_params
    t_end = 2.0
    n = 300

    sums = {}
    for label, state in (("even", 0), ("odd", 0b100)):
        spec = TrajectorySpec(duration_us=t_end, initial_state=state,
                              feedback_on=False, store_records=True)
        batch = run_batch(p, spec, n, seed=41, engine="sme", workers=2)
        rec = batch.records  # (n, R, 7), column 1 is the calibrated r0
        sums[label] = np.cumsum(rec[:, :, 1], axis=1)

    n_samples = sums["even"].shape[1]
    dt_us = p.dt_ctrl_ns * 1e-3
    idx = np.arange(n_samples // 10, n_samples, n_samples // 12)
    t = (idx + 1) * dt_us
    mu_e = sums["even"][:, idx].mean(axis=0)
    mu_o = sums["odd"][:, idx].mean(axis=0)
    var = 0.5 * (sums["even"][:, idx].var(axis=0) + sums["odd"][:, idx].var(axis=0))
    dprime2 = (mu_e - mu_o) ** 2 / var
    slope = np.polyfit(t, dprime2, 1)[0]
    # calibrated records have signal separation 2 and noise PSD 1/(2 Gamma),
    # so d'^2 = 8 Gamma t (both parities map to -/+1 exactly)
    gamma = measurement_rate(p, 0)
    assert slope / 8.0 == pytest.approx(gamma, rel=0.05)


def test_telegraph_record_means(quiet_params):
    spec = TrajectorySpec(duration_us=50.0, initial_state=0, feedback_on=False,
                          store_records=True)
    batch = run_batch(quiet_params, spec, 4, seed=7, engine="telegraph", workers=1)
    rec = batch.records
    assert rec[:, :, 1].mean() == pytest.approx(1.0, abs=0.05)
    assert rec[:, :, 2].mean() == pytest.approx(1.0, abs=0.05)
    spec_odd = TrajectorySpec(duration_us=50.0, initial_state=0b010, feedback_on=False,
                              store_records=True)
    batch = run_batch(quiet_params, spec_odd, 4, seed=7, engine="telegraph", workers=1)
    assert batch.records[:, :, 1].mean() == pytest.approx(-1.0, abs=0.05)


def test_telegraph_flip_counting_statistics(params):
    """Decay-event counts over long exposure match the Poisson expectation."""
    p = params.with_updates(gamma_up_per_ms=[0.0] * 3)
    duration = 100.0
    n = 100
    spec = TrajectorySpec(duration_us=duration, initial_state=0b100,
                          feedback_on=False, measurement_on=True)
    batch = run_batch(p, spec, n, seed=13, engine="telegraph", workers=2)
    decays = sum(1 for ev in batch.events for k in ev[1] if k == 30)
    # q0 starts excited and decays at most once (no re-excitation)
    expected = n * (1.0 - math.exp(-duration / p.t1_us[0]))
    sigma = math.sqrt(n * 0.25)
    assert abs(decays - expected) <= 3.0 * sigma


def test_integrator_error_on_invalid_state(params):
    bad = np.diag([1.3, -0.3, 0, 0, 0, 0, 0, 0]).astype(complex)
    spec = TrajectorySpec(duration_us=0.5, initial_state=bad, feedback_on=False,
                          check_every=1)
    with pytest.raises(IntegratorError):
        run_batch(params, spec, 1, seed=1, engine="sme", workers=1)


def test_state_invariants_along_trajectory(params):
    spec = TrajectorySpec(duration_us=20.0, initial_state=0b101, feedback_on=True,
                          codespace="OO", check_every=8)
    batch = run_batch(params, spec, 3, seed=53, engine="sme", workers=1)
    diag = batch.diagnostics
    assert diag[:, 0].max() < 1e-10     # hermiticity
    assert diag[:, 1].min() > -1e-6     # positivity
    assert diag[:, 2].max() < 1e-7      # post-renormalization trace


def test_antithetic_pairing(params):
    spec = TrajectorySpec(duration_us=1.0, initial_state=0, feedback_on=False,
                          store_records=True, antithetic=True)
    batch = run_batch(params, spec, 2, seed=9, engine="sme", workers=1)
    r0 = batch.records[0, :, 1]
    r1 = batch.records[1, :, 1]
    # sign-flipped noise around the same mean trace
    assert np.allclose(r0 + r1, 2.0 * np.ones_like(r0), atol=2e-1)
    assert not np.allclose(r0, r1)


def test_step_size_halving_mean_mode(params):
    spec = TrajectorySpec(duration_us=1.0, initial_state=0b010, feedback_on=False,
                          snapshot_times_us=[1.0], mean_mode=True)
    coarse = run_batch(params, spec, 1, seed=1, engine="sme", workers=1)
    fine = run_batch(params.with_updates(dt_sim_ns=params.dt_sim_ns / 2), spec, 1,
                     seed=1, engine="sme", workers=1)
    assert np.abs(coarse.snapshots[0, 0] - fine.snapshots[0, 0]).max() < 2e-5
