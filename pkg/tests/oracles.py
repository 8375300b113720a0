"""Independent reference implementations used to validate the engines.

Everything here is built directly from dense operators and scipy
integration, sharing no stepping code with the package internals.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp

from cqec import cavity, model
from cqec.model import LOWERING, PAULI_Z, DeviceParams


def lindblad_operators(params: DeviceParams, measurement_on: bool = True,
                       fields: cavity.PointerFields | None = None):
    """(H, [(L_k, rate_k)]) dense Lindblad data for a field snapshot."""
    h = params.hamiltonian_matrix()
    ops = []
    for q in range(3):
        ops.append((LOWERING[q], params.decay_rate_per_us[q]))
        ops.append((LOWERING[q].conj().T, params.excitation_rate_per_us[q]))
        ops.append((PAULI_Z[q], 0.5 * params.dephasing_rate_per_us[q]))
    if measurement_on:
        if fields is None:
            fields = cavity.steady_fields(params)
        for i in range(2):
            diag = np.array([
                np.sqrt(params.kappa_ang[i]) * fields.alpha[i, model.pair_index(s, i)]
                for s in range(8)
            ])
            ops.append((np.diag(diag), 1.0))
    return h, ops


def lindblad_rhs_factory(params: DeviceParams, measurement_on: bool = True,
                         alpha_of_t=None):
    """RHS of the unconditioned master equation, optionally time dependent.

    alpha_of_t(t_us) -> (2, 4) complex pointer amplitudes; defaults to the
    static steady-state configuration.
    """
    h = params.hamiltonian_matrix()
    static_ops = []
    for q in range(3):
        static_ops.append((LOWERING[q], params.decay_rate_per_us[q]))
        static_ops.append((LOWERING[q].conj().T, params.excitation_rate_per_us[q]))
        static_ops.append((PAULI_Z[q], 0.5 * params.dephasing_rate_per_us[q]))
    if measurement_on and alpha_of_t is None:
        alpha_ss = cavity.steady_alpha_matrix(params)
        alpha_of_t = lambda t: alpha_ss  # noqa: E731
    pair_maps = [[model.pair_index(s, i) for s in range(8)] for i in range(2)]
    sqk = np.sqrt(params.kappa_ang)

    def rhs(t, y):
        rho = y.reshape(8, 8)
        drho = -1j * (h @ rho - rho @ h)
        for op, rate in static_ops:
            if rate > 0:
                ld = op @ rho @ op.conj().T
                anti = op.conj().T @ op
                drho += rate * (ld - 0.5 * (anti @ rho + rho @ anti))
        if measurement_on:
            alpha = alpha_of_t(t)
            for i in range(2):
                c = np.diag(sqk[i] * alpha[i][pair_maps[i]])
                drho += c @ rho @ c.conj().T - 0.5 * (
                    c.conj().T @ c @ rho + rho @ c.conj().T @ c)
        return drho.ravel()

    return rhs


def lindblad_solve(params: DeviceParams, rho0: np.ndarray, t_eval_us,
                   measurement_on: bool = True, alpha_of_t=None,
                   rtol: float = 1e-9, atol: float = 1e-11) -> np.ndarray:
    """Dense master-equation solution at the requested times, (T, 8, 8)."""
    rhs = lindblad_rhs_factory(params, measurement_on, alpha_of_t)
    t_eval = np.atleast_1d(np.asarray(t_eval_us, dtype=float))
    sol = solve_ivp(rhs, (0.0, float(t_eval[-1])), np.asarray(rho0, complex).ravel(),
                    t_eval=t_eval, rtol=rtol, atol=atol, method="DOP853")
    if not sol.success:
        raise RuntimeError(f"oracle integration failed: {sol.message}")
    return sol.y.T.reshape(-1, 8, 8)


def ringdown_alpha_of_t(params: DeviceParams, flip_time_us: float, qubit: int,
                        drive_on: bool = True):
    """Pointer amplitudes vs time for steady state, then one flip at t_flip."""
    alpha_ss = cavity.steady_alpha_matrix(params, drive_on=True)
    target = cavity.steady_alpha_matrix(params, drive_on=drive_on)
    fields0 = cavity.permute_fields_on_flip(cavity.steady_fields(params), qubit)
    kappas = params.kappa_ang
    chis = params.chi_ang

    def alpha_of_t(t):
        if t <= flip_time_us:
            return alpha_ss
        dt = t - flip_time_us
        out = np.empty((2, 4), dtype=complex)
        for i in range(2):
            for p in range(4):
                rate = 1j * cavity.pair_detuning_ang(p, params, i) - 0.5 * kappas[i]
                out[i, p] = target[i, p] + (fields0.alpha[i, p] - target[i, p]) * np.exp(rate * dt)
        del chis
        return out

    return alpha_of_t


def exponential_waiting_flip_count(rate_per_us: float, duration_us: float,
                                   n_traj: int, rng: np.random.Generator) -> int:
    """Reference Poisson count of flips over many independent intervals."""
    return int(rng.poisson(rate_per_us * duration_us, size=n_traj).sum())
