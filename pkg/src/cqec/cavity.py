"""Classical conditional-coherent-state model of the two readout resonators.

Each resonator holds one coherent amplitude per basis state of its qubit
pair.  In the frame rotating at the parity probe (which sits on the shared
odd-parity resonance) a pair state p with detuning delta_p evolves as

    d(alpha_p)/dt = (i*delta_p - kappa/2) * alpha_p + eps

with delta_p = chi * (z_a + z_b), so both odd states sit at delta = 0 and
the even states at +-2*chi.  The drive eps is solved from the target
odd-parity photon number and chosen so the odd steady state is real
positive; that fixes the homodyne phase convention used for the records.

All rates here are angular (rad/us); module entry points taking
DeviceParams convert from the configured linear MHz exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    N_RES,
    RES_PAIRS,
    DeviceParams,
    linear_to_angular,
)

PAIR_STATES = (0, 1, 2, 3)  # 00, 01, 10, 11 of the pair, excitation bits
ODD_PAIRS = (1, 2)
EVEN_PAIRS = (0, 3)


def pair_z_sum(p: int) -> int:
    """z_a + z_b of a pair state (+2, 0, 0, -2 for 00, 01, 10, 11)."""
    za = 1 - 2 * ((p >> 1) & 1)
    zb = 1 - 2 * (p & 1)
    return za + zb


def pair_detuning_ang(p: int, params: DeviceParams, resonator: int) -> float:
    """Probe detuning of pair state `p` on `resonator`, rad/us."""
    return float(params.chi_ang[resonator]) * pair_z_sum(p)


def drive_amplitude_ang(params: DeviceParams, resonator: int) -> float:
    """Drive eps (rad/us) giving |alpha_odd|^2 = nbar_odd, real positive."""
    kappa = float(params.kappa_ang[resonator])
    return 0.5 * kappa * float(np.sqrt(params.nbar_odd[resonator]))


def steady_state_field(pair_state: int, params: DeviceParams, resonator: int) -> complex:
    """Steady-state coherent amplitude of one pair state.

    The odd states return sqrt(nbar_odd) exactly (real positive); the even
    states return the detuned-drive solution at +-2*chi.
    """
    kappa = float(params.kappa_ang[resonator])
    eps = drive_amplitude_ang(params, resonator)
    delta = pair_detuning_ang(pair_state, params, resonator)
    return eps / (0.5 * kappa - 1j * delta)


def steady_alpha_matrix(params: DeviceParams, drive_on: bool = True) -> np.ndarray:
    """(2, 4) complex steady amplitudes for both resonators."""
    if not drive_on:
        return np.zeros((N_RES, 4), dtype=complex)
    return np.array(
        [[steady_state_field(p, params, i) for p in PAIR_STATES] for i in range(N_RES)]
    )


@dataclass
class PointerFields:
    """Per-resonator conditional cavity amplitudes, one per pair basis state.

    ``alpha[i, p]`` is the field of resonator i conditioned on its qubit
    pair being in state p.  This is per-trajectory classical state; it is
    never shared between trajectories.
    """

    alpha: np.ndarray  # (2, 4) complex
    drive_on: bool = True

    def copy(self) -> "PointerFields":
        return PointerFields(self.alpha.copy(), self.drive_on)

    def photon_numbers(self) -> np.ndarray:
        return np.abs(self.alpha) ** 2


def steady_fields(params: DeviceParams, drive_on: bool = True) -> PointerFields:
    """Fields with every branch at its own steady state (tone on forever)."""
    return PointerFields(steady_alpha_matrix(params, drive_on), drive_on)


def field_step_factors(params: DeviceParams, dt_us: float) -> np.ndarray:
    """(2, 4) per-step decay factors exp((i*delta - kappa/2) * dt)."""
    out = np.empty((N_RES, 4), dtype=complex)
    for i in range(N_RES):
        kappa = float(params.kappa_ang[i])
        for p in PAIR_STATES:
            delta = pair_detuning_ang(p, params, i)
            out[i, p] = np.exp((1j * delta - 0.5 * kappa) * dt_us)
    return out


def evolve_fields(fields: PointerFields, dt_us: float, params: DeviceParams) -> PointerFields:
    """Advance all branch fields by dt with the exact exponential update.

    Each branch obeys a linear ODE, so alpha(t+dt) = alpha_ss +
    (alpha - alpha_ss) * exp((i*delta - kappa/2)*dt) holds for any dt;
    cavity dynamics are therefore step-size independent by construction.
    """
    target = steady_alpha_matrix(params, fields.drive_on)
    factors = field_step_factors(params, dt_us)
    alpha = target + (fields.alpha - target) * factors
    return PointerFields(alpha, fields.drive_on)


def flip_pair_permutation(qubit: int) -> list[tuple[int, int]]:
    """(resonator, xor-mask) label permutations induced by flipping `qubit`."""
    moves = []
    for i, (a, b) in enumerate(RES_PAIRS):
        if qubit == a:
            moves.append((i, 2))
        elif qubit == b:
            moves.append((i, 1))
    return moves


def permute_fields_on_flip(fields: PointerFields, qubit: int) -> PointerFields:
    """Relabel branch fields after a bit flip on `qubit`.

    The field values are carried over unchanged (the cavity does not jump);
    only their conditioning labels permute, which changes each branch's
    steady-state target.  Flipping the shared qubit permutes both
    resonators.
    """
    if qubit not in (0, 1, 2):
        raise ValueError(f"qubit index must be 0..2, got {qubit}")
    alpha = fields.alpha.copy()
    for i, mask in flip_pair_permutation(qubit):
        perm = [p ^ mask for p in PAIR_STATES]
        alpha[i] = alpha[i][perm]
    return PointerFields(alpha, fields.drive_on)


# --------------------------------------------------------------------------
# Steady-state response and distinguishability
# --------------------------------------------------------------------------

def scattering_response(f0: float, kappa: float) -> complex:
    """Reflection scattering parameter at detuning f0 (same units as kappa).

    S = (-2*f0 + i*kappa) / (-2*f0 - i*kappa); unit modulus for any real
    detuning (lossless, over-coupled cavity).
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return (-2.0 * f0 + 1j * kappa) / (-2.0 * f0 - 1j * kappa)


def distinguishability(m: int, n: int, fields, resonator: int) -> float:
    """D_{m,n} = |alpha_m - alpha_n|^2 for two pair states of a resonator.

    `fields` may be a PointerFields snapshot or DeviceParams (steady state).
    """
    if isinstance(fields, DeviceParams):
        fields = steady_fields(fields)
    d = fields.alpha[resonator, m] - fields.alpha[resonator, n]
    return float(np.abs(d) ** 2)


def distinguishability_ratio(params: DeviceParams, resonator: int) -> float:
    """D_{00,01} / D_{00,11} from steady-state fields (close to 4*(chi/kappa)^2)."""
    d_oe = distinguishability(0, 1, params, resonator)
    d_ee = distinguishability(0, 3, params, resonator)
    return d_oe / d_ee


def theoretical_distinguishability_ratio(params: DeviceParams, resonator: int) -> float:
    """Leading-order even/odd distinguishability ratio 4*(chi/kappa)^2."""
    return 4.0 * float(params.chi_mhz[resonator] / params.kappa_mhz[resonator]) ** 2


PAIR_LABELS = ("00", "01", "10", "11")


def distinguishability_table(params: DeviceParams) -> list[dict]:
    """All pairwise D values of both resonators (steady state), for reports."""
    rows = []
    fields = steady_fields(params)
    for i in range(N_RES):
        for m in PAIR_STATES:
            for n in PAIR_STATES:
                if m >= n:
                    continue
                rows.append({
                    "resonator": i,
                    "pair": f"{PAIR_LABELS[m]},{PAIR_LABELS[n]}",
                    "distinguishability": distinguishability(m, n, fields, i),
                })
    return rows


# --------------------------------------------------------------------------
# Dephasing
# --------------------------------------------------------------------------

def transient_dephasing(alpha0: complex, chi: float, kappa: float) -> float:
    """Net dephasing zeta of a ring-down after an odd-to-even parity flip.

    zeta = |alpha0|^2 * 16 chi^2 / (kappa^2 + 16 chi^2); the coherence in
    the new codespace contracts by exp(-zeta).  chi and kappa may be in any
    common unit.  Approaches |alpha0|^2 for chi >> kappa.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    a2 = float(np.abs(alpha0) ** 2)
    return a2 * 16.0 * chi**2 / (kappa**2 + 16.0 * chi**2)


def ringdown_dephasing_rate(alpha00: complex, alpha11: complex, chi_ang: float) -> float:
    """Instantaneous qubit dephasing rate 4*chi*Im[alpha00 * conj(alpha11)]."""
    return 4.0 * chi_ang * float(np.imag(alpha00 * np.conj(alpha11)))


def expected_flip_dephasing(params: DeviceParams, resonator: int) -> float:
    """zeta for a flip out of the odd steady state of `resonator`."""
    alpha0 = np.sqrt(float(params.nbar_odd[resonator]))
    return transient_dephasing(alpha0, float(params.chi_mhz[resonator]),
                               float(params.kappa_mhz[resonator]))


def zz_dephasing(delta_beta_mhz: float, correction_times_us) -> tuple[float, float]:
    """Net phase and dephasing from precession over random correction times.

    Computes M = <exp(i * 2*pi*delta_beta * T)> over the sample of
    correction times and returns (phi, zeta) with phi = arg M and
    zeta = -ln|M| >= 0.
    """
    times = np.asarray(correction_times_us, dtype=float)
    if times.size == 0:
        raise ValueError("correction time sample set is empty")
    m = np.mean(np.exp(1j * linear_to_angular(delta_beta_mhz) * times))
    zeta = -float(np.log(np.abs(m))) if np.abs(m) > 0 else np.inf
    return float(np.angle(m)), max(zeta, 0.0)
