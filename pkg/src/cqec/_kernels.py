"""Jitted inner loops: SME stepper, telegraph stepper, controller, classifier.

Layout conventions shared with trajectory.py / controller.py:

controller config ``ccfg`` (float64[11]):
    0 a_demod, 1 a_ctrl, 2 theta1, 3 theta2, 4 theta3, 5 latency_ns,
    6 reset_delay_ns, 7 dt_ctrl_ns, 8 sign0, 9 sign1, 10 feedback_on

controller state ``cst`` (float64[9]):
    0-1 demod memories V^DC, 2-3 controller memories V, 4-5 inversion
    window ends (ns), 6-8 pending pulse fire times per qubit (-1 if none)

physics pack ``pf`` (float64[16]):
    0 dt_sim_us, 1 dt_sim_ns, 2 unused, 3-4 sqrt(kappa_i), 5-6 eta_i,
    7 measurement_on, 8 mean_mode, 9 gaussian sign (antithetic pairing),
    10-13 record calibration a0 b0 a1 b1, 14 positivity tol, 15 herm tol

Event kind encoding in event buffers: 0..2 detection on qubit q,
10+q corrective pulse, 20+q injected flip, 30+q decay jump (telegraph),
40+q thermal excitation jump (telegraph).
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from ._rng import next_normal, next_uniform, stream_seed


# --------------------------------------------------------------------------
# Controller core
# --------------------------------------------------------------------------

@nb.njit(cache=True, nogil=True, inline="always")
def _detect(v0, v1, th1, th2, th3, held0, held1):
    # Both-low (central qubit) takes priority over the single-low patterns.
    if (not held0) and (not held1) and v0 < th3 and v1 < th3:
        return 1
    if (not held0) and v0 < th1 and v1 > th2:
        return 0
    if (not held1) and v1 < th1 and v0 > th2:
        return 2
    return -1


@nb.njit(cache=True, nogil=True)
def controller_step(cst, ccfg, raw0, raw1, now_ns):
    """One controller clock tick; returns (detection, fired pulse bitmask).

    detection is the qubit index, -1 for none, -2 for a detection that was
    suppressed because a pulse is already pending on that qubit.
    """
    feedback = ccfg[10] > 0.5
    fired = 0
    if feedback:
        for q in range(3):
            if cst[6 + q] >= 0.0 and now_ns >= cst[6 + q]:
                fired |= 1 << q
                cst[6 + q] = -1.0

    a_d = ccfg[0]
    a_c = ccfg[1]
    x0 = ccfg[8] * raw0
    x1 = ccfg[9] * raw1
    cst[0] = a_d * cst[0] + (1.0 - a_d) * x0
    cst[1] = a_d * cst[1] + (1.0 - a_d) * x1
    held0 = now_ns < cst[4]
    held1 = now_ns < cst[5]
    u0 = -cst[0] if held0 else cst[0]
    u1 = -cst[1] if held1 else cst[1]
    cst[2] = a_c * cst[2] + (1.0 - a_c) * u0
    cst[3] = a_c * cst[3] + (1.0 - a_c) * u1

    det = -1
    if feedback:
        det = _detect(cst[2], cst[3], ccfg[2], ccfg[3], ccfg[4], held0, held1)
        if det >= 0:
            if cst[6 + det] >= 0.0:
                det = -2
            else:
                cst[6 + det] = now_ns + ccfg[5]
                if det == 0 or det == 1:
                    cst[2] = -cst[2]
                    cst[4] = now_ns + ccfg[6]
                if det == 2 or det == 1:
                    cst[3] = -cst[3]
                    cst[5] = now_ns + ccfg[6]
    return det, fired


@nb.njit(cache=True, nogil=True)
def replay_kernel(times_ns, raw0, raw1, ccfg, cst, ev_t, ev_k):
    """Run the controller over a recorded trace; fills event buffers."""
    nev = 0
    for n in range(times_ns.size):
        det, _fired = controller_step(cst, ccfg, raw0[n], raw1[n], times_ns[n])
        if det >= 0:
            if nev + 2 > ev_t.size:
                return -1
            ev_t[nev] = times_ns[n]
            ev_k[nev] = det
            nev += 1
            ev_t[nev] = times_ns[n] + ccfg[5]
            ev_k[nev] = 10 + det
            nev += 1
    return nev


@nb.njit(cache=True, nogil=True)
def classify_trace(v0, v1, th1, th2, th3):
    """First threshold pattern crossed by a filtered trace (3 = none)."""
    for n in range(v0.size):
        a = v0[n]
        b = v1[n]
        if a < th3 and b < th3:
            return 1
        if a < th1 and b > th2:
            return 0
        if b < th1 and a > th2:
            return 2
    return 3


@nb.njit(cache=True, nogil=True)
def confusion_grid(v0s, v1s, labels, th1s, th2s, th3s, obj_out):
    """Sum_ij (P_ij - delta_ij)^2 over a full threshold lattice.

    v0s/v1s are filtered traces (n_traces, n_samples); labels hold the
    prepared class of each trace (0, 1, 2 = flipped qubit, 3 = none).
    """
    n_traces = v0s.shape[0]
    counts = np.zeros((4, 4), dtype=np.float64)
    class_tot = np.zeros(4, dtype=np.float64)
    for tr in range(n_traces):
        class_tot[labels[tr]] += 1.0
    for i1 in range(th1s.size):
        th1 = th1s[i1]
        for i2 in range(th2s.size):
            th2 = th2s[i2]
            for i3 in range(th3s.size):
                th3 = th3s[i3]
                counts[:, :] = 0.0
                for tr in range(n_traces):
                    pred = classify_trace(v0s[tr], v1s[tr], th1, th2, th3)
                    counts[pred, labels[tr]] += 1.0
                obj = 0.0
                for i in range(4):
                    for j in range(4):
                        p = counts[i, j] / class_tot[j] if class_tot[j] > 0 else 0.0
                        d = p - (1.0 if i == j else 0.0)
                        obj += d * d
                obj_out[i1, i2, i3] = obj
    return 0


# --------------------------------------------------------------------------
# Shared state manipulation helpers
# --------------------------------------------------------------------------

@nb.njit(cache=True, nogil=True, inline="always")
def _permute_alpha_mask(alpha, i, mask):
    if mask == 1:
        a = alpha[i, 0]; alpha[i, 0] = alpha[i, 1]; alpha[i, 1] = a
        a = alpha[i, 2]; alpha[i, 2] = alpha[i, 3]; alpha[i, 3] = a
    else:
        a = alpha[i, 0]; alpha[i, 0] = alpha[i, 2]; alpha[i, 2] = a
        a = alpha[i, 1]; alpha[i, 1] = alpha[i, 3]; alpha[i, 3] = a


@nb.njit(cache=True, nogil=True, inline="always")
def permute_alpha_on_flip(alpha, q):
    # resonator 0 reads (q0, q1); resonator 1 reads (q1, q2)
    if q == 0:
        _permute_alpha_mask(alpha, 0, 2)
    elif q == 1:
        _permute_alpha_mask(alpha, 0, 1)
        _permute_alpha_mask(alpha, 1, 2)
    else:
        _permute_alpha_mask(alpha, 1, 1)


@nb.njit(cache=True, nogil=True, inline="always")
def _apply_flip_rho(rho, scr, q):
    msk = 4 >> q
    for s in range(8):
        for t in range(8):
            scr[s, t] = rho[s, t]
    for s in range(8):
        for t in range(8):
            rho[s, t] = scr[s ^ msk, t ^ msk]


# --------------------------------------------------------------------------
# Stochastic master equation engine
# --------------------------------------------------------------------------

@nb.njit(cache=True, nogil=True)
def sme_kernel(rho, alpha, pf, static_m, deph, alpha_ss, ffac, e_miphi,
               pair_map, chan_dst, chan_mask, chan_rate_dt,
               ccfg, cst, inj_t, inj_q, snap_t, rho_out,
               rec_out, ev_t, ev_k, diag,
               n_ctrl, n_sub, check_every, store_every,
               master_seed, traj_id):
    """Advance one conditioned trajectory through n_ctrl controller periods.

    All measurement and dephasing operators are diagonal, so their joint
    action on rho is elementwise and is applied as an (almost) exact
    per-step exponential: the measured share of each channel through the
    exact stochastic Kraus factor exp(-eta*(|c|^2+c^2)dt/2 + sqrt(eta)*c*dy)
    per pair state, the unmeasured share through the exact positive
    Hadamard kernel exp((1-eta)*(c_s conj(c_t) - |c_s|^2/2 - |c_t|^2/2)dt)
    (cross term Taylor-expanded to fourth order).  Only the decay /
    excitation population feeds are first order in dt; their rates are
    ~1e-3/us.  This keeps the map completely positive and its ensemble
    mean equal to the master equation without step-size bias even at
    kappa*nbar*dt ~ 0.1.  Trace is renormalized every step.

    Returns (error_code, n_events): 0 ok, 1 state-invariant violation
    (diagnostics in diag), 2 event buffer overflow.
    """
    dt = pf[0]
    dt_sim_ns = pf[1]
    sqk0 = pf[3]
    sqk1 = pf[4]
    eta0 = pf[5]
    eta1 = pf[6]
    se0 = math.sqrt(eta0)
    se1 = math.sqrt(eta1)
    meas_on = pf[7] > 0.5
    mean_mode = pf[8] > 0.5
    gsign = pf[9]
    sqdt = math.sqrt(dt)
    # conditioning shares (zero in mean mode: full channel goes unconditioned)
    es0 = 0.0 if mean_mode else eta0
    es1 = 0.0 if mean_mode else eta1
    ses0 = math.sqrt(es0)
    ses1 = math.sqrt(es1)

    st0 = stream_seed(master_seed, traj_id, np.uint64(0))
    st1 = stream_seed(master_seed, traj_id, np.uint64(1))

    scr = np.empty((8, 8), dtype=np.complex128)
    m = np.empty(8, dtype=np.complex128)
    cpair = np.empty((2, 4), dtype=np.complex128)
    fpair = np.empty((2, 4), dtype=np.complex128)
    c0 = np.empty(8, dtype=np.complex128)
    c1 = np.empty(8, dtype=np.complex128)

    nev = 0
    inj_ptr = 0
    snap_ptr = 0
    rec_ptr = 0
    step_count = 0

    for n in range(n_ctrl):
        acc0 = 0.0
        acc1 = 0.0
        for k in range(n_sub):
            now_ns = (n * n_sub + k) * dt_sim_ns
            while inj_ptr < inj_t.size and inj_t[inj_ptr] <= now_ns:
                q = inj_q[inj_ptr]
                _apply_flip_rho(rho, scr, q)
                permute_alpha_on_flip(alpha, q)
                if nev < ev_t.size:
                    ev_t[nev] = inj_t[inj_ptr]
                    ev_k[nev] = 20 + q
                    nev += 1
                inj_ptr += 1

            for i in range(2):
                for p in range(4):
                    alpha[i, p] = alpha_ss[i, p] + (alpha[i, p] - alpha_ss[i, p]) * ffac[i, p]

            if meas_on:
                for p in range(4):
                    cpair[0, p] = sqk0 * alpha[0, p]
                    cpair[1, p] = sqk1 * alpha[1, p]
            else:
                for i in range(2):
                    for p in range(4):
                        cpair[i, p] = 0.0
            for s in range(8):
                c0[s] = cpair[0, pair_map[0, s]]
                c1[s] = cpair[1, pair_map[1, s]]

            x0 = 0.0
            x1 = 0.0
            for s in range(8):
                pr = rho[s, s].real
                x0 += 2.0 * (c0[s] * e_miphi[0]).real * pr
                x1 += 2.0 * (c1[s] * e_miphi[1]).real * pr

            if mean_mode:
                dw0 = 0.0
                dw1 = 0.0
            else:
                st0, g0 = next_normal(st0)
                st1, g1 = next_normal(st1)
                dw0 = gsign * g0 * sqdt
                dw1 = gsign * g1 * sqdt
            dy0 = se0 * x0 * dt + dw0
            dy1 = se1 * x1 * dt + dw1
            acc0 += x0 + dw0 / (se0 * dt)
            acc1 += x1 + dw1 / (se1 * dt)

            # exact stochastic Kraus factor per resonator pair state
            for p in range(4):
                ch = cpair[0, p] * e_miphi[0]
                z = -0.5 * es0 * (ch.real * ch.real + ch.imag * ch.imag + ch * ch) * dt \
                    + ses0 * ch * dy0
                fpair[0, p] = np.exp(z)
                ch = cpair[1, p] * e_miphi[1]
                z = -0.5 * es1 * (ch.real * ch.real + ch.imag * ch.imag + ch * ch) * dt \
                    + ses1 * ch * dy1
                fpair[1, p] = np.exp(z)
            for s in range(8):
                a2u = ((1.0 - es0) * (c0[s].real * c0[s].real + c0[s].imag * c0[s].imag)
                       + (1.0 - es1) * (c1[s].real * c1[s].real + c1[s].imag * c1[s].imag))
                m[s] = static_m[s] * math.exp(-0.5 * a2u * dt) \
                    * fpair[0, pair_map[0, s]] * fpair[1, pair_map[1, s]]

            for s in range(8):
                for t in range(8):
                    scr[s, t] = rho[s, t]
            for s in range(8):
                for t in range(8):
                    z = ((1.0 - es0) * c0[s] * c0[t].conjugate()
                         + (1.0 - es1) * c1[s] * c1[t].conjugate()) * dt
                    feed = 1.0 + z * (1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0)))
                    rho[s, t] = m[s] * m[t].conjugate() * feed * scr[s, t] * deph[s, t]
            for ch_i in range(6):
                rdt = chan_rate_dt[ch_i]
                if rdt > 0.0:
                    msk = chan_mask[ch_i]
                    for e in range(16):
                        ds = chan_dst[ch_i, e, 0]
                        dt_c = chan_dst[ch_i, e, 1]
                        rho[ds, dt_c] += rdt * scr[ds ^ msk, dt_c ^ msk]

            tr = 0.0
            for s in range(8):
                tr += rho[s, s].real
            inv_tr = 1.0 / tr
            for s in range(8):
                for t in range(8):
                    rho[s, t] *= inv_tr

            step_count += 1
            if check_every > 0 and step_count % check_every == 0:
                tr = 0.0
                for s in range(8):
                    tr += rho[s, s].real
                if abs(tr - 1.0) > diag[2]:
                    diag[2] = abs(tr - 1.0)
                hd = 0.0
                for s in range(8):
                    for t in range(s, 8):
                        dv = rho[s, t] - rho[t, s].conjugate()
                        ad = abs(dv)
                        if ad > hd:
                            hd = ad
                if hd > diag[0]:
                    diag[0] = hd
                w_eig = np.linalg.eigvalsh(rho)
                if w_eig[0] < diag[1]:
                    diag[1] = w_eig[0]
                if hd > pf[15] or w_eig[0] < -pf[14] or abs(tr - 1.0) > 1e-7:
                    diag[3] = float(step_count)
                    return 1, nev

            # snapshots land on the sim grid (pre-controller at boundaries)
            post_ns = now_ns + dt_sim_ns
            while snap_ptr < snap_t.size and snap_t[snap_ptr] <= post_ns + 1e-9:
                for s in range(8):
                    for t in range(8):
                        rho_out[snap_ptr, s, t] = rho[s, t]
                snap_ptr += 1

        now = (n + 1) * n_sub * dt_sim_ns
        vr0 = pf[10] * (acc0 / n_sub) + pf[11]
        vr1 = pf[12] * (acc1 / n_sub) + pf[13]
        det, fired = controller_step(cst, ccfg, vr0, vr1, now)
        if det >= 0:
            if nev + 2 > ev_t.size:
                return 2, nev
            ev_t[nev] = now
            ev_k[nev] = det
            nev += 1
            ev_t[nev] = now + ccfg[5]
            ev_k[nev] = 10 + det
            nev += 1
        if fired != 0:
            for q in range(3):
                if fired & (1 << q):
                    _apply_flip_rho(rho, scr, q)
                    permute_alpha_on_flip(alpha, q)

        if store_every > 0 and (n + 1) % store_every == 0 and rec_ptr < rec_out.shape[0]:
            rec_out[rec_ptr, 0] = now
            rec_out[rec_ptr, 1] = vr0
            rec_out[rec_ptr, 2] = vr1
            rec_out[rec_ptr, 3] = cst[0]
            rec_out[rec_ptr, 4] = cst[1]
            rec_out[rec_ptr, 5] = cst[2]
            rec_out[rec_ptr, 6] = cst[3]
            rec_ptr += 1

    return 0, nev


# --------------------------------------------------------------------------
# Classical telegraph engine
# --------------------------------------------------------------------------

@nb.njit(cache=True, nogil=True)
def telegraph_kernel(label0, alpha, tf, rates, alpha_ss, ffac, e_miphi, pair_map,
                     ccfg, cst, inj_t, inj_q, snap_t, lab_out,
                     rec_out, ev_t, ev_k,
                     n_ctrl, store_every, master_seed, traj_id):
    """Classical hidden-Markov cross-check engine at controller granularity.

    tf (float64[12]): 0 dt_ctrl_us, 1 dt_ctrl_ns, 2-3 sqrt(kappa_i),
    4-5 record noise sigma per sample, 6 measurement_on, 7 gaussian sign,
    8-11 calibration a0 b0 a1 b1.  rates (3, 2): decay and excitation per us.
    Returns (final_label, n_events).
    """
    dt_us = tf[0]
    dt_ns = tf[1]
    meas_on = tf[6] > 0.5
    gsign = tf[7]

    st0 = stream_seed(master_seed, traj_id, np.uint64(0))
    st1 = stream_seed(master_seed, traj_id, np.uint64(1))
    stf = stream_seed(master_seed, traj_id, np.uint64(2))

    label = label0
    nev = 0
    inj_ptr = 0
    snap_ptr = 0
    rec_ptr = 0

    for n in range(n_ctrl):
        t0_ns = n * dt_ns
        now = (n + 1) * dt_ns

        while inj_ptr < inj_t.size and inj_t[inj_ptr] <= t0_ns:
            q = inj_q[inj_ptr]
            label ^= 4 >> q
            permute_alpha_on_flip(alpha, q)
            if nev < ev_t.size:
                ev_t[nev] = inj_t[inj_ptr]
                ev_k[nev] = 20 + q
                nev += 1
            inj_ptr += 1

        for j in range(3):
            exc = (label >> (2 - j)) & 1
            rate = rates[j, 0] if exc == 1 else rates[j, 1]
            if rate > 0.0:
                stf, u = next_uniform(stf)
                if u < rate * dt_us:
                    label ^= 4 >> j
                    permute_alpha_on_flip(alpha, j)
                    if nev < ev_t.size:
                        ev_t[nev] = t0_ns + 0.5 * dt_ns
                        ev_k[nev] = (30 if exc == 1 else 40) + j
                        nev += 1

        for i in range(2):
            for p in range(4):
                alpha[i, p] = alpha_ss[i, p] + (alpha[i, p] - alpha_ss[i, p]) * ffac[i, p]

        if meas_on:
            x0 = 2.0 * (tf[2] * alpha[0, pair_map[0, label]] * e_miphi[0]).real
            x1 = 2.0 * (tf[3] * alpha[1, pair_map[1, label]] * e_miphi[1]).real
        else:
            x0 = 0.0
            x1 = 0.0
        st0, g0 = next_normal(st0)
        st1, g1 = next_normal(st1)
        vr0 = tf[8] * x0 + tf[9] + tf[4] * gsign * g0
        vr1 = tf[10] * x1 + tf[11] + tf[5] * gsign * g1

        det, fired = controller_step(cst, ccfg, vr0, vr1, now)
        if det >= 0:
            if nev + 2 > ev_t.size:
                return label, nev
            ev_t[nev] = now
            ev_k[nev] = det
            nev += 1
            ev_t[nev] = now + ccfg[5]
            ev_k[nev] = 10 + det
            nev += 1
        if fired != 0:
            for q in range(3):
                if fired & (1 << q):
                    label ^= 4 >> q
                    permute_alpha_on_flip(alpha, q)

        if store_every > 0 and (n + 1) % store_every == 0 and rec_ptr < rec_out.shape[0]:
            rec_out[rec_ptr, 0] = now
            rec_out[rec_ptr, 1] = vr0
            rec_out[rec_ptr, 2] = vr1
            rec_out[rec_ptr, 3] = cst[0]
            rec_out[rec_ptr, 4] = cst[1]
            rec_out[rec_ptr, 5] = cst[2]
            rec_out[rec_ptr, 6] = cst[3]
            rec_ptr += 1
        while snap_ptr < snap_t.size and snap_t[snap_ptr] <= now:
            lab_out[snap_ptr] = label
            snap_ptr += 1

    return label, nev
