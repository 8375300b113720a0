"""FPGA feedback logic emulation: filters, thresholds, pulses, reset.

The controller consumes calibrated parity records (codespace reads +1
after the assumed-parity sign normalization), low-pass filters them twice
(fast demodulation filter, then the slower accumulator), and checks the
slow traces against three thresholds: an outer-qubit flip trips one trace
below theta1 while the other stays above theta2; a central-qubit flip
trips both below theta3.  A detection queues a corrective pi-pulse after a
fixed latency and runs the reset protocol: the tripped V memories are
sign-inverted and the incoming demodulated signal is inverted for a
reset_delay window so the pending correction is not re-interpreted as a
new error.

The controller is a deterministic stream processor; it can run inside a
trajectory engine or standalone over recorded traces (replay).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from ._kernels import _detect, classify_trace, controller_step, replay_kernel
from .model import SECTORS, ConfigError, DeviceParams

NEVER = -1.0e18

DETECT_NAMES = {0: "detect_q0", 1: "detect_q1", 2: "detect_q2"}


@dataclass(frozen=True)
class ControllerEvent:
    kind: str       # detect_q0 | detect_q1 | detect_q2 | pulse_fired
    time_ns: float
    qubit: int


def one_pole_decay(tau_ns: float, dt_ns: float) -> float:
    """Per-sample memory factor a = exp(-dt/tau) of a one-pole filter."""
    return math.exp(-dt_ns / tau_ns)


def one_pole_filter(x, tau_ns: float, dt_ns: float, init: float = 0.0) -> np.ndarray:
    """y[n] = a*y[n-1] + (1-a)*x[n] with y[-1] = init; unit DC gain."""
    a = one_pole_decay(tau_ns, dt_ns)
    x = np.asarray(x, dtype=float)
    zi = np.array([a * init])
    y, _ = lfilter([1.0 - a], [1.0, -a], x, zi=zi)
    return y


def demod_filter(raw, params: DeviceParams, init: float = 0.0) -> np.ndarray:
    """Demodulation stage: one-pole filter with the fast time constant."""
    return one_pole_filter(raw, params.tau_demod_ns, params.dt_ctrl_ns, init)


def ctrl_filter(vdc, params: DeviceParams, init: float = 0.0) -> np.ndarray:
    """Secondary accumulator stage with the controller time constant."""
    return one_pole_filter(vdc, params.tau_ctrl_ns, params.dt_ctrl_ns, init)


def detect(v0: float, v1: float, params: DeviceParams,
           held0: bool = False, held1: bool = False) -> int | None:
    """Threshold detection on one filtered sample; None when quiescent.

    The both-low central-qubit pattern is evaluated first; a resonator
    inside its reset hold window cannot trip a pattern.
    """
    code = _detect(v0, v1, params.theta1, params.theta2, params.theta3, held0, held1)
    return None if code < 0 else int(code)


def codespace_signs(codespace: str) -> tuple[float, float]:
    """Assumed-parity signs making the chosen codespace read (+1, +1)."""
    if codespace not in SECTORS:
        raise ConfigError(f"unknown codespace sector {codespace!r}")
    return (1.0 if codespace[0] == "E" else -1.0,
            1.0 if codespace[1] == "E" else -1.0)


def controller_config(params: DeviceParams, codespace: str = "EE",
                      feedback_on: bool = True) -> np.ndarray:
    """Packed controller constants consumed by the jitted stepper."""
    s0, s1 = codespace_signs(codespace)
    return np.array([
        one_pole_decay(params.tau_demod_ns, params.dt_ctrl_ns),
        one_pole_decay(params.tau_ctrl_ns, params.dt_ctrl_ns),
        params.theta1, params.theta2, params.theta3,
        params.latency_ns, params.reset_delay_ns, params.dt_ctrl_ns,
        s0, s1,
        1.0 if feedback_on else 0.0,
    ])


def initial_controller_state() -> np.ndarray:
    """Settled quiescent state: both filter memories at the codespace level."""
    cst = np.zeros(9)
    cst[0:4] = 1.0
    cst[4] = NEVER
    cst[5] = NEVER
    cst[6:9] = -1.0
    return cst


class ControllerSim:
    """Stateful sample-by-sample wrapper around the jitted controller."""

    def __init__(self, params: DeviceParams, codespace: str = "EE",
                 feedback_on: bool = True):
        self.params = params
        self.ccfg = controller_config(params, codespace, feedback_on)
        self.state = initial_controller_state()

    def step(self, raw0: float, raw1: float, now_ns: float) -> tuple[list[ControllerEvent], int]:
        """Feed one record sample; returns (events, fired pulse bitmask)."""
        det, fired = controller_step(self.state, self.ccfg, raw0, raw1, now_ns)
        events = []
        if det >= 0:
            events.append(ControllerEvent(DETECT_NAMES[det], now_ns, det))
            events.append(ControllerEvent("pulse_fired", now_ns + self.params.latency_ns, det))
        return events, fired

    @property
    def v(self) -> np.ndarray:
        return self.state[2:4].copy()

    @property
    def vdc(self) -> np.ndarray:
        return self.state[0:2].copy()


def replay_records(times_ns, raw0, raw1, params: DeviceParams,
                   codespace: str = "EE") -> list[ControllerEvent]:
    """Run the controller offline over a recorded raw trace."""
    times_ns = np.ascontiguousarray(times_ns, dtype=float)
    raw0 = np.ascontiguousarray(raw0, dtype=float)
    raw1 = np.ascontiguousarray(raw1, dtype=float)
    ccfg = controller_config(params, codespace, feedback_on=True)
    cap = max(64, 4 * times_ns.size // 100 + 64)
    while True:
        ev_t = np.empty(cap)
        ev_k = np.empty(cap, dtype=np.int64)
        nev = replay_kernel(times_ns, raw0, raw1, ccfg,
                            initial_controller_state(), ev_t, ev_k)
        if nev >= 0:
            break
        cap *= 4
    events = []
    for i in range(nev):
        k = int(ev_k[i])
        if k < 10:
            events.append(ControllerEvent(DETECT_NAMES[k], float(ev_t[i]), k))
        else:
            events.append(ControllerEvent("pulse_fired", float(ev_t[i]), k - 10))
    events.sort(key=lambda e: (e.time_ns, e.kind))
    return events


def run_noiseless_loop(params: DeviceParams, injections, duration_us: float,
                       codespace: str = "EE"):
    """Closed feedback loop over ideal square-wave records (no noise).

    The plant is a classical parity label that responds instantly: each
    record sample is +-1 according to the current parities.  Used to
    verify reset soundness and dead-time phenomenology in isolation from
    the stochastic engines.

    Returns (events, records) with records shaped (n, 7) in the standard
    record-CSV column order.
    """
    sim = ControllerSim(params, codespace, feedback_on=True)
    s0, s1 = codespace_signs(codespace)
    # physical parity signs; the calibrated record reads +1 even, -1 odd and
    # the controller applies the assumed-parity normalization itself
    parity = np.array([s0, s1])
    inj = sorted(((t_us * 1000.0, q) for t_us, q in injections), key=lambda e: e[0])
    inj_ptr = 0
    dt = params.dt_ctrl_ns
    n = int(round(duration_us * 1000.0 / dt))
    records = np.zeros((n, 7))
    events: list[ControllerEvent] = []

    def flip(q: int):
        if q in (0, 1):
            parity[0] = -parity[0]
        if q in (1, 2):
            parity[1] = -parity[1]

    for k in range(n):
        now = (k + 1) * dt
        while inj_ptr < len(inj) and inj[inj_ptr][0] <= now - dt:
            flip(inj[inj_ptr][1])
            inj_ptr += 1
        r0 = float(parity[0])
        r1 = float(parity[1])
        evs, fired = sim.step(r0, r1, now)
        events.extend(evs)
        for q in range(3):
            if fired & (1 << q):
                flip(q)
        records[k] = (now, r0, r1, *sim.vdc, *sim.v)
    events.sort(key=lambda e: (e.time_ns, e.kind))
    return events, records


def classify_filtered_trace(v0, v1, theta1: float, theta2: float, theta3: float) -> int:
    """Offline first-crossing classification of a filtered trace (3 = none)."""
    return int(classify_trace(np.ascontiguousarray(v0, dtype=float),
                              np.ascontiguousarray(v1, dtype=float),
                              theta1, theta2, theta3))


# --------------------------------------------------------------------------
# Record / event CSV formats
# --------------------------------------------------------------------------

RECORD_COLUMNS = ("time_ns", "r0", "r1", "vdc0", "vdc1", "v0", "v1")
EVENT_COLUMNS = ("time_ns", "event", "qubit")


def write_records_csv(path, records: np.ndarray):
    """Write a record array (n, 7) in the standard column order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for row in np.asarray(records):
            w.writerow([repr(float(v)) for v in row])


def read_records_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != RECORD_COLUMNS:
            raise ConfigError(f"unexpected record CSV header {header}")
        rows = [[float(v) for v in row] for row in r]
    return np.array(rows)


def write_events_csv(path, events: list[ControllerEvent]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_COLUMNS)
        for ev in events:
            w.writerow([repr(float(ev.time_ns)), ev.kind, ev.qubit])


def read_events_csv(path) -> list[ControllerEvent]:
    events = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != EVENT_COLUMNS:
            raise ConfigError(f"unexpected event CSV header {header}")
        for row in r:
            events.append(ControllerEvent(row[1], float(row[0]), int(row[2])))
    return events


def golden_replay(records_path, params: DeviceParams, codespace: str = "EE") -> list[ControllerEvent]:
    """Replay a record CSV file through the controller."""
    rec = read_records_csv(Path(records_path))
    return replay_records(rec[:, 0], rec[:, 1], rec[:, 2], params, codespace)
