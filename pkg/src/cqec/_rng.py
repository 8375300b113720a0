"""Seedable per-trajectory noise streams usable inside numba kernels.

numba's builtin np.random state is per-thread, which makes results depend
on the thread schedule.  Instead each trajectory derives independent
SplitMix64 streams from (master seed, trajectory index, stream id); the
same triple always yields the same noise, for any worker count.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TRAJ_SALT = np.uint64(0xD1B54A32D192ED03)
_STREAM_SALT = np.uint64(0x8CB92BA72F3D8DD7)
_U53 = 1.0 / 9007199254740992.0  # 2^-53
_TWO_PI = 2.0 * math.pi


@nb.njit(nb.types.UniTuple(nb.uint64, 2)(nb.uint64), cache=True, nogil=True, inline="always")
def sm64_next(state):
    """Advance a SplitMix64 state; returns (new_state, output word)."""
    state = state + _GAMMA
    z = state
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    z = z ^ (z >> np.uint64(31))
    return state, z


@nb.njit(nb.uint64(nb.uint64, nb.uint64, nb.uint64), cache=True, nogil=True)
def stream_seed(master, traj, stream):
    """Derive the state of stream `stream` of trajectory `traj`."""
    x = np.uint64(master) ^ (np.uint64(traj) * _TRAJ_SALT)
    x ^= np.uint64(stream) * _STREAM_SALT
    x, z1 = sm64_next(x)
    _, z2 = sm64_next(z1)
    return z2


@nb.njit(nb.types.Tuple((nb.uint64, nb.float64))(nb.uint64), cache=True, nogil=True, inline="always")
def next_uniform(state):
    """(new_state, u) with u uniform in [0, 1)."""
    state, z = sm64_next(state)
    return state, (z >> np.uint64(11)) * _U53


@nb.njit(nb.types.Tuple((nb.uint64, nb.float64))(nb.uint64), cache=True, nogil=True, inline="always")
def next_normal(state):
    """(new_state, g) with g standard normal (Box-Muller)."""
    state, u1 = next_uniform(state)
    state, u2 = next_uniform(state)
    r = math.sqrt(-2.0 * math.log(1.0 - u1))
    return state, r * math.cos(_TWO_PI * u2)


def py_stream_normals(master: int, traj: int, stream: int, n: int) -> np.ndarray:
    """Pure-python reference of a stream's normals (for determinism tests)."""
    mask = (1 << 64) - 1

    def mix(state):
        state = (state + int(_GAMMA)) & mask
        z = state
        z = ((z ^ (z >> 30)) * int(_MIX1)) & mask
        z = ((z ^ (z >> 27)) * int(_MIX2)) & mask
        z = z ^ (z >> 31)
        return state, z

    x = (master ^ ((traj * int(_TRAJ_SALT)) & mask)) & mask
    x = (x ^ ((stream * int(_STREAM_SALT)) & mask)) & mask
    x, z1 = mix(x)
    _, z2 = mix(z1)
    state = z2
    out = np.empty(n)
    for k in range(n):
        state, w1 = mix(state)
        u1 = (w1 >> 11) * _U53
        state, w2 = mix(state)
        u2 = (w2 >> 11) * _U53
        out[k] = math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(_TWO_PI * u2)
    return out
