"""Counter-based Rademacher sign stream.

A sign is a pure function of ``(seed, path_id, step)``: the triple is pushed
through the SplitMix64 finalizer (a bijective 64-bit avalanche permutation)
and the top output bit is kept.  There is no generator state, so any path
and any step can be produced independently and in any order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

_MASK = (1 << 64) - 1
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_GOLDEN = 0x9E3779B97F4A7C15
_PATH_MUL = 0xD1B54A32D192ED03


def mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def stream_key(seed: int, path_id: int) -> int:
    return mix64(mix64(seed) + (path_id * _PATH_MUL))


def counter_word(seed: int, path_id: int, step: int) -> int:
    return mix64(stream_key(seed, path_id) + (step + 1) * _GOLDEN)


def sample_sign(seed: int, path_id: int, step: int) -> int:
    """+1 or -1; pure-integer reference implementation."""
    return 1 if counter_word(seed, path_id, step) >> 63 else -1


def uniform01(seed: int, path_id: int, step: int) -> float:
    """Deterministic draw in [0, 1) with 53 random bits."""
    return (counter_word(seed, path_id, step) >> 11) * 2.0 ** -53


@dataclass(frozen=True)
class SignStream:
    seed: int

    def __call__(self, path_id: int, step: int) -> int:
        return sample_sign(self.seed, path_id, step)

    def block(self, path_ids, k0: int, m: int) -> np.ndarray:
        return sign_block(self.seed, path_ids, k0, m)


# -- bulk kernels ------------------------------------------------------------

_U1 = np.uint64(_M1)
_U2 = np.uint64(_M2)
_UG = np.uint64(_GOLDEN)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S63 = np.uint64(63)
_ONE = np.uint64(1)
_UP = np.uint64(_PATH_MUL)
_S11 = np.uint64(11)
_TWO_M53 = 2.0 ** -53


@nb.njit(cache=True, nogil=True)
def _mix64_nb(z):
    z = (z ^ (z >> _S30)) * _U1
    z = (z ^ (z >> _S27)) * _U2
    return z ^ (z >> _S31)


@nb.njit(cache=True, nogil=True)
def _fill_signs(keys, k0, out):
    n, m = out.shape
    for i in range(n):
        base = keys[i] + np.uint64(k0 + 1) * _UG
        for j in range(m):
            w = _mix64_nb(base + np.uint64(j) * _UG)
            out[i, j] = 1.0 if (w >> _S63) == _ONE else -1.0


@nb.njit(cache=True, nogil=True)
def _grid_walk(keys, k0, b, s, dt, sq, x, xs, inc, eps):
    """Fused sign draw + walk update for coefficients that ignore the state.

    Uses the same operation order as the vectorized state-dependent loop
    (``b*dt + s*eps*sq``, then sequential addition) so both routes agree bitwise.
    """
    n, m = inc.shape
    for i in range(n):
        base = keys[i] + np.uint64(k0 + 1) * _UG
        xi = x[i]
        xs[i, 0] = xi
        for j in range(m):
            w = _mix64_nb(base + np.uint64(j) * _UG)
            e = 1.0 if (w >> _S63) == _ONE else -1.0
            d = b[j] * dt + s[j] * e * sq
            xi = xi + d
            eps[i, j] = e
            inc[i, j] = d
            xs[i, j + 1] = xi


@nb.njit(cache=True, nogil=True)
def _fill_keys(seed_mixed, path_ids, out):
    for i in range(len(path_ids)):
        out[i] = _mix64_nb(seed_mixed + path_ids[i] * _UP)


@nb.njit(cache=True, nogil=True)
def _fill_uniform(keys, step, out):
    for i in range(len(keys)):
        w = _mix64_nb(keys[i] + np.uint64(step + 1) * _UG)
        out[i] = np.float64(w >> _S11) * _TWO_M53


def stream_keys(seed: int, path_ids) -> np.ndarray:
    ids = np.ascontiguousarray(np.asarray(path_ids, dtype=np.int64).ravel()).view(np.uint64)
    out = np.empty(len(ids), dtype=np.uint64)
    _fill_keys(np.uint64(mix64(seed)), ids, out)
    return out


def uniform_block(seed: int, path_ids, step: int) -> np.ndarray:
    """Vectorized :func:`uniform01` over path ids."""
    keys = stream_keys(seed, path_ids)
    out = np.empty(len(keys))
    _fill_uniform(keys, np.int64(step), out)
    return out


def sign_block(seed: int, path_ids, k0: int, m: int, keys: np.ndarray | None = None) -> np.ndarray:
    """Signs for ``path_ids x [k0, k0 + m)`` as a float64 matrix of +-1."""
    if keys is None:
        keys = stream_keys(seed, path_ids)
    out = np.empty((len(keys), m), dtype=np.float64)
    _fill_signs(keys, np.int64(k0), out)
    return out


def sign_sequence(seed: int, path_id: int, n: int, start: int = 0) -> np.ndarray:
    return sign_block(seed, [path_id], start, n)[0]
