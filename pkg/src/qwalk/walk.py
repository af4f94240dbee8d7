"""Infinitesimal random walk engine.

Each path follows ``x(t + dt) = x(t) + b(t, x) dt + sigma(t, x) eps(t) sqrt(dt)``
with ``eps`` drawn from :mod:`qwalk.signs`.  Paths are simulated in fixed-size
blocks and streamed as time chunks, so every consumer sees bit-identical
numbers whatever the chunk length, thread count or memory budget.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numba as nb
import numpy as np

from .coeffs import PointMass, WalkSpec, raise_at
from .errors import EvalError, SimulationError
from .scale import QuantumScale
from .signs import _grid_walk, sign_block, stream_keys, uniform_block

BLOCK_PATHS = 8192  # fixed so per-path arithmetic never depends on P or threads
CHUNK_FLOATS = 1 << 22
DEFAULT_MEMORY_BUDGET = 1 << 24  # floats kept when materializing full paths


def default_threads() -> int:
    env = os.environ.get("QWALK_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True, eq=False)
class Path:
    scale: QuantumScale
    values: np.ndarray
    path_id: int
    seed: int

    def __post_init__(self):
        if len(self.values) != self.scale.n_q + 1:
            raise ValueError(f"path has {len(self.values)} values, expected {self.scale.n_q + 1}")

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values)

    @property
    def times(self) -> np.ndarray:
        return self.scale.grid()


class Chunk:
    """Time slice ``[k0, k0 + m]`` of a set of paths.

    ``x`` has shape ``(P, m + 1)`` (both endpoints), ``inc`` holds the
    increments exactly as the engine added them, ``eps`` the signs and
    ``sigma`` the volatility actually applied (shape ``(m,)`` when it does
    not vary across paths).  Block pieces are concatenated on first access.
    """

    def __init__(self, k0: int, parts: list[dict]):
        self.k0 = k0
        self._parts = parts
        self._cache: dict = {}

    def _get(self, name: str) -> np.ndarray:
        if name not in self._cache:
            pieces = [p[name] for p in self._parts]
            if len(pieces) == 1:
                self._cache[name] = pieces[0]
            elif name == "sigma" and all(q.ndim == 1 for q in pieces):
                self._cache[name] = pieces[0]
            else:
                m = self.m
                self._cache[name] = np.concatenate(
                    [np.broadcast_to(q, (len(p["x"]), m)) if q.ndim == 1 else q
                     for q, p in zip(pieces, self._parts)])
        return self._cache[name]

    x = property(lambda self: self._get("x"))
    inc = property(lambda self: self._get("inc"))
    sigma = property(lambda self: self._get("sigma"))
    eps = property(lambda self: self._get("eps"))

    @property
    def m(self) -> int:
        return self._parts[0]["inc"].shape[1]

    @property
    def n_paths(self) -> int:
        return sum(len(p["x"]) for p in self._parts)

    def blocks(self) -> list[dict]:
        return self._parts


# -- initial condition ---------------------------------------------------------

def initial_values(spec: WalkSpec, scale: QuantumScale, seed: int, path_ids) -> np.ndarray:
    """x(0) per path; the uniform draw uses counter index n_q so it never reuses a sign draw."""
    path_ids = np.asarray(path_ids)
    if isinstance(spec.x0, PointMass):
        return np.full(len(path_ids), float(spec.x0.value))
    lo, hi = float(spec.x0.lo), float(spec.x0.hi)
    u = uniform_block(seed, path_ids, scale.n_q)
    return lo + (hi - lo) * u


# -- per-block chunk generation ----------------------------------------------

class _Block:
    def __init__(self, spec: WalkSpec, scale: QuantumScale, seed: int, path_ids: np.ndarray):
        self.spec = spec
        self.scale = scale
        self.seed = seed
        self.path_ids = path_ids
        self.keys = stream_keys(seed, path_ids)
        self.x = initial_values(spec, scale, seed, path_ids)
        self.k = 0
        self.fail_step = np.full(len(path_ids), -1, dtype=np.int64)
        self.fail_x = np.zeros(len(path_ids))
        self.running_max = self.x.copy()
        if not spec.state_dependent:
            self._grid_coefficients()

    def _grid_coefficients(self):
        t = self.scale.grid()[:-1]
        b, bad_b = self.spec.drift_fn()(t, 0.0)
        s, bad_s = self.spec.vol_fn()(t, 0.0)
        self.b_grid = np.array(b, dtype=np.float64)
        self.s_grid = np.array(s, dtype=np.float64)
        bad = bad_b | bad_s
        self.grid_bad_step = int(np.argmax(bad)) if bad.any() else -1

    def _record(self, bad: np.ndarray, k: int, x: np.ndarray):
        new = bad & (self.fail_step < 0)
        if new.any():
            self.fail_step[new] = k
            self.fail_x[new] = x[new]

    def next_chunk(self, m: int) -> Chunk:
        n_q = self.scale.n_q
        m = min(m, n_q - self.k)
        k0 = self.k
        dt, sq = self.scale.delta_t, self.scale.sqrt_dt
        if not self.spec.state_dependent:
            n = len(self.x)
            s = self.s_grid[k0:k0 + m]
            xs = np.empty((n, m + 1))
            inc = np.empty((n, m))
            eps = np.empty((n, m))
            _grid_walk(self.keys, np.int64(k0), self.b_grid[k0:k0 + m], s, dt, sq, self.x, xs, inc, eps)
            sigma = s
            j = self.grid_bad_step - k0
            if 0 <= j < m:
                self._record(np.ones(len(self.x), dtype=bool), self.grid_bad_step, xs[:, j])
        else:
            eps = sign_block(self.seed, self.path_ids, k0, m, keys=self.keys)
            xs, inc, sigma = self._step_loop(k0, m, eps, dt, sq)
        bad = ~np.isfinite(xs[:, 1:])
        if bad.any():
            first = np.argmax(bad, axis=1)
            for i in np.flatnonzero(bad.any(axis=1) & (self.fail_step < 0)):
                self.fail_step[i] = k0 + first[i]
                self.fail_x[i] = xs[i, first[i]]
        if self.spec.variant is None:
            self.running_max = np.maximum(self.running_max, xs.max(axis=1))
        self.x = xs[:, -1].copy()
        self.k += m
        return {"x": xs, "inc": inc, "sigma": sigma, "eps": eps}

    def _step_loop(self, k0, m, eps, dt, sq):
        drift, vol = self.spec.drift_fn(), self.spec.vol_fn()
        variant = self.spec.variant
        n = len(self.x)
        xs = np.empty((n, m + 1))
        inc = np.empty((n, m))
        sig = np.empty((n, m))
        x = self.x
        xs[:, 0] = x
        for j in range(m):
            k = k0 + j
            t = k / self.scale.n_q
            b, bad_b = drift(t, x)
            s, bad_s = vol(t, x)
            if variant is not None:
                s = s + variant.boost * (self.running_max > variant.threshold)
            bad = bad_b | bad_s
            if bad.any():
                self._record(bad, k, x)
            d = b * dt + s * eps[:, j] * sq
            x = x + d
            if variant is not None:
                self.running_max = np.maximum(self.running_max, x)
            inc[:, j] = d
            sig[:, j] = s
            xs[:, j + 1] = x
        return xs, inc, sig

    def failure(self) -> SimulationError | None:
        failed = np.flatnonzero(self.fail_step >= 0)
        if len(failed) == 0:
            return None
        i = failed[0]
        k = int(self.fail_step[i])
        t = self.scale.time(k)
        x = float(self.fail_x[i])
        cause = "state became non-finite"
        for name, ast in (("volatility", self.spec.vol_ast), ("drift", self.spec.drift_ast)):
            try:
                raise_at(ast, t, x, self.spec.params)
            except EvalError as exc:
                cause = f"{name}: {exc.detail}"
        return SimulationError(f"simulation failed ({cause})", int(self.path_ids[i]), k, t, x)


def _blocks(spec, scale, seed, n_paths) -> list[_Block]:
    return [
        _Block(spec, scale, seed, np.arange(lo, min(lo + BLOCK_PATHS, n_paths), dtype=np.int64))
        for lo in range(0, n_paths, BLOCK_PATHS)
    ]


def iter_chunks(spec: WalkSpec, scale: QuantumScale, seed: int, n_paths: int,
                steps: int | None = None, threads: int = 1,
                path_ids=None) -> Iterator[Chunk]:
    """Stream all paths in lockstep, ``steps`` grid steps per chunk.

    Raises :class:`SimulationError` for the smallest failing path_id once the
    stream is exhausted.
    """
    if path_ids is None:
        blocks = _blocks(spec, scale, seed, n_paths)
    else:
        blocks = [_Block(spec, scale, seed, np.asarray(path_ids, dtype=np.int64))]
        n_paths = len(blocks[0].path_ids)
    if steps is None:
        steps = max(1, CHUNK_FLOATS // max(n_paths, 1))
    steps = max(1, min(steps, scale.n_q))
    pool = ThreadPoolExecutor(threads) if threads > 1 and len(blocks) > 1 else None
    try:
        while blocks[0].k < scale.n_q:
            k0 = blocks[0].k
            if pool is None:
                parts = [b.next_chunk(steps) for b in blocks]
            else:
                parts = list(pool.map(lambda b: b.next_chunk(steps), blocks))
            yield Chunk(k0, parts)
    finally:
        if pool is not None:
            pool.shutdown()
    for b in blocks:
        err = b.failure()
        if err is not None:
            raise err


# -- per-path accumulators ---------------------------------------------------

@nb.njit(cache=True, nogil=True)
def _accumulate(x, qv, rmax):
    n, w = x.shape
    for i in range(n):
        q = qv[i]
        r = rmax[i]
        for j in range(w - 1):
            d = x[i, j + 1] - x[i, j]
            q += d * d
            if x[i, j + 1] > r:
                r = x[i, j + 1]
        qv[i] = q
        rmax[i] = r


def quadratic_variation(path: Path | np.ndarray) -> float:
    """Sum of squared grid increments, accumulated sequentially."""
    values = path.values if isinstance(path, Path) else np.asarray(path, dtype=np.float64)
    qv = np.zeros(1)
    rmax = np.array([values[0]])
    _accumulate(np.ascontiguousarray(values[None, :]), qv, rmax)
    return float(qv[0])


@dataclass
class PathStats:
    x0: np.ndarray
    terminal: np.ndarray
    qv: np.ndarray
    running_max: np.ndarray


def moments(values: np.ndarray) -> dict:
    """Mean, variance and fourth central moment with exactly-rounded sums."""
    n = len(values)
    mean = math.fsum(values) / n
    d = values - mean
    var = math.fsum(d * d) / n
    m4 = math.fsum(d ** 4) / n
    return {"mean": mean, "var": var, "m4": m4}


@dataclass(eq=False)
class Ensemble:
    spec: WalkSpec
    scale: QuantumScale
    seed: int
    n_paths: int
    stats: PathStats
    values: np.ndarray | None = None
    threads: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def paths(self) -> list[Path] | None:
        if self.values is None:
            return None
        return [Path(self.scale, self.values[i], i, self.seed) for i in range(self.n_paths)]

    def path(self, path_id: int) -> Path:
        if self.values is not None:
            return Path(self.scale, self.values[path_id], path_id, self.seed)
        return simulate_path(self.spec, self.scale, self.seed, path_id)

    def chunks(self, steps: int | None = None) -> Iterator[Chunk]:
        return iter_chunks(self.spec, self.scale, self.seed, self.n_paths, steps, self.threads)

    def summary(self) -> dict:
        term = moments(self.stats.terminal)
        qv = moments(self.stats.qv)
        return {
            "seed": self.seed,
            "n_q": self.scale.n_q,
            "P": self.n_paths,
            "terminal": term,
            "qv": {"mean": qv["mean"], "var": qv["var"]},
        }


def simulate_ensemble(spec: WalkSpec, scale: QuantumScale, seed: int, n_paths: int,
                      threads: int | None = None, memory_budget: int = DEFAULT_MEMORY_BUDGET,
                      keep_paths: bool | None = None) -> Ensemble:
    """Simulate paths 0..P-1; full trajectories are kept only within ``memory_budget`` floats."""
    if n_paths < 1:
        raise ValueError(f"need at least one path, got {n_paths}")
    threads = default_threads() if threads is None else max(1, int(threads))
    if keep_paths is None:
        keep_paths = n_paths * (scale.n_q + 1) <= memory_budget
    values = np.empty((n_paths, scale.n_q + 1)) if keep_paths else None
    x0 = initial_values(spec, scale, seed, np.arange(n_paths))
    qv = np.zeros(n_paths)
    rmax = x0.copy()
    terminal = x0.copy()
    for ch in iter_chunks(spec, scale, seed, n_paths, threads=threads):
        lo = 0
        for part in ch.blocks():
            x = part["x"]
            hi = lo + len(x)
            _accumulate(x, qv[lo:hi], rmax[lo:hi])
            terminal[lo:hi] = x[:, -1]
            if values is not None:
                values[lo:hi, ch.k0:ch.k0 + ch.m + 1] = x
            lo = hi
    stats = PathStats(x0, terminal.copy(), qv, rmax)
    return Ensemble(spec, scale, seed, n_paths, stats, values, threads)


def simulate_path(spec: WalkSpec, scale: QuantumScale, seed: int, path_id: int) -> Path:
    values = np.empty(scale.n_q + 1)
    for ch in iter_chunks(spec, scale, seed, 1, path_ids=[path_id]):
        values[ch.k0:ch.k0 + ch.m + 1] = ch.x[0]
    return Path(scale, values, path_id, seed)
