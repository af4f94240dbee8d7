"""Coupled-path distance between two walks driven by the same signs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coeffs import WalkSpec, grid_values, regularity_probe
from .errors import ConfigError
from .estimators import _jsonable
from .scale import QuantumScale
from .walk import default_threads, iter_chunks, simulate_path

PROBE_GRID = 64


@dataclass
class EquivalenceReport:
    eta_b: float
    eta_sigma: float
    x0_gap: float
    lipschitz_b: float
    lipschitz_sigma: float
    sup_path_diff: np.ndarray
    mean_sup_diff: float
    max_sup_diff: float
    rms_terminal_diff: float
    bound_used: float
    passed: bool
    pathwise_ok: bool

    def to_dict(self, per_path: bool = False) -> dict:
        out = {
            "check": "equivalence",
            "eta_b": self.eta_b,
            "eta_sigma": self.eta_sigma,
            "x0_gap": self.x0_gap,
            "lipschitz_b": self.lipschitz_b,
            "lipschitz_sigma": self.lipschitz_sigma,
            "mean_sup_diff": self.mean_sup_diff,
            "max_sup_diff": self.max_sup_diff,
            "rms_terminal_diff": self.rms_terminal_diff,
            "bound_used": self.bound_used,
            "pass": self.passed,
            "pathwise_ok": self.pathwise_ok,
            "criterion": "ensemble-mean sup diff <= bound_used; the +1 in the exponent is a safety margin",
        }
        if per_path:
            out["sup_path_diff"] = self.sup_path_diff
        return _jsonable(out)


def coefficient_gaps(spec_a: WalkSpec, spec_b: WalkSpec, x_range) -> tuple[float, float]:
    """Sup over ``[0, 1] x x_range`` of ``|b_a - b_b|`` and ``|sigma_a - sigma_b|``."""
    out = []
    for ast_a, ast_b in ((spec_a.drift_ast, spec_b.drift_ast), (spec_a.vol_ast, spec_b.vol_ast)):
        _, _, va = grid_values(ast_a, (0.0, 1.0), x_range, PROBE_GRID, spec_a.params)
        _, _, vb = grid_values(ast_b, (0.0, 1.0), x_range, PROBE_GRID, spec_b.params)
        out.append(float(np.max(np.abs(va - vb))))
    return out[0], out[1]


def coupled_distance(spec_a: WalkSpec, spec_b: WalkSpec, scale: QuantumScale, seed: int, n_paths: int,
                     scale_b: QuantumScale | None = None, threads: int | None = None) -> EquivalenceReport:
    """Simulate both specs on identical sign streams and measure how far the paths drift apart.

    The pass criterion is ensemble-mean: mean over paths of ``sup_t |x_a - x_b|``
    must not exceed ``(x0 gap + eta_b + eta_sigma) * exp(L_b + L_sigma^2 / 2 + 1)``.
    The pathwise maximum is reported alongside.
    """
    if scale_b is not None and scale_b != scale:
        raise ConfigError(f"scale mismatch: n_q={scale.n_q} vs n_q={scale_b.n_q}")
    threads = default_threads() if threads is None else threads
    sup = np.zeros(n_paths)
    x_min, x_max = math.inf, -math.inf
    x0_gap = 0.0
    term_a = term_b = None
    stream_a = iter_chunks(spec_a, scale, seed, n_paths, threads=threads)
    stream_b = iter_chunks(spec_b, scale, seed, n_paths, threads=threads)
    for ca, cb in zip(stream_a, stream_b):
        xa, xb = ca.x, cb.x
        if ca.k0 == 0:
            x0_gap = float(np.max(np.abs(xa[:, 0] - xb[:, 0])))
        np.maximum(sup, np.abs(xa - xb).max(axis=1), out=sup)
        x_min = min(x_min, float(xa.min()), float(xb.min()))
        x_max = max(x_max, float(xa.max()), float(xb.max()))
        term_a, term_b = xa[:, -1], xb[:, -1]
    if x_max <= x_min:
        x_min, x_max = x_min - 0.5, x_max + 0.5
    x_range = (x_min, x_max)
    eta_b, eta_s = coefficient_gaps(spec_a, spec_b, x_range)
    lip_b = max(regularity_probe(s.drift_ast, (0.0, 1.0), x_range, PROBE_GRID, s.params).lipschitz_est
                for s in (spec_a, spec_b))
    lip_s = max(regularity_probe(s.vol_ast, (0.0, 1.0), x_range, PROBE_GRID, s.params).lipschitz_est
                for s in (spec_a, spec_b))
    bound = (x0_gap + eta_b + eta_s) * math.exp(lip_b + lip_s ** 2 / 2 + 1)
    mean_sup = math.fsum(sup) / n_paths
    d = term_a - term_b
    rms = math.sqrt(math.fsum(d * d) / n_paths)
    max_sup = float(sup.max())
    return EquivalenceReport(eta_b, eta_s, x0_gap, lip_b, lip_s, sup, mean_sup, max_sup, rms, bound,
                             mean_sup <= bound, max_sup <= bound)


def running_sup_diff(spec_a: WalkSpec, spec_b: WalkSpec, scale: QuantumScale, seed: int, path_id: int) -> np.ndarray:
    """``sup_{s <= t_k} |x_a(s) - x_b(s)|`` along the grid for one coupled path."""
    xa = simulate_path(spec_a, scale, seed, path_id).values
    xb = simulate_path(spec_b, scale, seed, path_id).values
    return np.maximum.accumulate(np.abs(xa - xb))
