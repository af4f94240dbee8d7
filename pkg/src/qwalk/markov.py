"""Empirical test of the Markov condition.

Within each state bin at a probe time, paths are split by a functional of
their past.  If the increment law depends only on ``(t, x(t))`` the next
increment's sign and squared size must not differ between the strata.
A finite test can only refute the condition, so a passing verdict reads
"not refuted at level alpha".
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ConfigError
from .estimators import _bin_states, _jsonable
from .walk import Ensemble

MIN_PATHS = 10_000
MIN_STRATUM = 50

PASS, FAIL, UNRELIABLE = "pass", "fail", "unreliable"


@dataclass(frozen=True)
class PastFunctional:
    """``lagged_sign``: sign of ``x(t - k dt) - x(t)``; ``running_max``: ``max_{s<=t} x(s) > threshold``."""

    kind: str
    lag: int = 1
    threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in ("lagged_sign", "running_max"):
            raise ConfigError(f"unknown past functional {self.kind!r}")
        if self.kind == "lagged_sign" and self.lag < 1:
            raise ConfigError(f"lag must be >= 1, got {self.lag}")

    @classmethod
    def parse(cls, text: str) -> "PastFunctional":
        """``running-max:0.5`` or ``lagged-sign:3``."""
        name, _, arg = text.partition(":")
        name = name.replace("-", "_")
        try:
            if name == "running_max":
                return cls("running_max", threshold=float(arg) if arg else 0.5)
            if name == "lagged_sign":
                return cls("lagged_sign", lag=int(arg) if arg else 1)
        except ValueError:
            raise ConfigError(f"bad past functional argument in {text!r}") from None
        raise ConfigError(f"unknown past functional {text!r}")

    def to_dict(self) -> dict:
        if self.kind == "running_max":
            return {"kind": self.kind, "threshold": self.threshold,
                    "strata": ["running max <= threshold", "running max > threshold"]}
        return {"kind": self.kind, "lag": self.lag,
                "strata": ["x(t - lag*dt) - x(t) <= 0", "x(t - lag*dt) - x(t) > 0"]}


@dataclass
class MarkovReport:
    verdict: str
    t_probe: float
    k_probe: int
    alpha: float
    past: dict
    cells: list
    n_tests: int
    bonferroni_level: float
    min_p: float
    notes: str

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_dict(self) -> dict:
        return _jsonable({
            "check": "markov",
            "verdict": self.verdict,
            "pass": self.passed,
            "t_probe": self.t_probe,
            "k_probe": self.k_probe,
            "alpha": self.alpha,
            "past_functional": self.past,
            "n_tests": self.n_tests,
            "bonferroni_level": self.bonferroni_level,
            "min_p": self.min_p,
            "cells": self.cells,
            "notes": self.notes,
        })


def _probe_state(ensemble: Ensemble, k_probe: int, past: PastFunctional):
    """x(t_probe), the next increment and the stratum label, all paths."""
    n = ensemble.n_paths
    x_now = inc_next = x_lag = None
    run_max = ensemble.stats.x0.copy()
    k_lag = k_probe - past.lag
    for ch in ensemble.chunks():
        k1 = ch.k0 + ch.m
        if past.kind == "running_max":
            hi = min(ch.m, k_probe - ch.k0)
            if hi >= 0:
                run_max = np.maximum(run_max, ch.x[:, : hi + 1].max(axis=1))
        if x_lag is None and ch.k0 <= k_lag <= k1:
            x_lag = ch.x[:, k_lag - ch.k0].copy()
        if ch.k0 <= k_probe < k1:
            x_now = ch.x[:, k_probe - ch.k0].copy()
            inc_next = ch.inc[:, k_probe - ch.k0].copy()
            break
    if past.kind == "running_max":
        label = run_max > past.threshold
    else:
        label = (x_lag - x_now) > 0
    assert x_now is not None and len(x_now) == n
    return x_now, inc_next, label


def _sign_test(pos: np.ndarray, label: np.ndarray):
    table = np.array([
        [np.count_nonzero(pos & ~label), np.count_nonzero(~pos & ~label)],
        [np.count_nonzero(pos & label), np.count_nonzero(~pos & label)],
    ])
    if (table.sum(axis=0) == 0).any():
        return 0.0, 1.0, table
    chi2, p, _, _ = stats.chi2_contingency(table)
    return float(chi2), float(p), table


def _magnitude_test(a: np.ndarray, b: np.ndarray):
    both = np.concatenate([a, b])
    if both.max() == both.min():
        return 0.0, 1.0
    u, p = stats.mannwhitneyu(a, b, alternative="two-sided")
    return float(u), float(p)


def markov_test(ensemble: Ensemble, past: PastFunctional | str, t_probe: float,
                bins: int = 8, alpha: float = 0.01, min_stratum: int = MIN_STRATUM) -> MarkovReport:
    """Compare the next-increment law across past-functional strata at ``t_probe``.

    Per state bin: a 2x2 chi-square on the increment sign and a Mann-Whitney
    test on the squared increment.  Fails iff any test rejects at the
    Bonferroni level ``alpha / n_tests``; bins where either stratum has
    fewer than ``min_stratum`` paths are skipped, and no usable bin (or too
    few paths overall) yields an "unreliable" verdict.
    """
    if isinstance(past, str):
        past = PastFunctional.parse(past)
    scale = ensemble.scale
    k_probe = scale.index_of(t_probe)
    if k_probe < 2 or k_probe >= scale.n_q:
        raise ConfigError(f"t_probe must lie in [2 dt, 1 - dt], got {t_probe}")
    if past.kind == "lagged_sign" and past.lag > k_probe:
        raise ConfigError(f"lag {past.lag} reaches before t=0 at t_probe={t_probe}")
    note = "a pass means the Markov condition is not refuted at level alpha; it cannot be confirmed"
    common = dict(t_probe=scale.time(k_probe), k_probe=k_probe, alpha=alpha, past=past.to_dict(), notes=note)
    if ensemble.n_paths < MIN_PATHS:
        return MarkovReport(UNRELIABLE, cells=[], n_tests=0, bonferroni_level=math.nan, min_p=math.nan,
                            **common | {"notes": f"needs P >= {MIN_PATHS}; {note}"})
    x, inc, label = _probe_state(ensemble, k_probe, past)
    if inc.max() == inc.min():
        # every path takes the same step: no stratum can differ
        return MarkovReport(PASS, cells=[], n_tests=0, bonferroni_level=math.nan, min_p=1.0,
                            **common | {"notes": f"degenerate: all next increments identical; {note}"})
    idx, lo, hi = _bin_states(x, bins, 1.0, 99.0)
    cells = []
    for b in range(bins):
        in_bin = idx == b
        n_hi = int(np.count_nonzero(in_bin & label))
        n_lo = int(np.count_nonzero(in_bin & ~label))
        cell = {"bin": b, "n_low": n_lo, "n_high": n_hi}
        if min(n_lo, n_hi) < min_stratum:
            cell["reliable"] = False
            cells.append(cell)
            continue
        d = inc[in_bin]
        lab = label[in_bin]
        chi2, p_sign, table = _sign_test(d > 0, lab)
        sq = d * d
        u, p_mag = _magnitude_test(sq[~lab], sq[lab])
        cell.update({
            "reliable": True,
            "sign_table": table,
            "chi2": chi2,
            "p_sign": p_sign,
            "mann_whitney_u": u,
            "p_magnitude": p_mag,
            "mean_sq_low": float(sq[~lab].mean()),
            "mean_sq_high": float(sq[lab].mean()),
        })
        cells.append(cell)
    usable = [c for c in cells if c["reliable"]]
    if hi > lo:
        w = (hi - lo) / bins
        for c in cells:
            c["x_lo"] = lo + c["bin"] * w
            c["x_hi"] = lo + (c["bin"] + 1) * w
    if not usable:
        return MarkovReport(UNRELIABLE, cells=cells, n_tests=0, bonferroni_level=math.nan, min_p=math.nan,
                            **common | {"notes": f"no state bin has both strata >= {min_stratum}; {note}"})
    n_tests = 2 * len(usable)
    level = alpha / n_tests
    min_p = min(min(c["p_sign"], c["p_magnitude"]) for c in usable)
    verdict = FAIL if min_p < level else PASS
    return MarkovReport(verdict, cells=cells, n_tests=n_tests, bonferroni_level=level, min_p=min_p, **common)
