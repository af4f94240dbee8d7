"""Statistical checks of the walk's defining conditions.

Covers the Heisenberg scaling of squared increments, its physical-units
form, fairness and independence of the sign stream, and the conditional
drift/volatility decomposition with its normalized residuals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .coeffs import WalkSpec, regularity_probe
from .errors import InsufficientDataError
from .scale import (
    CLASS_ORDER,
    Classification,
    TolerancePolicy,
    class_counts,
    classify_array,
)
from .signs import sign_sequence
from .walk import CHUNK_FLOATS, Ensemble, Path

POLICY_NOTE = "appreciable band is an engineering choice; the underlying predicates have no finite-N definition"


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# -- Heisenberg condition ----------------------------------------------------

@dataclass
class HeisenbergReport:
    counts: dict
    min: float
    max: float
    median: float
    n_steps: int
    passed: bool
    policy: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable({
            "check": "heisenberg",
            "counts": self.counts,
            "min": self.min,
            "max": self.max,
            "median": self.median,
            "n_steps": self.n_steps,
            "pass": self.passed,
            "policy": self.policy,
            "note": POLICY_NOTE,
        })


def heisenberg_statistic(path: Path) -> np.ndarray:
    """Per-step ``(dx)^2 / dt``."""
    d = np.diff(path.values)
    return d * d / path.scale.delta_t


def heisenberg_check(path: Path, policy: TolerancePolicy) -> HeisenbergReport:
    """Passes iff every step's ``(dx)^2/dt`` is appreciable."""
    stat = heisenberg_statistic(path)
    idx = classify_array(stat, policy)
    counts = class_counts(idx)
    return HeisenbergReport(
        counts=counts,
        min=float(stat.min()),
        max=float(stat.max()),
        median=float(np.median(stat)),
        n_steps=len(stat),
        passed=counts[Classification.APPRECIABLE.value] == len(stat),
        policy=policy.to_dict(),
    )


@dataclass(frozen=True)
class PhysicalScaleConfig:
    hbar_over_m: float

    def __post_init__(self):
        if not (math.isfinite(self.hbar_over_m) and self.hbar_over_m > 0):
            raise ValueError(f"hbar_over_m must be positive, got {self.hbar_over_m}")


@dataclass
class PhysicalScaleReport:
    counts: dict
    min_ratio: float
    max_ratio: float
    hbar_over_m: float
    passed: bool

    def to_dict(self) -> dict:
        return _jsonable({
            "check": "physical-scale",
            "counts": self.counts,
            "min_ratio": self.min_ratio,
            "max_ratio": self.max_ratio,
            "hbar_over_m": self.hbar_over_m,
            "pass": self.passed,
        })


_AT_LEAST_APPRECIABLE = CLASS_ORDER.index(Classification.APPRECIABLE)


def physical_scale_check(path: Path, cfg: PhysicalScaleConfig, policy: TolerancePolicy) -> PhysicalScaleReport:
    """``(dx)^2/dt >~ hbar/m``: the ratio must be appreciable or larger at every step.

    Both gap zones below the appreciable band fail, so borderline runs are loud.
    """
    ratio = heisenberg_statistic(path) / cfg.hbar_over_m
    idx = classify_array(ratio, policy)
    return PhysicalScaleReport(
        counts=class_counts(idx),
        min_ratio=float(ratio.min()),
        max_ratio=float(ratio.max()),
        hbar_over_m=cfg.hbar_over_m,
        passed=bool(np.all(idx >= _AT_LEAST_APPRECIABLE)),
    )


# -- sign stream -------------------------------------------------------------

MIN_SIGNS = 1000


@dataclass
class EquiprobabilityReport:
    n: int
    freq_plus: float
    freq_stat: float
    lag_autocorr: list
    bound: float
    alpha: float
    passed: bool

    def to_dict(self) -> dict:
        return _jsonable({
            "check": "equiprobability",
            "n": self.n,
            "freq_plus": self.freq_plus,
            "freq_stat": self.freq_stat,
            "lag_autocorr": self.lag_autocorr,
            "bound": self.bound,
            "alpha": self.alpha,
            "pass": self.passed,
        })


def equiprobability_test(signs, alpha: float = 0.001, max_lag: int = 8) -> EquiprobabilityReport:
    """Fairness z-test plus lag-1..K autocorrelations against ``+-z_{1-alpha/2}/sqrt(n)``."""
    s = np.asarray(signs, dtype=np.float64)
    n = len(s)
    if n < MIN_SIGNS:
        raise InsufficientDataError(f"need at least {MIN_SIGNS} signs, got {n}")
    z = stats.norm.isf(alpha / 2)
    n_plus = int(np.count_nonzero(s > 0))
    freq_stat = (n_plus - n / 2) / math.sqrt(n / 4)
    d = s - s.mean()
    denom = float(d @ d)
    if denom == 0:
        acf = [math.nan] * max_lag
    else:
        acf = [float(d[:-k] @ d[k:]) / denom for k in range(1, max_lag + 1)]
    bound = z / math.sqrt(n)
    ok = abs(freq_stat) <= z and all(abs(r) <= bound for r in acf)  # NaN compares False
    return EquiprobabilityReport(n, n_plus / n, freq_stat, acf, bound, alpha, bool(ok))


@dataclass
class SubstreamReport:
    n_substreams: int
    substream_length: int
    failures: int
    allowed_failures: int
    expected_failures: float
    overall: EquiprobabilityReport
    passed: bool

    def to_dict(self) -> dict:
        return _jsonable({
            "check": "equiprobability",
            "n_substreams": self.n_substreams,
            "substream_length": self.substream_length,
            "failures": self.failures,
            "allowed_failures": self.allowed_failures,
            "expected_failures": self.expected_failures,
            "overall": self.overall.to_dict(),
            "pass": self.passed,
        })


def substream_check(seed: int, n_total: int = 10**7, n_substreams: int = 100, alpha: float = 0.001,
                    max_lag: int = 8, path_id: int = 0) -> SubstreamReport:
    """Run :func:`equiprobability_test` on a long stream and on disjoint pieces of it.

    The failure budget over pieces is ``floor(mu + 3 sqrt(mu))`` with
    ``mu = pieces * (K + 1) * alpha`` (Bonferroni over the test family).
    """
    signs = sign_sequence(seed, path_id, n_total)
    overall = equiprobability_test(signs, alpha, max_lag)
    length = n_total // n_substreams
    failures = sum(
        not equiprobability_test(signs[i * length:(i + 1) * length], alpha, max_lag).passed
        for i in range(n_substreams)
    )
    mu = n_substreams * (max_lag + 1) * alpha
    allowed = int(math.floor(mu + 3 * math.sqrt(mu)))
    return SubstreamReport(n_substreams, length, failures, allowed, mu, overall,
                           overall.passed and failures <= allowed)


def run_level_pass(n_fail: int, n_tests: int, alpha: float, safety: float = 2.0) -> bool:
    """Multiple-testing gate for per-step checks: failing fraction <= alpha (1 + 3 sqrt(alpha/n)) * safety."""
    if n_tests == 0:
        return True
    return n_fail / n_tests <= alpha * (1 + 3 * math.sqrt(alpha / n_tests)) * safety


# -- drift / volatility decomposition -----------------------------------------

@dataclass
class DecompositionReport:
    """Per-(time bin, state bin) estimates; arrays are ``(n_time_bins, n_state_bins)``."""

    time_start: np.ndarray  # first grid index of each time bin
    time_stride: int
    edges_lo: np.ndarray  # per time bin, lower end of the binned range
    edges_hi: np.ndarray
    n_state_bins: int
    count: np.ndarray
    drift_est: np.ndarray
    drift_se: np.ndarray
    vol_est: np.ndarray
    vol_se: np.ndarray
    reliable: np.ndarray
    min_count: int
    delta_t: float
    residual_mean: float = math.nan
    residual_second_moment: float = math.nan
    unbinned_steps: int = 0

    @property
    def n_reliable(self) -> int:
        return int(self.reliable.sum())

    def centers(self) -> np.ndarray:
        w = (self.edges_hi - self.edges_lo) / self.n_state_bins
        return self.edges_lo[:, None] + w[:, None] * (np.arange(self.n_state_bins) + 0.5)

    def widths(self) -> np.ndarray:
        return (self.edges_hi - self.edges_lo) / self.n_state_bins

    def to_dict(self, cells: bool = True) -> dict:
        out = {
            "check": "decomposition",
            "time_stride": self.time_stride,
            "n_time_bins": len(self.time_start),
            "n_state_bins": self.n_state_bins,
            "min_count": self.min_count,
            "n_reliable_cells": self.n_reliable,
            "n_occupied_cells": int((self.count > 0).sum()),
            "residual_mean": self.residual_mean,
            "residual_second_moment": self.residual_second_moment,
            "unbinned_steps": self.unbinned_steps,
        }
        if cells:
            rel = self.reliable
            mask = lambda a: np.where(rel, a, np.nan)  # noqa: E731 - unreliable cells carry no estimate
            out.update({
                "time_start": self.time_start,
                "edges_lo": self.edges_lo,
                "edges_hi": self.edges_hi,
                "count": self.count,
                "reliable": rel,
                "drift_est": mask(self.drift_est),
                "drift_se": mask(self.drift_se),
                "vol_est": mask(self.vol_est),
                "vol_se": mask(self.vol_se),
            })
        return _jsonable(out)


def _bin_states(x: np.ndarray, n_bins: int, lo_pct: float, hi_pct: float):
    """Equal-width bins over the empirical percentile range; -1 marks unbinned values."""
    lo, hi = np.percentile(x, [lo_pct, hi_pct])
    if hi > lo:
        idx = np.minimum(np.floor((x - lo) / (hi - lo) * n_bins).astype(np.int64), n_bins - 1)
        idx[(x < lo) | (x > hi)] = -1
    else:
        idx = np.where(x == lo, 0, -1)
    return idx, float(lo), float(hi)


def _cell_moments(idx, inc, dt, n_bins):
    """Drift and RMS-volatility estimates per cell plus the normalized residuals."""
    ok = idx >= 0
    ci, d = idx[ok], inc[ok]
    sq = math.sqrt(dt)
    cnt = np.bincount(ci, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        drift = np.bincount(ci, weights=d, minlength=n_bins) / dt / cnt
        r = (d - np.nan_to_num(drift)[ci] * dt) / sq
        r2 = r * r
        s2 = np.bincount(ci, weights=r2, minlength=n_bins) / cnt
        vol = np.sqrt(s2)
        r4 = np.bincount(ci, weights=r2 * r2, minlength=n_bins) / cnt
        drift_se = np.sqrt(s2 * cnt / np.maximum(cnt - 1, 1)) / sq / np.sqrt(cnt)
        var_r2 = np.maximum(r4 - s2 * s2, 0.0)
        vol_se = np.where(vol > 0, np.sqrt(var_r2 / cnt) / (2 * vol), 0.0)
    return cnt, drift, drift_se, vol, vol_se, ci, r


ZERO_VOL = 1e-12


def _chunk_steps(n_paths: int, stride: int) -> int:
    per = max(1, CHUNK_FLOATS // max(n_paths, 1))
    return max(stride, (per // stride) * stride)


def estimate_decomposition(ensemble: Ensemble, time_bins: int = 1, state_bins: int = 32,
                           min_count: int = 50, lo_pct: float = 1.0, hi_pct: float = 99.0) -> DecompositionReport:
    """Conditional drift ``mean(dx)/dt`` and RMS volatility per (time, state) cell.

    ``time_bins`` is the number of grid steps pooled per time bin (1 = every
    grid point).  Cells with fewer than ``min_count`` samples are unreliable
    and carry no estimate.  Normalized residuals are pooled over reliable
    cells with non-zero volatility.
    """
    if ensemble.n_paths < 100:
        raise InsufficientDataError(f"decomposition needs P >= 100, got {ensemble.n_paths}")
    scale = ensemble.scale
    dt = scale.delta_t
    stride = int(time_bins)
    n_tb = -(-scale.n_q // stride)
    shape = (n_tb, state_bins)
    out = {k: np.full(shape, np.nan) for k in ("drift", "drift_se", "vol", "vol_se")}
    count = np.zeros(shape, dtype=np.int64)
    lo_e = np.empty(n_tb)
    hi_e = np.empty(n_tb)
    eta_sum, eta_sq, n_eta, unbinned = [], [], 0, 0
    for ch in ensemble.chunks(_chunk_steps(ensemble.n_paths, stride)):
        for j0 in range(0, ch.m, stride):
            j1 = min(j0 + stride, ch.m)
            tb = (ch.k0 + j0) // stride
            xb = ch.x[:, j0:j1].ravel()
            db = ch.inc[:, j0:j1].ravel()
            idx, lo_e[tb], hi_e[tb] = _bin_states(xb, state_bins, lo_pct, hi_pct)
            cnt, drift, dse, vol, vse, ci, r = _cell_moments(idx, db, dt, state_bins)
            count[tb] = cnt
            rel = cnt >= min_count
            out["drift"][tb] = np.where(rel, drift, np.nan)
            out["drift_se"][tb] = np.where(rel, dse, np.nan)
            out["vol"][tb] = np.where(rel, vol, np.nan)
            out["vol_se"][tb] = np.where(rel, vse, np.nan)
            unbinned += int(np.count_nonzero(idx < 0))
            use = rel[ci] & (vol[ci] > ZERO_VOL)
            eta = r[use] / vol[ci[use]]
            eta_sum.append(float(eta.sum()))
            eta_sq.append(float((eta * eta).sum()))
            n_eta += len(eta)
    report = DecompositionReport(
        time_start=np.arange(n_tb) * stride,
        time_stride=stride,
        edges_lo=lo_e,
        edges_hi=hi_e,
        n_state_bins=state_bins,
        count=count,
        drift_est=out["drift"],
        drift_se=out["drift_se"],
        vol_est=out["vol"],
        vol_se=out["vol_se"],
        reliable=count >= min_count,
        min_count=min_count,
        delta_t=dt,
        unbinned_steps=unbinned,
    )
    if report.n_reliable == 0:
        raise InsufficientDataError("no cell reached the minimum count")
    if n_eta:
        report.residual_mean = math.fsum(eta_sum) / n_eta
        report.residual_second_moment = math.fsum(eta_sq) / n_eta
    return report


@dataclass
class ResidualReport:
    mean_eta: float
    second_moment_eta: float
    n_used: int
    excluded_zero_vol: int
    excluded_unreliable: int
    per_path_second_moment: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "mean_eta": self.mean_eta,
            "second_moment_eta": self.second_moment_eta,
            "n_used": self.n_used,
            "excluded_zero_vol": self.excluded_zero_vol,
            "excluded_unreliable": self.excluded_unreliable,
            "notes": "moments are checked for consistency with a fair sign; "
                     "that the residual is the driving sign itself cannot be verified",
        }
        return _jsonable(out)


def residual_moments(ensemble: Ensemble, report: DecompositionReport) -> ResidualReport:
    """Pooled moments of ``eta = (dx - D dt) / (s sqrt(dt))`` using the report's cell estimates.

    Steps that fall in unreliable or unbinned cells, or in cells whose
    volatility estimate is zero, are excluded and counted.
    """
    scale = ensemble.scale
    dt, sq = scale.delta_t, scale.sqrt_dt
    stride = report.time_stride
    nb = report.n_state_bins
    sums, sqs = [], []
    n_used = zero_vol = unrel = 0
    for ch in ensemble.chunks(_chunk_steps(ensemble.n_paths, stride)):
        for j0 in range(0, ch.m, stride):
            j1 = min(j0 + stride, ch.m)
            tb = (ch.k0 + j0) // stride
            xb = ch.x[:, j0:j1].ravel()
            db = ch.inc[:, j0:j1].ravel()
            lo, hi = report.edges_lo[tb], report.edges_hi[tb]
            if hi > lo:
                idx = np.clip(np.floor((xb - lo) / (hi - lo) * nb).astype(np.int64), 0, nb - 1)
                inside = (xb >= lo) & (xb <= hi)
            else:
                idx = np.zeros(len(xb), dtype=np.int64)
                inside = xb == lo
            rel = inside & report.reliable[tb][idx]
            unrel += int(np.count_nonzero(~rel))
            s = report.vol_est[tb][idx]
            live = rel & (s > ZERO_VOL)
            zero_vol += int(np.count_nonzero(rel & ~live))
            eta = (db[live] - report.drift_est[tb][idx[live]] * dt) / (s[live] * sq)
            sums.append(float(eta.sum()))
            sqs.append(float((eta * eta).sum()))
            n_used += len(eta)
    if n_used == 0:
        return ResidualReport(math.nan, math.nan, 0, zero_vol, unrel)
    return ResidualReport(math.fsum(sums) / n_used, math.fsum(sqs) / n_used, n_used, zero_vol, unrel)


def residual_moments_true(ensemble: Ensemble) -> ResidualReport:
    """Residual moments with the spec's own coefficients, where ``eta`` equals the sign exactly."""
    spec = ensemble.spec
    scale = ensemble.scale
    dt, sq = scale.delta_t, scale.sqrt_dt
    drift = spec.drift_fn()
    per_path_sq = np.zeros(ensemble.n_paths)
    per_path_n = np.zeros(ensemble.n_paths, dtype=np.int64)
    sums, sqs = [], []
    zero_vol = 0
    for ch in ensemble.chunks():
        t = (ch.k0 + np.arange(ch.m)) / scale.n_q
        b, _ = drift(t[None, :], ch.x[:, :-1])
        s = np.broadcast_to(ch.sigma, ch.inc.shape)
        live = s > ZERO_VOL
        with np.errstate(invalid="ignore", divide="ignore"):
            eta = np.where(live, (ch.inc - b * dt) / (s * sq), 0.0)
        zero_vol += int(np.count_nonzero(~live))
        e2 = eta * eta
        per_path_sq += e2.sum(axis=1)
        per_path_n += live.sum(axis=1)
        sums.append(float(eta.sum()))
        sqs.append(float(e2.sum()))
    n_used = int(per_path_n.sum())
    if n_used == 0:
        return ResidualReport(math.nan, math.nan, 0, zero_vol, 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_path = per_path_sq / per_path_n
    return ResidualReport(math.fsum(sums) / n_used, math.fsum(sqs) / n_used, n_used, zero_vol, 0, per_path)


@dataclass
class DecompositionCheck:
    n_reliable: int
    drift_within: int
    vol_within: int
    fraction_within: float
    min_fraction: float
    passed: bool

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "passed"}
        return _jsonable(out | {"pass": self.passed})


def decomposition_check(report: DecompositionReport, spec: WalkSpec, min_fraction: float = 0.95,
                        n_se: float = 3.0) -> DecompositionCheck:
    """Compare cell estimates with the spec's coefficients at cell centers.

    Drift tolerance is ``n_se * SE`` plus a binning-bias bound (half the cell
    width times the drift's Lipschitz estimate over the binned range, plus the
    time-pooling term); volatility gets the analogous bound plus the drift
    spread it absorbs.  A cell is within bounds when both estimates are.
    """
    rel = report.reliable
    if not rel.any():
        raise InsufficientDataError("report has no reliable cells")
    dt = report.delta_t
    x_lo = float(np.min(report.edges_lo))
    x_hi = float(np.max(report.edges_hi))
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    t_hi = float(min(1.0, (report.time_start[-1] + report.time_stride) * dt))
    lip_b = regularity_probe(spec.drift_ast, (0.0, t_hi), (x_lo, x_hi), 64, spec.params).lipschitz_est
    lip_s = regularity_probe(spec.vol_ast, (0.0, t_hi), (x_lo, x_hi), 64, spec.params).lipschitz_est
    centers = report.centers()
    half_w = report.widths()[:, None] / 2
    t_mid = (report.time_start + (report.time_stride - 1) / 2) * dt
    t_grid = np.broadcast_to(t_mid[:, None], centers.shape)
    b_true, _ = spec.drift_fn()(t_grid, centers)
    s_true, _ = spec.vol_fn()(t_grid, centers)
    t_pool = (report.time_stride - 1) * dt / 2
    drift_bias = lip_b * (half_w + t_pool)
    vol_bias = lip_s * (half_w + t_pool) + drift_bias ** 2 * dt / (2 * np.maximum(np.abs(s_true), ZERO_VOL))
    with np.errstate(invalid="ignore"):
        d_ok = np.abs(report.drift_est - b_true) <= n_se * report.drift_se + drift_bias
        s_ok = np.abs(report.vol_est - np.abs(s_true)) <= n_se * report.vol_se + vol_bias
    d_ok &= rel
    s_ok &= rel
    both = int((d_ok & s_ok).sum())
    n = int(rel.sum())
    frac = both / n
    return DecompositionCheck(n, int(d_ok.sum()), int(s_ok.sum()), frac, min_fraction, frac >= min_fraction)
