"""Diffusion checklist, weak convergence to reference laws, and path fractal dimension."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy import stats

from .coeffs import PointMass, WalkSpec, grid_values, regularity_probe
from .errors import ConfigError, EvalError
from .estimators import _jsonable
from .scale import QuantumScale, TolerancePolicy, make_scale
from .walk import Ensemble, Path, default_threads, initial_values, simulate_ensemble

# -- checklist ----------------------------------------------------------------


@dataclass
class DiffusionChecklist:
    s0_class_ok: bool
    s0_sup: dict
    shadow_smooth_ok: bool
    smoothness: dict
    sigma_positive_ok: bool
    sigma_min: float
    x0_limited_ok: bool
    x0_quantile: float
    error: dict | None = None
    notes: str = ("finite surrogates: boundedness and divided differences on the chosen compact; "
                  "failure of a check does not prove the walk is not a diffusion")

    @property
    def overall(self) -> bool:
        return self.s0_class_ok and self.shadow_smooth_ok and self.sigma_positive_ok and self.x0_limited_ok

    def to_dict(self) -> dict:
        return _jsonable({
            "check": "diffusion-checklist",
            "s0_class_ok": self.s0_class_ok,
            "s0_sup": self.s0_sup,
            "shadow_smooth_ok": self.shadow_smooth_ok,
            "smoothness": self.smoothness,
            "sigma_positive_ok": self.sigma_positive_ok,
            "sigma_min": self.sigma_min,
            "x0_limited_ok": self.x0_limited_ok,
            "x0_quantile": self.x0_quantile,
            "overall": self.overall,
            "error": self.error,
            "notes": self.notes,
        })


def diffusion_checklist(spec: WalkSpec, domain, scale: QuantumScale, policy: TolerancePolicy,
                        n_x0: int = 10**6, seed: int = 0, grid_n: int = 64) -> DiffusionChecklist:
    """The four surrogate conditions: bounded coefficients, bounded divided
    differences, volatility at least ``appreciable_low``, limited initial law."""
    t_range, x_range = domain
    for lo, hi in (t_range, x_range):
        if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
            raise ConfigError(f"domain must be bounded, got {domain}")
    x0 = np.abs(initial_values(spec, scale, seed, np.arange(n_x0)))
    q = float(np.quantile(x0, 1 - 1e-6))
    x0_ok = q <= policy.limited_cut
    try:
        rb = regularity_probe(spec.drift_ast, t_range, x_range, grid_n, spec.params)
        rs = regularity_probe(spec.vol_ast, t_range, x_range, grid_n, spec.params)
        _, _, sig = grid_values(spec.vol_ast, t_range, x_range, grid_n, spec.params)
    except EvalError as exc:
        return DiffusionChecklist(False, {}, False, {}, False, math.nan, x0_ok, q, error=exc.to_dict())
    cut = policy.limited_cut
    s0_ok = rb.sup_abs <= cut and rs.sup_abs <= cut
    smooth_ok = max(rb.lipschitz_est, rb.d2_est, rs.lipschitz_est, rs.d2_est) <= cut
    sig_min = float(sig.min())
    return DiffusionChecklist(
        s0_class_ok=s0_ok,
        s0_sup={"drift": rb.sup_abs, "volatility": rs.sup_abs, "limited_cut": cut},
        shadow_smooth_ok=smooth_ok,
        smoothness={"drift": rb.to_dict(), "volatility": rs.to_dict()},
        sigma_positive_ok=sig_min >= policy.appreciable_low,
        sigma_min=sig_min,
        x0_limited_ok=x0_ok,
        x0_quantile=q,
    )


# -- reference laws -------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceLaw:
    """Brownian (``theta = 0``) or Ornstein-Uhlenbeck ``dx = -theta x dt + sigma0 dW``."""

    kind: str
    sigma0: float
    theta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("brownian", "ou"):
            raise ConfigError(f"unknown reference law {self.kind!r}")
        if self.kind == "brownian" and self.theta != 0:
            raise ConfigError("brownian reference has no theta")

    @classmethod
    def parse(cls, text: str) -> "ReferenceLaw":
        """``brownian:1.0`` or ``ou:THETA,SIGMA0``."""
        kind, _, arg = text.partition(":")
        try:
            vals = [float(v) for v in arg.split(",")] if arg else []
        except ValueError:
            raise ConfigError(f"bad reference law {text!r}") from None
        if kind == "brownian" and len(vals) <= 1:
            return cls("brownian", vals[0] if vals else 1.0)
        if kind == "ou" and len(vals) == 2:
            return cls("ou", vals[1], vals[0])
        raise ConfigError(f"bad reference law {text!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma0": self.sigma0, "theta": self.theta}

    def _x0_moments(self, x0) -> tuple[float, float, float]:
        if isinstance(x0, PointMass):
            return float(x0.value), 0.0, 0.0
        mid = (x0.lo + x0.hi) / 2
        w = x0.hi - x0.lo
        return mid, w * w / 12, w ** 4 / 80

    def mean(self, t: float, x0) -> float:
        m0, _, _ = self._x0_moments(x0)
        return m0 * math.exp(-self.theta * t)

    def variance(self, t: float, x0) -> float:
        _, v0, _ = self._x0_moments(x0)
        if self.theta == 0:
            return v0 + self.sigma0 ** 2 * t
        decay = math.exp(-2 * self.theta * t)
        return v0 * decay + self.sigma0 ** 2 * (1 - decay) / (2 * self.theta)

    def noise_sd(self, t: float) -> float:
        if self.theta == 0:
            return self.sigma0 * math.sqrt(t)
        return self.sigma0 * math.sqrt((1 - math.exp(-2 * self.theta * t)) / (2 * self.theta))

    def central_m4(self, t: float, x0) -> float:
        _, v0, m40 = self._x0_moments(x0)
        c = math.exp(-self.theta * t)
        s2 = self.noise_sd(t) ** 2
        return c ** 4 * m40 + 6 * c * c * v0 * s2 + 3 * s2 * s2

    def cdf(self, x, t: float, x0) -> np.ndarray:
        """Law of ``x(t)``: Gaussian noise added to the (scaled) initial law."""
        x = np.asarray(x, dtype=np.float64)
        c = math.exp(-self.theta * t)
        s = self.noise_sd(t)
        if isinstance(x0, PointMass) or x0.hi == x0.lo:
            m = c * (x0.value if isinstance(x0, PointMass) else x0.lo)
            return stats.norm.cdf(x, loc=m, scale=s)
        lo, hi = c * x0.lo, c * x0.hi
        if s == 0:
            return np.clip((x - lo) / (hi - lo), 0.0, 1.0)
        # convolution of Uniform(lo, hi) with N(0, s^2); G(z) = z Phi(z) + phi(z)
        def g(z):
            return z * stats.norm.cdf(z) + stats.norm.pdf(z)
        return s * (g((x - lo) / s) - g((x - hi) / s)) / (hi - lo)

    def discrete_moments(self, n_q: int, x0) -> dict:
        """Exact mean, variance and fourth central moment of the walk at t=1.

        With ``a = 1 - theta dt`` the walk is ``y' = a y + sigma0 eps sqrt(dt)``,
        so ``v' = a^2 v + s^2`` and ``m4' = a^4 m4 + 6 a^2 s^2 v + s^4``.
        """
        m0, v, m4 = self._x0_moments(x0)
        dt = 1.0 / n_q
        a = 1.0 - self.theta * dt
        s2 = self.sigma0 ** 2 * dt
        for _ in range(n_q):
            m4 = a ** 4 * m4 + 6 * a * a * s2 * v + s2 * s2
            v = a * a * v + s2
        return {"mean": m0 * a ** n_q, "var": v, "m4": m4}

    def matches(self, spec: WalkSpec, x_range=(-5.0, 5.0)) -> bool:
        _, xs, b = grid_values(spec.drift_ast, (0.0, 1.0), x_range, 16, spec.params)
        _, _, s = grid_values(spec.vol_ast, (0.0, 1.0), x_range, 16, spec.params)
        ok_b = np.allclose(b, -self.theta * xs[None, :], rtol=1e-12, atol=1e-12)
        ok_s = np.allclose(s, self.sigma0, rtol=1e-12, atol=1e-12)
        return bool(ok_b and ok_s and spec.variant is None)


def brownian_fourth_moment_enumerated(n_q: int, sigma0: float = 1.0) -> float:
    """E[x(1)^4] for the point-started walk by summing over all 2^n_q sign vectors."""
    if n_q > 22:
        raise ValueError("enumeration is exponential; keep n_q <= 22")
    codes = np.arange(2 ** n_q, dtype=np.int64)
    ones = np.zeros(len(codes), dtype=np.int64)
    for k in range(n_q):
        ones += (codes >> k) & 1
    x = sigma0 * (2 * ones - n_q) * math.sqrt(1.0 / n_q)
    return float(np.mean(x ** 4))


# -- weak convergence -----------------------------------------------------------

BERRY_ESSEEN = 0.4748  # constant for iid sums; rho / sigma^3 = 1 for +-1 increments


def lattice_ks(terminal: np.ndarray, ref: ReferenceLaw, spec: WalkSpec, n_q: int) -> tuple[float, float]:
    """Continuity-corrected KS at the lattice atoms and the exact lattice floor.

    Only for the point-started Brownian walk, whose terminal law sits on
    ``x0 + sigma0 sqrt(dt) (2j - n_q)``.  The empirical CDF at each atom is
    compared with the reference CDF half a spacing above it; the floor is
    the same distance for the exact binomial law, so it contains no Monte
    Carlo error.
    """
    x0 = float(spec.x0.value)
    h = ref.sigma0 * math.sqrt(1.0 / n_q)
    j = np.rint(((terminal - x0) / h + n_q) / 2).astype(np.int64)
    counts = np.bincount(np.clip(j, 0, n_q), minlength=n_q + 1)
    ecdf = np.cumsum(counts) / len(terminal)
    atoms = x0 + h * (2 * np.arange(n_q + 1) - n_q)
    ref_mid = ref.cdf(atoms + h, 1.0, spec.x0)
    exact = stats.binom.cdf(np.arange(n_q + 1), n_q, 0.5)
    return float(np.max(np.abs(ecdf - ref_mid))), float(np.max(np.abs(exact - ref_mid)))


@dataclass
class WeakConvergenceReport:
    ref: dict
    n_paths: int
    alpha: float
    rungs: list = field(default_factory=list)
    ks_monotone: bool = False
    final_ks: float = math.nan
    final_tolerance: float = math.nan
    final_ok: bool = False
    variance_ok: bool = False
    notes: str = ""

    @property
    def passed(self) -> bool:
        return self.ks_monotone and self.final_ok and self.variance_ok

    def to_dict(self) -> dict:
        return _jsonable({
            "check": "weak-convergence",
            "ref": self.ref,
            "P": self.n_paths,
            "alpha": self.alpha,
            "rungs": self.rungs,
            "ks_monotone": self.ks_monotone,
            "final_ks": self.final_ks,
            "final_tolerance": self.final_tolerance,
            "final_ok": self.final_ok,
            "variance_ok": self.variance_ok,
            "pass": self.passed,
            "notes": self.notes,
        })


def weak_convergence_test(spec: WalkSpec, ref: ReferenceLaw, nq_ladder, n_paths: int, alpha: float = 0.001,
                          seed: int = 0, threads: int | None = None) -> WeakConvergenceReport:
    """Terminal-law distance to ``ref`` along a ladder of grid sizes.

    ``ks_stat`` is the plain Kolmogorov-Smirnov distance between the
    empirical terminal CDF and the reference CDF; it carries the lattice
    discretization and must shrink along the ladder.  The final rung is
    judged on ``ks_corrected`` (continuity-corrected at lattice atoms for the
    Brownian walk) against ``K_alpha / sqrt(P)`` plus the exact lattice floor,
    or plus a Berry-Esseen allowance when no lattice form is available.
    Variance must sit within 3 Monte Carlo standard errors of the exact
    discrete recursion at every rung.
    """
    if not ref.matches(spec):
        raise ConfigError(f"spec does not belong to the {ref.kind} family "
                          f"(theta={ref.theta}, sigma0={ref.sigma0})")
    ladder = [int(n) for n in nq_ladder]
    if len(ladder) < 2 or any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ConfigError(f"nq ladder must be increasing with >= 2 rungs, got {ladder}")
    threads = default_threads() if threads is None else threads
    k_alpha = float(stats.kstwobign.isf(alpha))
    lattice = ref.kind == "brownian" and isinstance(spec.x0, PointMass)
    report = WeakConvergenceReport(ref.to_dict(), n_paths, alpha)
    for n_q in ladder:
        ens = simulate_ensemble(spec, make_scale(n_q), seed, n_paths, threads=threads, keep_paths=False)
        term = ens.stats.terminal
        mom = ens.summary()["terminal"]
        exact = ref.discrete_moments(n_q, spec.x0)
        cdf = lambda v: ref.cdf(v, 1.0, spec.x0)  # noqa: E731
        ks = float(stats.kstest(term, cdf).statistic)
        if lattice:
            ks_corr, floor = lattice_ks(term, ref, spec, n_q)
        else:
            ks_corr, floor = ks, BERRY_ESSEEN / math.sqrt(n_q)
        var_se = math.sqrt(max(mom["m4"] - mom["var"] ** 2, 0.0) / n_paths)
        rung = {
            "n_q": n_q,
            "ks_stat": ks,
            "ks_corrected": ks_corr,
            "lattice_floor": floor,
            "mean": mom["mean"],
            "var": mom["var"],
            "m4": mom["m4"],
            "mean_err": abs(mom["mean"] - ref.mean(1.0, spec.x0)),
            "var_err": abs(mom["var"] - ref.variance(1.0, spec.x0)),
            "m4_err": abs(mom["m4"] - ref.central_m4(1.0, spec.x0)),
            "var_exact_discrete": exact["var"],
            "m4_exact_discrete": exact["m4"],
            "var_se": var_se,
            "var_within_3se": abs(mom["var"] - exact["var"]) <= 3 * var_se,
        }
        report.rungs.append(rung)
    ks_seq = [r["ks_stat"] for r in report.rungs]
    report.ks_monotone = all(b < a for a, b in zip(ks_seq, ks_seq[1:]))
    last = report.rungs[-1]
    report.final_ks = last["ks_corrected"]
    report.final_tolerance = k_alpha / math.sqrt(n_paths) + last["lattice_floor"]
    report.final_ok = report.final_ks <= report.final_tolerance
    report.variance_ok = all(r["var_within_3se"] for r in report.rungs)
    report.notes = (
        "ks_stat includes the lattice discretization and must decrease along the ladder; "
        "the final rung is judged on ks_corrected against K_alpha/sqrt(P) + lattice_floor, "
        "which separates Monte Carlo error from the discrete-law floor"
    )
    return report


# -- fractal dimension ----------------------------------------------------------

@nb.njit(cache=True, nogil=True)
def _count_crossings(x, origin, lam, tol, level, counts):
    """Advance the level-crossing state machine over one chunk.

    ``level[i]`` is the index of the last level reached by path i; a
    crossing is counted when the path reaches level +-1 from it.
    """
    n, w = x.shape
    for i in range(n):
        j = level[i]
        c = counts[i]
        for k in range(w):
            q = (x[i, k] - origin[i]) / lam
            while q >= j + 1 - tol:
                j += 1
                c += 1
            while q <= j - 1 + tol:
                j -= 1
                c += 1
        level[i] = j
        counts[i] = c


@dataclass
class DimensionReport:
    lambdas: list
    lengths: list
    mean_crossings: list
    slope: float
    intercept: float
    d_hat: float
    stderr: float
    dropped: list
    notes: str = ("length measured by spatial level-crossing coarse-graining; "
                  "time-subsampled graph length would target 3/2 instead")

    def to_dict(self) -> dict:
        return _jsonable({
            "check": "fractal-dimension",
            "lambdas": self.lambdas,
            "lengths": self.lengths,
            "mean_crossings": self.mean_crossings,
            "slope": self.slope,
            "intercept": self.intercept,
            "D_hat": self.d_hat,
            "stderr": self.stderr,
            "dropped": self.dropped,
            "notes": self.notes,
        })

    def csv_rows(self) -> str:
        return "lambda,L\n" + "".join(f"{lam!r},{length!r}\n" for lam, length in zip(self.lambdas, self.lengths))


CROSSING_TOL = 1e-9


def _chunks_of(paths):
    if isinstance(paths, Ensemble):
        for ch in paths.chunks():
            yield ch.x
        return
    if isinstance(paths, Path):
        paths = [paths]
    if isinstance(paths, (list, tuple)) and paths and isinstance(paths[0], Path):
        yield np.vstack([p.values for p in paths])
        return
    arr = np.asarray(paths, dtype=np.float64)
    yield arr[None, :] if arr.ndim == 1 else arr


def lambda_ladder(lo: float, hi: float, n: int) -> list[float]:
    """Geometric ladder from ``lo`` to ``hi`` inclusive."""
    if n < 2 or not 0 < lo < hi:
        raise ConfigError(f"bad lambda ladder {lo}:{hi}:{n}")
    r = (hi / lo) ** (1 / (n - 1))
    return [lo * r ** i for i in range(n)]


def fractal_dimension(paths, lambdas, check_floor: bool = True) -> DimensionReport:
    """Estimate dimension from the scaling of crossing length ``L(lambda) = lambda * crossings``.

    ``paths`` may be an :class:`Ensemble` (streamed), Path objects, or a
    ``(P, n_q + 1)`` array.  The slope of ``log L`` against ``log lambda``
    gives ``D = 1 - slope``.
    """
    lams = sorted(float(v) for v in lambdas)
    if len(lams) < 4:
        raise ConfigError(f"need at least 4 resolutions, got {len(lams)}")
    if lams[-1] / lams[0] < 16:
        raise ConfigError(f"resolution span {lams[-1] / lams[0]:.3g} < 16")
    lam_arr = np.array(lams)
    state = None
    step_sq = 0.0
    n_steps = 0
    for x in _chunks_of(paths):
        x = np.ascontiguousarray(x)
        if state is None:
            origin = x[:, 0].copy()
            state = [(np.zeros(len(x), dtype=np.int64), np.zeros(len(x), dtype=np.int64)) for _ in lams]
        for lam, (level, counts) in zip(lam_arr, state):
            _count_crossings(x, origin, lam, CROSSING_TOL, level, counts)
        d = np.diff(x, axis=1)
        step_sq += float((d * d).sum())
        n_steps += d.size
    typical_step = math.sqrt(step_sq / max(n_steps, 1))
    if check_floor and lams[0] < 4 * typical_step:
        raise ConfigError(f"smallest resolution {lams[0]:.3g} is below 4x the typical step {typical_step:.3g}")
    mean_c = [float(np.mean(c)) for _, c in state]
    keep, dropped = [], []
    for lam, c in zip(lams, mean_c):
        if c < 2:
            dropped.append(lam)
            warnings.warn(f"resolution {lam:.3g} dropped: fewer than 2 crossings", RuntimeWarning, stacklevel=2)
        else:
            keep.append((lam, c))
    if len(keep) < 4:
        raise ConfigError(f"only {len(keep)} usable resolutions after dropping sparse rungs")
    lam_k = np.array([k[0] for k in keep])
    lengths = lam_k * np.array([k[1] for k in keep])
    fit = stats.linregress(np.log(lam_k), np.log(lengths))
    return DimensionReport(
        lambdas=lam_k.tolist(),
        lengths=lengths.tolist(),
        mean_crossings=[k[1] for k in keep],
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        d_hat=1.0 - float(fit.slope),
        stderr=float(fit.stderr),
        dropped=dropped,
    )
