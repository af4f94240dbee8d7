"""Acceptance suite: every criterion at its stated tolerance and runtime budget.

Each test records a PASS/FAIL line (shown in the terminal summary) before asserting.
Timings exclude one-off JIT compilation, which a tiny warm-up run absorbs.
"""

import json
import math
import time

import numpy as np
import pytest

from qwalk.cli import main
from qwalk.coeffs import PointMass, RunningMaxVolatility, WalkSpec
from qwalk.diffusion import ReferenceLaw, brownian_fourth_moment_enumerated, fractal_dimension, lambda_ladder, \
    weak_convergence_test
from qwalk.equivalence import coupled_distance
from qwalk.estimators import decomposition_check, estimate_decomposition, heisenberg_check, residual_moments_true, \
    substream_check
from qwalk.markov import markov_test
from qwalk.scale import TolerancePolicy, make_scale
from qwalk.walk import quadratic_variation, simulate_ensemble, simulate_path

BROWNIAN = WalkSpec("0", "1", {}, PointMass(0.0))
STILL = WalkSpec("0", "0", {}, PointMass(0.0))
LINE = WalkSpec("1", "0", {}, PointMass(0.0))
OU = WalkSpec("-x", "0.5", {}, PointMass(0.0))
NON_MARKOV = WalkSpec("0", "1", {}, PointMass(0.0), RunningMaxVolatility(0.5, 1.0))


@pytest.fixture(scope="module", autouse=True)
def warm_up():
    for spec in (BROWNIAN, OU, LINE):
        simulate_ensemble(spec, make_scale(8), 0, 2)
    fractal_dimension(np.linspace(0, 1, 64), lambda_ladder(0.02, 0.32, 4), check_floor=False)


def test_c01_exact_quadratic_variation(record_criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for n in (2**8, 2**12, 2**16):
        for seed in (0, 7, 2**63 - 1):
            worst = max(worst, abs(quadratic_variation(simulate_path(BROWNIAN, make_scale(n), seed, 0)) - 1.0))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and dt < 1.0
    record_criterion(1, ok, f"max |QV - 1| = {worst:.2e} (tol 1e-9), {dt:.2f} s (< 1 s)")
    assert ok


def test_c02_heisenberg(record_criterion):
    sc = make_scale(1024)
    policy = TolerancePolicy.default(sc)
    t0 = time.perf_counter()
    brownian_fail = sum(not heisenberg_check(simulate_path(BROWNIAN, sc, s, 0), policy).passed for s in range(1000))
    still_fail = sum(not heisenberg_check(simulate_path(STILL, sc, s, 0), policy).passed for s in range(1000))
    dt = time.perf_counter() - t0
    ok = brownian_fail == 0 and still_fail == 1000 and dt < 10
    record_criterion(2, ok, f"sigma=1 failures {brownian_fail}/1000, sigma=0 failures {still_fail}/1000, {dt:.1f} s")
    assert ok


def test_c03_equiprobability(record_criterion):
    t0 = time.perf_counter()
    rep = substream_check(seed=2024, n_total=10**7, n_substreams=100, alpha=0.001, max_lag=8)
    dt = time.perf_counter() - t0
    ok = rep.overall.passed and rep.failures <= 3 and dt < 10
    record_criterion(3, ok, f"full stream pass={rep.overall.passed}, sub-stream failures {rep.failures}/100 "
                            f"(<= 3), {dt:.1f} s")
    assert ok


def test_c04_decomposition_recovery(record_criterion):
    t0 = time.perf_counter()
    ens = simulate_ensemble(OU, make_scale(1000), 4, 10**5)
    chk = decomposition_check(estimate_decomposition(ens), OU)
    dt = time.perf_counter() - t0
    ok = chk.fraction_within >= 0.95 and dt < 60
    record_criterion(4, ok, f"{chk.fraction_within:.4f} of {chk.n_reliable} reliable cells within bounds "
                            f"(>= 0.95), {dt:.1f} s")
    assert ok


def test_c05_residual_moments_true(record_criterion):
    t0 = time.perf_counter()
    ens = simulate_ensemble(OU, make_scale(1000), 5, 2000)
    res = residual_moments_true(ens)
    dt = time.perf_counter() - t0
    worst = float(np.max(np.abs(res.per_path_second_moment - 1)))
    bound = 3 / math.sqrt(res.n_used)
    ok = worst <= 1e-10 and abs(res.mean_eta) <= bound and dt < 5
    record_criterion(5, ok, f"max per-path |m2 - 1| = {worst:.1e} (1e-10), |mean| = {abs(res.mean_eta):.2e} "
                            f"(<= {bound:.2e}), {dt:.2f} s")
    assert ok


def test_c06_fourth_moment(record_criterion):
    t0 = time.perf_counter()
    exact = brownian_fourth_moment_enumerated(10)
    term = simulate_ensemble(BROWNIAN, make_scale(2**12), 6, 10**5).stats.terminal
    m4 = math.fsum(term ** 4) / len(term)
    dt = time.perf_counter() - t0
    centre = 3 - 2**-11
    ok = abs(exact - 2.8) <= 1e-12 and abs(m4 - centre) <= 0.08 and dt < 60
    record_criterion(6, ok, f"enumerated E[x^4] = {exact:.12g} (2.8), MC m4 = {m4:.4f} in "
                            f"[{centre - 0.08:.4f}, {centre + 0.08:.4f}], {dt:.1f} s")
    assert ok


def test_c07_weak_convergence(record_criterion):
    t0 = time.perf_counter()
    ladder = [2**8, 2**10, 2**12]
    bm = weak_convergence_test(BROWNIAN, ReferenceLaw("brownian", 1.0), ladder, 10**5, seed=0)
    ou = weak_convergence_test(OU, ReferenceLaw("ou", 0.5, 1.0), ladder, 10**5, seed=0)
    dt = time.perf_counter() - t0
    ks = [r["ks_stat"] for r in bm.rungs]
    final = bm.rungs[-1]["ks_corrected"]
    z = [abs(r["var"] - r["var_exact_discrete"]) / r["var_se"] for r in ou.rungs]
    ok = bm.ks_monotone and final <= 0.0075 and ou.variance_ok and dt < 300
    record_criterion(7, ok, "KS " + " > ".join(f"{k:.4f}" for k in ks) + f", final corrected {final:.4f} "
                            f"(<= 0.0075), OU var |z| " + ", ".join(f"{v:.2f}" for v in z) + f" (<= 3), {dt:.0f} s")
    assert ok


def test_c08_markov_power_and_level(record_criterion):
    t0 = time.perf_counter()
    sc = make_scale(256)
    passes = sum(markov_test(simulate_ensemble(BROWNIAN, sc, s, 10**4), "running-max:0.5", 0.75,
                             alpha=0.01).verdict == "pass" for s in range(100))
    fails = sum(markov_test(simulate_ensemble(NON_MARKOV, sc, s, 10**4), "running-max:0.5", 0.75,
                            alpha=0.01).verdict == "fail" for s in range(100))
    dt = time.perf_counter() - t0
    ok = passes >= 98 and fails >= 95 and dt < 600
    record_criterion(8, ok, f"Markov passes {passes}/100 (>= 98), non-Markov fails {fails}/100 (>= 95), {dt:.0f} s")
    assert ok


def test_c09_coupled_perturbation_response(record_criterion):
    t0 = time.perf_counter()
    sc = make_scale(10**4)
    a = WalkSpec("-theta*x", "0.5", {"theta": 1.0}, PointMass(0.0))
    full = coupled_distance(a, a.replace(params={"theta": 1.001}), sc, 9, 1000)
    half = coupled_distance(a, a.replace(params={"theta": 1.0005}), sc, 9, 1000)
    same = coupled_distance(a, a, sc, 9, 1000)
    dt = time.perf_counter() - t0
    ratio = half.mean_sup_diff / full.mean_sup_diff
    ok = full.passed and 0.4 <= ratio <= 0.6 and same.max_sup_diff == 0.0 and dt < 60
    record_criterion(9, ok, f"mean sup {full.mean_sup_diff:.3e} <= bound {full.bound_used:.3e}, halving ratio "
                            f"{ratio:.4f} in [0.4, 0.6], identical max {same.max_sup_diff}, {dt:.1f} s")
    assert ok


def test_c10_fractal_dimension(record_criterion):
    t0 = time.perf_counter()
    sc = make_scale(10**6)
    lams = [2.0**-k for k in range(7, 2, -1)]
    d_bm, d_line = [], []
    for seed in range(20):
        d_bm.append(fractal_dimension(simulate_ensemble(BROWNIAN, sc, seed, 32), lams).d_hat)
        d_line.append(fractal_dimension(simulate_ensemble(LINE, sc, seed, 32), lams).d_hat)
    dt = time.perf_counter() - t0
    ok = (all(1.85 <= d <= 2.15 for d in d_bm) and all(0.98 <= d <= 1.02 for d in d_line)
          and all(a < b for a, b in zip(d_line, d_bm)) and dt < 300)
    record_criterion(10, ok, f"Brownian D in [{min(d_bm):.3f}, {max(d_bm):.3f}] (1.85-2.15), line D in "
                             f"[{min(d_line):.4f}, {max(d_line):.4f}] (0.98-1.02), ordering 20/20 seeds, {dt:.0f} s")
    assert ok


def test_c11_reproducibility(record_criterion, tmp_path, capsys):
    spec = tmp_path / "brownian.json"
    spec.write_text(json.dumps(BROWNIAN.to_dict()))
    runs = {
        "simulate": ["simulate", "--spec", str(spec), "--nq", "256", "--paths", "10000", "--seed", "1"],
        "verify-diffusion": ["verify", "diffusion", "--spec", str(spec), "--ref", "brownian:1.0",
                             "--nq-ladder", "256,1024,4096", "--paths", "100000", "--seed", "0"],
    }
    same = {}
    for name, args in runs.items():
        outs = []
        for threads in ("1", "4"):
            out = tmp_path / f"{name}-{threads}"
            main(args + ["--threads", threads, "--out", str(out)])
            outs.append(out)
        files = sorted(p.name for p in outs[0].iterdir() if p.name != "manifest.json")
        same[name] = bool(files) and all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
        m = [json.loads((o / "manifest.json").read_text()) for o in outs]
        same[name] &= all(m[0][k] == m[1][k] for k in ("spec_hash", "seed", "n_q", "version"))
    capsys.readouterr()
    ok = all(same.values())
    record_criterion(11, ok, "byte-identical artifacts --threads 1 vs 4: "
                             + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok
