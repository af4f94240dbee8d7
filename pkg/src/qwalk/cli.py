"""``qwalk`` command line.

Exit codes: 0 pass (or success), 1 usage/config/spec error with a JSON error
object on stderr, 2 check failed, 3 check unreliable (insufficient counts).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from pathlib import Path as FsPath

import numpy as np

from . import __version__
from .coeffs import WalkSpec, load_spec, spec_hash
from .diffusion import ReferenceLaw, diffusion_checklist, fractal_dimension, lambda_ladder, weak_convergence_test
from .equivalence import coupled_distance
from .errors import ConfigError, InsufficientDataError, QwalkError
from .estimators import (decomposition_check, estimate_decomposition, heisenberg_check, residual_moments,
                         substream_check)
from .markov import UNRELIABLE, PastFunctional, markov_test
from .scale import TolerancePolicy, make_scale
from .walk import BLOCK_PATHS, default_threads, iter_chunks, simulate_ensemble

EXIT_OK, EXIT_ERROR, EXIT_FAIL, EXIT_UNRELIABLE = 0, 1, 2, 3

POLICY_FLAGS = ("infinitesimal_cut", "appreciable_low", "appreciable_high", "limited_cut")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error({"kind": "usage-error", "detail": message})
        sys.exit(EXIT_ERROR)


def _emit_error(err: dict) -> None:
    sys.stderr.write(json.dumps(err) + "\n")


def _write_atomic(path: FsPath, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


# -- argument helpers ------------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_common(p, nq=True, paths=None, spec=True):
    if spec:
        p.add_argument("--spec", required=True, help="walk spec JSON file")
    if nq:
        p.add_argument("--nq", type=_positive_int, default=1024, help="grid size N_q (dt = 1/N_q); default 1024")
    if paths is not None:
        p.add_argument("--paths", type=_positive_int, default=paths, help=f"number of paths P; default {paths}")
    p.add_argument("--seed", type=int, default=0, help="master seed; default 0")
    p.add_argument("--out", help="output directory for artifacts (report also printed to stdout)")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker threads (default: $QWALK_THREADS, else all cores); never changes results")
    for name in POLICY_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), type=float, default=None,
                       help=f"tolerance policy override for {name}")


def _policy(args, n_q: int, file_policy: dict | None) -> TolerancePolicy:
    base = TolerancePolicy.from_dict(file_policy) if file_policy else TolerancePolicy.default(n_q)
    overrides = {k: getattr(args, k) for k in POLICY_FLAGS if getattr(args, k, None) is not None}
    if not overrides:
        return base
    merged = base.to_dict() | overrides
    if file_policy is None and "infinitesimal_cut" not in overrides:
        return TolerancePolicy.default(n_q, **overrides)
    return TolerancePolicy.from_dict(merged)


def _threads(args) -> int:
    return args.threads if args.threads is not None else default_threads()


def _range(text: str, flag: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise ConfigError(f"{flag} expects LO:HI, got {text!r}") from None
    if not lo < hi:
        raise ConfigError(f"{flag} needs LO < HI, got {text!r}")
    return lo, hi


# -- manifest ------------------------------------------------------------------

def _finish(args, out_files: dict[str, str], report: dict | None, spec: WalkSpec | None, n_q: int | None,
            started: float, argv: list[str]) -> None:
    if report is not None:
        text = _dump(report)
        sys.stdout.write(text)
        out_files.setdefault("report.json", text)
    if not args.out:
        return
    out = FsPath(args.out)
    for name, text in out_files.items():
        _write_atomic(out / name, text)
    manifest = {
        "command": argv,
        "spec_hash": spec_hash(spec) if spec is not None else None,
        "seed": args.seed,
        "n_q": n_q,
        "version": __version__,
        "artifacts": sorted(out_files),
        "duration_s": time.perf_counter() - started,
    }
    _write_atomic(out / "manifest.json", _dump(manifest))


# -- commands ------------------------------------------------------------------

def cmd_simulate(args, argv, started) -> int:
    spec, _ = load_spec(args.spec)
    scale = make_scale(args.nq)
    threads = _threads(args)
    ens = simulate_ensemble(spec, scale, args.seed, args.paths, threads=threads, keep_paths=False)
    files = {"summary.json": _dump(ens.summary() | {"spec": spec.to_dict()})}
    if args.out:
        times = [repr(float(t)) for t in scale.grid()]
        rows = ["t,x,path_id\n"]
        for lo in range(0, args.paths, BLOCK_PATHS):
            ids = np.arange(lo, min(lo + BLOCK_PATHS, args.paths))
            parts = [ch.x if ch.k0 == 0 else ch.x[:, 1:]
                     for ch in iter_chunks(spec, scale, args.seed, len(ids), path_ids=ids)]
            vals = np.concatenate(parts, axis=1)
            for pid, row in zip(ids, vals):
                rows.extend(f"{t},{x!r},{pid}\n" for t, x in zip(times, row.tolist()))
        files["paths.csv"] = "".join(rows)
    _finish(args, files, None, spec, args.nq, started, argv)
    sys.stdout.write(files["summary.json"])
    return EXIT_OK


def _verify_heisenberg(args, spec, policy):
    ens = simulate_ensemble(spec, make_scale(args.nq), args.seed, args.paths, threads=_threads(args))
    reports = [heisenberg_check(ens.path(i), policy) for i in range(args.paths)]
    failing = [i for i, r in enumerate(reports) if not r.passed]
    counts = {}
    for r in reports:
        for k, v in r.counts.items():
            counts[k] = counts.get(k, 0) + v
    out = reports[0].to_dict() | {
        "counts": counts,
        "min": min(r.min for r in reports),
        "max": max(r.max for r in reports),
        "n_steps": sum(r.n_steps for r in reports),
        "P": args.paths,
        "failing_paths": failing[:100],
        "n_failing_paths": len(failing),
        "pass": not failing,
    }
    out.pop("median", None)
    return out, (EXIT_OK if not failing else EXIT_FAIL)


def _verify_equiprobability(args, spec, policy):
    rep = substream_check(args.seed, n_total=args.n_signs, n_substreams=args.substreams, alpha=args.alpha)
    return rep.to_dict(), (EXIT_OK if rep.passed else EXIT_FAIL)


def _verify_decomposition(args, spec, policy):
    if args.paths < 100:
        raise InsufficientDataError(f"decomposition needs P >= 100, got {args.paths}")
    ens = simulate_ensemble(spec, make_scale(args.nq), args.seed, args.paths, threads=_threads(args),
                            keep_paths=False)
    rep = estimate_decomposition(ens, time_bins=args.time_bins, state_bins=args.state_bins,
                                 min_count=args.min_count)
    if rep.n_reliable == 0:
        raise InsufficientDataError("no (t, x) cell reached the minimum count")
    chk = decomposition_check(rep, spec)
    res = residual_moments(ens, rep)
    out = {"check": "decomposition", "report": rep.to_dict(cells=args.cells), "comparison": chk.to_dict(),
           "residuals": res.to_dict(), "pass": chk.passed}
    return out, (EXIT_OK if chk.passed else EXIT_FAIL)


def _verify_markov(args, spec, policy):
    ens = simulate_ensemble(spec, make_scale(args.nq), args.seed, args.paths, threads=_threads(args),
                            keep_paths=False)
    rep = markov_test(ens, PastFunctional.parse(args.past), args.t, bins=args.bins, alpha=args.alpha)
    code = {"pass": EXIT_OK, "fail": EXIT_FAIL, UNRELIABLE: EXIT_UNRELIABLE}[rep.verdict]
    return rep.to_dict(), code


def _verify_diffusion(args, spec, policy):
    scale = make_scale(args.nq)
    domain = ((0.0, 1.0), _range(args.domain_x, "--domain-x"))
    chk = diffusion_checklist(spec, domain, scale, policy, seed=args.seed)
    out = {"check": "diffusion", "checklist": chk.to_dict()}
    ok = chk.overall
    if args.ref:
        ladder = [int(v) for v in args.nq_ladder.split(",")]
        wc = weak_convergence_test(spec, ReferenceLaw.parse(args.ref), ladder, args.paths, alpha=args.alpha,
                                   seed=args.seed, threads=_threads(args))
        out["weak_convergence"] = wc.to_dict()
        ok = ok and wc.passed
    out["pass"] = ok
    return out, (EXIT_OK if ok else EXIT_FAIL)


VERIFIERS = {
    "heisenberg": _verify_heisenberg,
    "equiprobability": _verify_equiprobability,
    "decomposition": _verify_decomposition,
    "markov": _verify_markov,
    "diffusion": _verify_diffusion,
}


def cmd_verify(args, argv, started) -> int:
    if args.spec is None:
        spec, policy = None, None
    else:
        spec, file_policy = load_spec(args.spec)
        policy = _policy(args, args.nq, file_policy)
    try:
        report, code = VERIFIERS[args.subcheck](args, spec, policy)
    except InsufficientDataError as exc:
        report = {"check": args.subcheck, "verdict": UNRELIABLE, "pass": False} | exc.to_dict()
        code = EXIT_UNRELIABLE
    _finish(args, {}, report, spec, args.nq, started, argv)
    return code


def cmd_dimension(args, argv, started) -> int:
    spec, _ = load_spec(args.spec)
    lo, hi, n = args.lam.split(":") if args.lam.count(":") == 2 else (None, None, None)
    if lo is None:
        raise ConfigError(f"--lambda expects LO:HI:N, got {args.lam!r}")
    try:
        lams = lambda_ladder(float(lo), float(hi), int(n))
    except ValueError:
        raise ConfigError(f"--lambda expects LO:HI:N, got {args.lam!r}") from None
    ens = simulate_ensemble(spec, make_scale(args.nq), args.seed, args.paths, threads=_threads(args),
                            keep_paths=False)
    rep = fractal_dimension(ens, lams)
    files = {"dimension.csv": rep.csv_rows()} if args.csv else {}
    _finish(args, files, rep.to_dict(), spec, args.nq, started, argv)
    return EXIT_OK


def cmd_equivalence(args, argv, started) -> int:
    spec_a, _ = load_spec(args.spec_a)
    spec_b, _ = load_spec(args.spec_b)
    scale = make_scale(args.nq)
    scale_b = make_scale(args.nq_b) if args.nq_b is not None else None
    rep = coupled_distance(spec_a, spec_b, scale, args.seed, args.paths, scale_b=scale_b, threads=_threads(args))
    report = rep.to_dict() | {"spec_hash_b": spec_hash(spec_b)}
    _finish(args, {}, report, spec_a, args.nq, started, argv)
    return EXIT_OK if rep.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qwalk", description=__doc__.splitlines()[0],
                epilog="Exit codes: 0 pass, 1 error (JSON on stderr), 2 fail, 3 unreliable.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate an ensemble; writes paths.csv, summary.json, manifest.json")
    _add_common(s, paths=100)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="run one statistical check")
    vsub = v.add_subparsers(dest="subcheck", required=True, parser_class=_Parser)
    h = vsub.add_parser("heisenberg", help="every step's (dx)^2/dt is appreciable, on every path")
    _add_common(h, paths=1)
    e = vsub.add_parser("equiprobability", help="frequency and lag-1..8 autocorrelation of the sign stream")
    _add_common(e, nq=False, spec=False)
    e.add_argument("--spec", help="accepted for uniformity; the sign stream does not depend on it")
    e.add_argument("--n-signs", type=_positive_int, default=10**7, help="stream length; default 1e7")
    e.add_argument("--substreams", type=_positive_int, default=100, help="disjoint pieces; default 100")
    e.add_argument("--alpha", type=float, default=0.001)
    e.set_defaults(nq=None)
    d = vsub.add_parser("decomposition", help="recover drift and volatility per (t, x) cell")
    _add_common(d, paths=10_000)
    d.add_argument("--time-bins", type=_positive_int, default=1, help="grid steps pooled per time bin")
    d.add_argument("--state-bins", type=_positive_int, default=32)
    d.add_argument("--min-count", type=_positive_int, default=50)
    d.add_argument("--cells", action="store_true", help="include per-cell arrays in the report")
    m = vsub.add_parser("markov", help="increment law across past-functional strata")
    _add_common(m, paths=10_000)
    m.add_argument("--t", type=float, default=0.75, help="probe time; default 0.75")
    m.add_argument("--past", default="running-max:0.5", help="running-max:THRESHOLD or lagged-sign:LAG")
    m.add_argument("--bins", type=_positive_int, default=8)
    m.add_argument("--alpha", type=float, default=0.01)
    f = vsub.add_parser("diffusion", help="diffusion checklist, optionally weak convergence to a reference law")
    _add_common(f, paths=100_000)
    f.add_argument("--ref", help="brownian:SIGMA0 or ou:THETA,SIGMA0")
    f.add_argument("--nq-ladder", default="256,1024,4096", help="comma-separated increasing grid sizes")
    f.add_argument("--domain-x", default="-5:5", help="state range LO:HI for the coefficient probes")
    f.add_argument("--alpha", type=float, default=0.001)
    v.set_defaults(func=cmd_verify)

    dim = sub.add_parser("dimension", help="fractal dimension from level-crossing lengths")
    _add_common(dim, paths=32)
    dim.add_argument("--lambda", dest="lam", default="0.0078125:0.125:5", help="geometric ladder LO:HI:N")
    dim.add_argument("--csv", action="store_true", help="also write dimension.csv with (lambda, L) pairs")
    dim.set_defaults(func=cmd_dimension)

    q = sub.add_parser("equivalence", help="coupled-path distance between two specs")
    _add_common(q, paths=1000, spec=False)
    q.add_argument("--spec-a", required=True)
    q.add_argument("--spec-b", required=True)
    q.add_argument("--nq-b", type=_positive_int, default=None, help="grid size for spec B; must equal --nq")
    q.set_defaults(func=cmd_equivalence)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.perf_counter()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, ["qwalk", *argv], started)
    except QwalkError as exc:
        _emit_error(exc.to_dict())
        return EXIT_ERROR
    except (ValueError, OSError) as exc:
        _emit_error({"kind": "config-error", "detail": str(exc)})
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
