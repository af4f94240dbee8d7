import json
import subprocess
import sys

import pytest

from qwalk.cli import main

BROWNIAN = {"drift": "0", "volatility": "1", "x0": {"point": 0.0}}
DETERMINISTIC = {"drift": "1", "volatility": "0", "x0": {"point": 0.0}}
OU = {"drift": "-theta*x", "volatility": "0.5", "params": {"theta": 1.0}, "x0": {"point": 0.0}}


@pytest.fixture
def specs(tmp_path):
    out = {}
    for name, doc in (("brownian", BROWNIAN), ("deterministic", DETERMINISTIC), ("ou", OU)):
        f = tmp_path / f"{name}.json"
        f.write_text(json.dumps(doc))
        out[name] = str(f)
    return out


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_simulate_writes_artifacts(specs, tmp_path, capsys):
    out = tmp_path / "runs"
    code = main(["simulate", "--spec", specs["brownian"], "--nq", "1024", "--paths", "100", "--seed", "42",
                 "--out", str(out)])
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json", "paths.csv", "summary.json"]
    lines = (out / "paths.csv").read_text().splitlines()
    assert lines[0] == "t,x,path_id"
    assert len(lines) == 1 + 100 * 1025
    assert lines[1] == "0.0,0.0,0"
    assert lines[-1].startswith("1.0,") and lines[-1].endswith(",99")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 42 and manifest["n_q"] == 1024
    assert manifest["spec_hash"] == "afa99f5ed70b549a"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["qv"]["mean"] == pytest.approx(1.0, abs=1e-12)


def test_no_temp_files_left(specs, tmp_path):
    out = tmp_path / "runs"
    main(["simulate", "--spec", specs["ou"], "--nq", "64", "--paths", "5", "--out", str(out)])
    assert not [p for p in out.iterdir() if p.name.startswith(".")]


def test_rerun_byte_identical_across_threads(specs, tmp_path):
    outs = []
    for i, threads in enumerate(("1", "4")):
        out = tmp_path / f"r{i}"
        main(["simulate", "--spec", specs["ou"], "--nq", "128", "--paths", "20000", "--seed", "5",
              "--threads", threads, "--out", str(out)])
        outs.append(out)
    for name in ("paths.csv", "summary.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_threads_env_fallback(specs, tmp_path, monkeypatch):
    monkeypatch.setenv("QWALK_THREADS", "3")
    out = tmp_path / "e"
    assert main(["simulate", "--spec", specs["brownian"], "--nq", "16", "--paths", "2", "--out", str(out)]) == 0


def test_missing_spec(tmp_path, capsys):
    assert main(["simulate", "--spec", str(tmp_path / "nope.json")]) == 1
    err = _error(capsys)
    assert err["kind"] == "spec-not-found"
    assert set(err) <= {"kind", "detail", "at"}


def test_bad_spec_expression(tmp_path, capsys):
    f = tmp_path / "bad.json"
    f.write_text(json.dumps(BROWNIAN | {"drift": "sqrt("}))
    assert main(["simulate", "--spec", str(f)]) == 1
    err = _error(capsys)
    assert err["kind"] == "spec-invalid"
    assert err["at"] == "offset 5"


def test_verify_heisenberg(specs, capsys):
    assert main(["verify", "heisenberg", "--spec", specs["brownian"], "--nq", "4096", "--seed", "7"]) == 0
    assert json.loads(capsys.readouterr().out)["pass"] is True
    assert main(["verify", "heisenberg", "--spec", specs["deterministic"], "--nq", "4096", "--seed", "7"]) == 2


def test_verify_report_written(specs, tmp_path):
    out = tmp_path / "v"
    assert main(["verify", "heisenberg", "--spec", specs["deterministic"], "--out", str(out)]) == 2
    assert json.loads((out / "report.json").read_text())["pass"] is False
    assert (out / "manifest.json").exists()


def test_policy_flags_change_verdict(specs):
    # widening the band down to 1e-4 makes dt = 1/4096 appreciable for the line
    args = ["verify", "heisenberg", "--spec", specs["deterministic"], "--nq", "4096"]
    assert main(args) == 2
    assert main(args + ["--appreciable-low", "1e-4", "--infinitesimal-cut", "1e-5"]) == 0


def test_policy_from_spec_file(tmp_path):
    f = tmp_path / "s.json"
    policy = {"infinitesimal_cut": 1e-5, "appreciable_low": 1e-4, "appreciable_high": 1e2, "limited_cut": 1e6}
    f.write_text(json.dumps(DETERMINISTIC | {"tolerance_policy": policy}))
    assert main(["verify", "heisenberg", "--spec", str(f), "--nq", "4096"]) == 0


def test_bad_policy(specs, capsys):
    assert main(["verify", "heisenberg", "--spec", specs["brownian"], "--appreciable-low", "1e3"]) == 1
    assert _error(capsys)["kind"] == "invalid-policy"


def test_verify_markov_insufficient(specs, capsys):
    assert main(["verify", "markov", "--spec", specs["brownian"], "--paths", "100"]) == 3
    assert json.loads(capsys.readouterr().out)["verdict"] == "unreliable"


def test_verify_decomposition_insufficient(specs):
    assert main(["verify", "decomposition", "--spec", specs["ou"], "--paths", "10"]) == 3


def test_verify_decomposition(specs, capsys):
    assert main(["verify", "decomposition", "--spec", specs["ou"], "--nq", "100", "--paths", "5000"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["comparison"]["fraction_within"] >= 0.95
    assert "drift_est" not in rep["report"]


def test_verify_equiprobability(capsys):
    assert main(["verify", "equiprobability", "--n-signs", "1000000", "--seed", "3"]) == 0
    assert json.loads(capsys.readouterr().out)["allowed_failures"] == 3


def test_verify_diffusion(specs, capsys):
    code = main(["verify", "diffusion", "--spec", specs["brownian"], "--ref", "brownian:1.0",
                 "--nq-ladder", "16,64,256", "--paths", "20000", "--seed", "3"])
    rep = json.loads(capsys.readouterr().out)
    assert code == 0
    assert rep["checklist"]["overall"] is True
    assert len(rep["weak_convergence"]["rungs"]) == 3


def test_verify_diffusion_family_mismatch(specs, capsys):
    assert main(["verify", "diffusion", "--spec", specs["ou"], "--ref", "brownian:1.0", "--paths", "10"]) == 1
    assert _error(capsys)["kind"] == "config-error"


def test_unknown_subcheck(specs, capsys):
    with pytest.raises(SystemExit) as ei:
        main(["verify", "bogus", "--spec", specs["brownian"]])
    assert ei.value.code == 1
    assert _error(capsys)["kind"] == "usage-error"


def test_dimension_report(specs, tmp_path, capsys):
    out = tmp_path / "d"
    code = main(["dimension", "--spec", specs["brownian"], "--nq", "65536", "--paths", "4",
                 "--lambda", "0.03125:0.5:5", "--csv", "--out", str(out)])
    assert code == 0
    rep = json.loads(capsys.readouterr().out)
    assert "D_hat" in rep
    assert (out / "dimension.csv").read_text().startswith("lambda,L\n")


def test_dimension_bad_ladder(specs, capsys):
    assert main(["dimension", "--spec", specs["brownian"], "--lambda", "0.1:0.2"]) == 1


def test_equivalence_identical(specs, capsys):
    code = main(["equivalence", "--spec-a", specs["ou"], "--spec-b", specs["ou"], "--nq", "500", "--paths", "50"])
    rep = json.loads(capsys.readouterr().out)
    assert code == 0
    assert rep["pass"] is True
    assert rep["mean_sup_diff"] == 0.0 and rep["max_sup_diff"] == 0.0


def test_equivalence_nq_mismatch(specs, capsys):
    code = main(["equivalence", "--spec-a", specs["ou"], "--spec-b", specs["ou"], "--nq", "500", "--nq-b", "1000"])
    assert code == 1
    assert _error(capsys)["kind"] == "config-error"


def test_console_entry_point(specs):
    proc = subprocess.run([sys.executable, "-m", "qwalk.cli", "simulate", "--spec", specs["brownian"],
                           "--nq", "16", "--paths", "2"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["P"] == 2


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit):
        main(["simulate", "--help"])
    text = capsys.readouterr().out
    for flag in ("--spec", "--nq", "--paths", "--seed", "--out", "--threads", "--limited-cut"):
        assert flag in text
