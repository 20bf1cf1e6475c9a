import json
import subprocess
import sys

import numpy as np
import pytest

from spinfilter.cli import main
from spinfilter.trajectory import sample_control, simulate_truth


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_slh(capsys):
    code, out, _ = run(["slh", "--qubits", "3", "--chi0", "0.1", "--spectra"], capsys)
    assert code == 0
    data = json.loads(out)
    assert data["residuals"][0]["unitarity_residual"] < 1e-10
    assert "spectra" in data


def test_simulate_and_analyze(tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("t_f = 0.002\ndt = 1e-5\ntau = 2e-4\ngate_count = 5\nsampler.m = 10\nsampler.m_flat = 30\n"
                   "log_every = 20\ncheckpoints = 2\n")
    out = tmp_path / "run"
    code, text, _ = run(["simulate", "--config", str(cfg), "--qubits", "2", "--trials", "2", "--seed", "3",
                         "--out", str(out), "--format", "json", "--analyze"], capsys)
    assert code == 0 and json.loads(text)["trials"] == 2
    assert (out / "fidelity_vs_n.json").exists()
    code, text, _ = run(["analyze", "--out", str(out)], capsys)
    assert code == 0 and json.loads(text)["trials"] == 2


def test_reconstruct(tmp_path, capsys):
    ctl = sample_control(1, 5, 2e-4)
    from spinfilter.sde import IntegratorConfig

    rec, _ = simulate_truth(1.0, 0.5, 3, ctl, 1.0, 0.002, config=IntegratorConfig(dt=1e-5), seed=2, log_every=0)
    rec.to_csv(tmp_path / "rec.csv")
    ctl.to_csv(tmp_path / "ctl.csv")
    for method in ("separable", "backaction-free"):
        code, text, _ = run(["reconstruct", "--record", str(tmp_path / "rec.csv"), "--control", str(tmp_path / "ctl.csv"),
                             "--method", method, "--truth", "1.0", "0.5", "--seed", "4"], capsys)
        assert code == 0
        data = json.loads(text)
        assert np.linalg.norm(data["chosen"]) == pytest.approx(1.0)
        assert 0 <= data["fidelity"] <= 1 and data["seed"] == 4


@pytest.mark.parametrize("argv,code", [
    (["bogus"], 2),
    (["simulate", "--trials", "0", "--out", "x"], 2),
    (["simulate", "--dt", "3e-6"], 2),
    (["analyze"], 2),
    (["reconstruct", "--record", "/nonexistent.csv"], 1),
])
def test_errors_are_json(argv, code, capsys):
    rc, out, err = run(argv, capsys)
    assert rc == code and out == ""
    data = json.loads(err)
    assert {"error", "message", "details"} <= set(data)


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "spinfilter", "slh", "--qubits", "2"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["residuals"]
    proc = subprocess.run([sys.executable, "-m", "spinfilter", "slh", "--qubits", "0"], capture_output=True, text=True)
    assert proc.returncode != 0
    assert "error" in json.loads(proc.stderr)
