import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from nullforge.activations import ActivationCapture, ToyModel, forward_collect, make_calibration_set, save_capture
from nullforge.cli import main
from nullforge.nfm import read_nfm, write_nfm

SCHEMES = ["vanilla_lora", "pissa", "milora", "corda_kp", "lora_null"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _error(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture
def files(tmp_path):
    rng = np.random.default_rng(0)
    write_nfm(tmp_path / "diag.nfm", np.diag([3.0, 2.0, 1.0]))
    w = rng.standard_normal((6, 4))
    write_nfm(tmp_path / "w64.nfm", w)
    x = rng.standard_normal((4, 2)) @ rng.standard_normal((2, 30))
    save_capture(tmp_path / "cap_rank2", ActivationCapture(0, x @ x.T, 30, x))
    model = ToyModel.random((6, 8, 5), seed=1)
    save_capture(tmp_path / "cap", forward_collect(model, make_calibration_set(6, 64, latent_dim=3, seed=2), 1))
    write_nfm(tmp_path / "w1.nfm", model.weights[1])
    return tmp_path


def test_init_milora_diagonal(capsys, files):
    code, out, _ = run(capsys, "init", "--weights", files / "diag.nfm", "--scheme", "milora", "--rank", 1, "--out", files / "b")
    assert code == 0
    assert out.startswith("reconstruction_error ")
    manifest = json.loads((files / "b" / "manifest.json").read_text())
    assert manifest["reconstruction_error"] <= 1e-10
    assert manifest["scheme"] == "milora" and manifest["rank"] == 1


def test_init_lora_null_needs_capture(capsys, files):
    code, _, err = run(capsys, "init", "--weights", files / "w64.nfm", "--scheme", "lora_null", "--rank", 2, "--out", files / "b")
    assert code == 2
    payload = _error(err)
    assert payload["error"] == "usage" and "capture" in payload["message"]


def test_init_lora_null_alpha_round_trip(capsys, files):
    code, _, _ = run(
        capsys, "init", "--weights", files / "w64.nfm", "--scheme", "lora_null", "--alpha", 2, "--rank", 2,
        "--capture", files / "cap_rank2", "--out", files / "b",
    )
    assert code == 0
    code, out, _ = run(capsys, "verify", "--bundle", files / "b")
    assert code == 0
    checks = {c["check"]: c for c in json.loads(out)}
    assert checks["null_projection"]["pass"] and checks["null_projection"]["details"]["alpha"] == 2.0
    assert checks["colspace"]["details"]["ratio"] <= 1e-9
    b, a = read_nfm(files / "b" / "B.nfm"), read_nfm(files / "b" / "A.nfm")
    u = read_nfm(files / "b" / "U_null.nfm")
    w = read_nfm(files / "w64.nfm")
    np.testing.assert_allclose(b @ a, 2 * w @ u @ u.T, atol=1e-10)


def test_init_with_synthetic_calibration(capsys, files):
    code, _, _ = run(
        capsys, "init", "--weights", files / "w64.nfm", "--scheme", "corda_kp", "--rank", 2, "--calibrate",
        "--samples", 64, "--out", files / "b",
    )
    assert code == 0


@pytest.mark.parametrize("scheme", SCHEMES)
def test_init_verify_round_trip(capsys, files, scheme):
    out_dir = files / scheme
    code, _, _ = run(
        capsys, "init", "--weights", files / "w1.nfm", "--scheme", scheme, "--rank", 2, "--capture", files / "cap",
        "--seed", 3, "--out", out_dir,
    )
    assert code == 0
    code, out, _ = run(capsys, "verify", "--bundle", out_dir, "--capture", files / "cap", "--candidates", 100)
    results = json.loads(out)
    assert code == 0, results
    assert all(set(r) == {"check", "instance_seed", "pass", "margin", "details"} for r in results)


def test_verify_milora_theorem1(capsys, files):
    run(capsys, "init", "--weights", files / "w64.nfm", "--scheme", "milora", "--rank", 2, "--out", files / "b")
    code, out, _ = run(capsys, "verify", "--bundle", files / "b", "--candidates", 1000)
    assert code == 0
    t1 = [r for r in json.loads(out) if r["check"] == "theorem1"][0]
    assert t1["pass"] and t1["details"]["n_candidates"] == 1000


def test_verify_tampered_bundle_exit_1(capsys, files):
    run(capsys, "init", "--weights", files / "diag.nfm", "--scheme", "pissa", "--rank", 1, "--out", files / "b")
    path = files / "b" / "A.nfm"
    raw = bytearray(path.read_bytes())
    values = np.frombuffer(bytes(raw[24:]), dtype="<f8")
    i = int(np.flatnonzero(values)[0])
    raw[24 + 8 * i + 7] ^= 0x80  # sign bit of the first nonzero entry
    path.write_bytes(bytes(raw))
    code, out, _ = run(capsys, "verify", "--bundle", files / "b")
    assert code == 1
    assert not [r for r in json.loads(out) if r["check"] == "reconstruction"][0]["pass"]


def test_verify_triple_and_usage(capsys, files):
    code, out, _ = run(
        capsys, "verify", "--weights", files / "w1.nfm", "--capture", files / "cap", "--rank", 2, "--candidates", 50
    )
    assert [r["check"] for r in json.loads(out)] == ["theorem1", "theorem2", "theorem3"]
    assert code == 0
    code, _, err = run(capsys, "verify", "--weights", files / "w1.nfm")
    assert code == 2 and _error(err)["error"] == "usage"


def test_analyze(capsys, files):
    write_nfm(files / "eye.nfm", np.eye(4))
    write_nfm(files / "r1.nfm", np.outer([1.0, 2.0, 3.0], [1.0, -1.0]))
    code, out, _ = run(capsys, "analyze", files / "eye.nfm", files / "r1.nfm", "--out", files / "an")
    assert code == 0
    eye = json.loads((files / "an" / "eye.json").read_text())
    assert eye == {"label": "eye", "effective_rank": pytest.approx(4.0, abs=1e-12), "exact_rank": 4}
    assert json.loads((files / "an" / "r1.json").read_text())["effective_rank"] == pytest.approx(1.0, abs=1e-9)
    assert (files / "an" / "eye_spectrum.csv").read_text().startswith("idx,sigma,p\n")
    assert len(json.loads(out)) == 2


def test_analyze_weight_vs_activation_table(capsys, files):
    cap = forward_collect(ToyModel.random((6, 8, 5), seed=1), make_calibration_set(6, 64, latent_dim=2, seed=2), 1)
    write_nfm(files / "layer1.nfm", read_nfm(files / "w1.nfm"))
    write_nfm(files / "act1.nfm", cap.x_pre)
    code, out, _ = run(capsys, "analyze", files / "layer1.nfm", files / "act1.nfm", "--out", files / "an", "--table")
    assert code == 0
    w = json.loads((files / "an" / "layer1.json").read_text())
    x = json.loads((files / "an" / "act1.json").read_text())
    assert x["effective_rank"] < w["effective_rank"]
    table = (files / "an" / "table.txt").read_text().splitlines()
    assert "W0" in table[2] and "X_pre" in table[3]


def test_analyze_corrupt_names_offset(capsys, files):
    raw = (files / "diag.nfm").read_bytes()
    (files / "bad.nfm").write_bytes(raw[:40])
    code, _, err = run(capsys, "analyze", files / "bad.nfm", "--out", files / "an")
    assert code == 2
    payload = _error(err)
    assert payload["error"] == "format" and "byte offset 40" in payload["message"]
    code, _, err = run(capsys, "analyze", files / "missing.nfm", "--out", files / "an")
    assert code == 2 and _error(err)["error"] == "io"


def test_no_overwrite_without_force(capsys, files):
    args = ["init", "--weights", files / "diag.nfm", "--scheme", "pissa", "--rank", 1, "--out", files / "b"]
    assert run(capsys, *args)[0] == 0
    before = (files / "b" / "A.nfm").read_bytes()
    code, _, err = run(capsys, "init", "--weights", files / "diag.nfm", "--scheme", "milora", "--rank", 2, "--out", files / "b")
    assert code == 2 and _error(err)["error"] == "exists"
    assert (files / "b" / "A.nfm").read_bytes() == before
    assert run(capsys, *args, "--force")[0] == 0


def test_outputs_idempotent(capsys, files):
    for out in ("b1", "b2"):
        run(capsys, "init", "--weights", files / "w1.nfm", "--scheme", "corda_kp", "--rank", 2, "--capture", files / "cap",
            "--out", files / out)
    for name in ("A.nfm", "B.nfm", "residual.nfm", "W0.nfm", "manifest.json"):
        assert (files / "b1" / name).read_bytes() == (files / "b2" / name).read_bytes()


def test_usage_errors(capsys, files):
    code, _, err = run(capsys, "init", "--weights", files / "diag.nfm", "--scheme", "dora", "--rank", 1, "--out", files / "b")
    assert code == 2 and _error(err)["error"] == "usage"
    code, _, err = run(capsys, "init", "--weights", files / "diag.nfm", "--scheme", "pissa", "--rank", 9, "--out", files / "b")
    assert code == 2 and _error(err)["error"] == "parameter"
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and _error(err)["error"] == "usage"
    code, _, err = run(capsys, "init", "--sch", "pissa")
    assert code == 2


def test_locked_output_dir(capsys, files):
    from filelock import FileLock

    (files / "b").mkdir()
    with FileLock(str(files / "b" / ".nullforge.lock")):
        code, _, err = run(capsys, "init", "--weights", files / "diag.nfm", "--scheme", "pissa", "--rank", 1, "--out", files / "b")
    assert code == 2 and _error(err)["error"] == "locked"


def test_project(capsys, files):
    for scheme in ("lora_null", "milora"):
        run(capsys, "init", "--weights", files / "w1.nfm", "--scheme", scheme, "--rank", 2, "--capture", files / "cap",
            "--out", files / scheme)
        code, out, _ = run(capsys, "project", "--bundle", files / scheme, "--capture", files / "cap", "--out", files / f"p_{scheme}")
        assert code == 0
        rows = (files / f"p_{scheme}" / "pa.csv").read_text().splitlines()
        assert rows[0] == "idx,pa" and len(rows) == 9
        summary = json.loads(out)
        if scheme == "lora_null":
            assert summary["trailing_mass_fraction"] >= 1 - 1e-8
        else:
            assert summary["leading_mass_fraction"] > 0.01
    code, _, err = run(capsys, "project", "--bundle", files / "milora", "--capture", files / "cap_rank2", "--out", files / "px")
    assert code == 2 and _error(err)["error"] == "shape"


def test_simulate_vanilla_zero_steps_deterministic(capsys, files):
    digests = []
    for out in ("s1", "s2"):
        code, _, _ = run(capsys, "simulate", "--schemes", "vanilla", "--steps", 0, "--seeds", 2, "--out", files / out)
        assert code == 0
        text = (files / out / "summary.csv").read_text()
        digests.append(hashlib.sha256(text.encode()).hexdigest())
        rows = [line.split(",") for line in text.splitlines()[1:]]
        assert [r[0] for r in rows] == ["vanilla_lora", "vanilla_lora"]
        assert all(float(r[2]) == 0.0 for r in rows)
    assert digests[0] == digests[1]


def test_simulate_all_cells_failed(capsys, files):
    code, _, err = run(capsys, "simulate", "--schemes", "pissa", "--rank", 99, "--seeds", 1, "--steps", 0, "--out", files / "s")
    assert code == 1
    assert "cell_error" in err
    assert (files / "s" / "summary.csv").exists()


def test_console_script_entry(files):
    proc = subprocess.run(
        [sys.executable, "-m", "nullforge", "analyze", str(files / "diag.nfm"), "--out", str(files / "an")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)[0]["exact_rank"] == 3
