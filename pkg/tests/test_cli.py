import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from csgfit import io
from csgfit.cli import artifact_version, main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "box"
    assert main(["synth", "--scene", "box", "--res", "24x24", "--out", str(out)]) == 0
    return out


def small_fit(capsys, synth_dir, out, *extra):
    return run(capsys, "fit", "--input", synth_dir, "--k-total", 2, "--k-neg", 1,
               "--steps", 300, "--freespace", 3000, "--out", out, *extra)


def test_synth_writes_inputs(synth_dir):
    depth, scale = io.read_pfm(synth_dir / "depth.pfm")
    assert depth.shape == (24, 24) and scale < 0
    cam = io.read_camera(synth_dir / "camera.json")
    assert (cam.width, cam.height) == (24, 24)
    rep = io.read_json(synth_dir / "report.json")
    assert rep["hit_pixels"] == int(np.isfinite(depth).sum()) > 0
    assert rep["segments"] == 3


def test_fit_render_eval_pipeline(capsys, synth_dir, tmp_path):
    code, out, _ = small_fit(capsys, synth_dir, tmp_path / "fit")
    assert code == 0
    fit_rep = json.loads(out)
    assert (fit_rep["k_total"], fit_rep["k_neg"], fit_rep["steps"]) == (2, 1, 300)
    for key in ("run_config", "seed", "version", "workers"):
        assert key in fit_rep
    assert fit_rep["version"] == artifact_version()
    assert (tmp_path / "fit" / "trace.csv").exists()

    code, out, _ = run(capsys, "render", "--model", tmp_path / "fit" / "model.json",
                       "--camera", synth_dir / "camera.json", "--out", tmp_path / "render")
    assert code == 0
    assert json.loads(out)["distinct_labels"] <= 2 * 6

    code, out, _ = run(capsys, "eval", "--pred", tmp_path / "render",
                       "--gt-depth", synth_dir / "depth.pfm",
                       "--gt-normals", synth_dir / "normals.pfm",
                       "--gt-seg", synth_dir / "labels.ppm", "--out", tmp_path / "eval.json")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("absrel\t")
    doc = io.read_json(tmp_path / "eval.json")
    metrics = doc["metrics"]
    assert "depth units" in doc["units"]["mean_dist"]
    assert 0.0 <= metrics["absrel"] < 0.05
    assert 0.0 <= metrics["seg_acc"] <= 1.0


def test_rerun_is_byte_identical(capsys, synth_dir, tmp_path):
    assert small_fit(capsys, synth_dir, tmp_path / "a")[0] == 0
    assert small_fit(capsys, synth_dir, tmp_path / "b")[0] == 0
    a = (tmp_path / "a" / "model.json").read_bytes()
    assert a == (tmp_path / "b" / "model.json").read_bytes()


def test_warm_start_from_model(capsys, synth_dir, tmp_path):
    assert small_fit(capsys, synth_dir, tmp_path / "a")[0] == 0
    code, out, _ = small_fit(capsys, synth_dir, tmp_path / "b", "--warm-start",
                             tmp_path / "a" / "model.json")
    assert code == 0 and json.loads(out)["warm_start"].endswith("model.json")


def test_out_dir_is_protected(capsys, synth_dir, tmp_path):
    assert small_fit(capsys, synth_dir, tmp_path / "a")[0] == 0
    code, _, err = small_fit(capsys, synth_dir, tmp_path / "a")
    assert code == 1 and "--force" in err
    assert small_fit(capsys, synth_dir, tmp_path / "a", "--force")[0] == 0


def test_unknown_flag_is_a_usage_error(capsys):
    code, _, err = run(capsys, "fit", "--bogus", "1", "--out", "x")
    assert code == 2 and "--bogus" in err


def test_missing_inputs_is_a_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "fit", "--out", tmp_path / "o")
    assert code == 2 and "--input" in err


def test_invalid_config_is_a_domain_error(capsys, synth_dir, tmp_path):
    code, _, err = run(capsys, "fit", "--input", synth_dir, "--k-neg", 12, "--k-total", 12,
                       "--out", tmp_path / "o")
    assert code == 1 and "k_neg must be < k_total" in err
    assert not (tmp_path / "o").exists()


def test_bad_resolution_and_negative_workers(capsys, tmp_path):
    assert run(capsys, "synth", "--scene", "box", "--res", "64", "--out", tmp_path / "s")[0] == 2
    assert run(capsys, "synth", "--scene", "box", "--workers", -1, "--out", tmp_path / "s")[0] == 2


def test_corrupt_depth_is_a_domain_error(capsys, synth_dir, tmp_path):
    bad = tmp_path / "in"
    shutil.copytree(synth_dir, bad)
    (bad / "depth.pfm").write_bytes(b"Pf\n24 24\n-1\n" + b"\0" * 10)
    code, _, err = run(capsys, "fit", "--input", bad, "--out", tmp_path / "o")
    assert code == 1 and "offset" in err


def test_toml_config_is_applied(capsys, synth_dir, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text("seed = 5\n[fit]\nk_total = 2\nk_neg = 0\nsteps = 30\n")
    code, out, _ = run(capsys, "fit", "--config", cfg, "--input", synth_dir,
                       "--freespace", 2000, "--out", tmp_path / "o")
    assert code == 0
    rep = json.loads(out)
    assert rep["seed"] == 5 and rep["steps"] == 30 and rep["k_neg"] == 0
    assert rep["run_config"]["fit"]["k_total"] == 2


def test_workers_from_environment(capsys, synth_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("CSGFIT_WORKERS", "3")
    code, out, _ = small_fit(capsys, synth_dir, tmp_path / "o")
    assert code == 0 and json.loads(out)["workers"] == 3


def test_ensemble_command(capsys, synth_dir, tmp_path):
    out = tmp_path / "ens.json"
    code, stdout, _ = run(capsys, "ensemble", "--input", synth_dir, "--strategy", "s2r",
                          "--grid", "8", "--warmup", 20, "--refine", 10,
                          "--freespace", 2000, "--out", out)
    assert code == 0
    doc = io.read_json(out)
    assert doc["grid"] == [[8, 0], [8, 4]]
    assert json.loads(stdout)["chosen"] == doc["report"]["chosen"]
    assert sum(r["count"] for r in doc["histogram"]["rows"]) == 1
    assert io.read_model(out.with_suffix(".model.json")).k_total == 8
    assert run(capsys, "ensemble", "--input", synth_dir, "--grid", "10", "--out", out,
               "--force")[0] == 1


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "csgfit.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("csgfit ")
    proc = subprocess.run([sys.executable, "-m", "csgfit.cli", "nope"], capture_output=True)
    assert proc.returncode == 2
