import json
import os
import subprocess
import sys

import numpy as np
import pytest

from polarsfp.cli import load_truth, main
from polarsfp.io import read_metrics_csv, read_pfm, write_pfm, write_scene
from polarsfp.scene import MaterialSpec

from .conftest import glossy_sphere


@pytest.fixture(scope="module")
def rendered(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_scene(glossy_sphere(64), root / "scene.json")
    assert main(["render", str(root / "scene.json"), str(root / "r")]) == 0
    return root


def fake_result(dirpath, truth_dir, index=None):
    """A solve directory holding the ground truth's own float32 maps."""
    truth = load_truth(truth_dir)
    dirpath.mkdir(parents=True, exist_ok=True)
    write_pfm(dirpath / "normals_view0.pfm", read_pfm(truth_dir / "truth" / "normals.pfm"))
    write_pfm(dirpath / "mask_view0.pfm", truth.mask.astype(np.float32))
    idx = truth.index_map if index is None else np.where(truth.mask, index, 0.0)
    write_pfm(dirpath / "index.pfm", idx)
    write_pfm(dirpath / "index_mask.pfm", truth.mask.astype(np.float32))
    write_pfm(dirpath / "diffuse.pfm", truth.diffuse_image)


# --- render

def test_render_manifest(rendered):
    man = json.loads((rendered / "r" / "manifest.json").read_text())
    assert man["seed"] == 0
    assert len(man["views"]) == 3
    assert "view1/pol2.pfm" in man["artifacts"] and "correspondences.json" in man["artifacts"]


def test_render_hashes_stable(rendered, tmp_path):
    assert main(["render", str(rendered / "scene.json"), str(tmp_path / "again")]) == 0
    a = json.loads((rendered / "r" / "manifest.json").read_text())
    b = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert a["artifacts"] == b["artifacts"]


def test_render_missing_scene(tmp_path):
    assert main(["render", str(tmp_path / "nope.json"), str(tmp_path / "out")]) == 2


def test_render_bad_scene(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"schema_version": 1}))
    assert main(["render", str(tmp_path / "s.json"), str(tmp_path / "out")]) == 2


# --- solve

def test_solve_corrected_index(rendered):
    out = rendered / "solved"
    assert main(["solve", str(rendered / "r"), "--mode", "corrected-mixed", "--out", str(out)]) == 0
    index = read_pfm(out / "index.pfm")
    m = read_pfm(out / "index_mask.pfm") > 0.5
    assert abs(float(np.mean(index[m])) - 1.5) <= 0.02
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["mode"] == "corrected_mixed" and "status_counts" in diag
    assert 0 <= diag["degenerate_fraction"] <= 1


def test_solve_bad_mode(rendered):
    assert main(["solve", str(rendered / "r"), "--mode", "telepathic"]) == 2


def test_solve_single_view_corrected(rendered, tmp_path):
    assert main(["solve", str(rendered / "r"), "--views", "0", "--out", str(tmp_path / "s")]) == 2


def test_solve_views_must_include_reference(rendered, tmp_path):
    assert main(["solve", str(rendered / "r"), "--views", "1,2", "--out", str(tmp_path / "s")]) == 2


def test_solve_uncorrected_on_pure_specular(tmp_path):
    write_scene(glossy_sphere(48, views=1, material=MaterialSpec(1.5, 0.0, 1.0, 3.0)), tmp_path / "s.json")
    assert main(["render", str(tmp_path / "s.json"), str(tmp_path / "r")]) == 0
    assert main(["solve", str(tmp_path / "r"), "--mode", "uncorrected-specular", "--assumed-n", "1.5",
                 "--out", str(tmp_path / "u")]) == 0
    assert main(["evaluate", str(tmp_path / "u"), str(tmp_path / "r"), "--out", str(tmp_path / "m.csv")]) == 0
    (row,) = read_metrics_csv(tmp_path / "m.csv")
    assert row["angular_err_deg"] < 0.1


def test_threads_do_not_change_output(rendered, tmp_path):
    env = dict(os.environ, POLARSFP_THREADS="3")
    cmd = [sys.executable, "-m", "polarsfp", "solve", str(rendered / "r"), "--out"]
    subprocess.run(cmd + [str(tmp_path / "a")], env=env, check=True, capture_output=True)
    assert main(["solve", str(rendered / "r"), "--threads", "1", "--out", str(tmp_path / "b")]) == 0
    for name in ("index.pfm", "diffuse.pfm", "normals_view1.pfm", "status.pfm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bad_threads_env(rendered, monkeypatch):
    monkeypatch.setenv("POLARSFP_THREADS", "many")
    assert main(["solve", str(rendered / "r")]) == 2


# --- evaluate

def test_evaluate_truth_against_itself(rendered, tmp_path):
    fake_result(tmp_path / "res", rendered / "r")
    assert main(["evaluate", str(tmp_path / "res"), str(rendered / "r"), "--out", str(tmp_path / "m.csv")]) == 0
    (row,) = read_metrics_csv(tmp_path / "m.csv")
    assert row["normal_mse"] == 0 and row["angular_err_deg"] == 0 and row["index_mae"] == 0
    assert (tmp_path / "previews" / "normals_view0.png").exists()
    assert (tmp_path / "previews" / "index.pfm").exists()


def test_evaluate_uniform_index_offset(rendered, tmp_path):
    fake_result(tmp_path / "res", rendered / "r", index=1.49)
    assert main(["evaluate", str(tmp_path / "res"), str(rendered / "r"), "--out", str(tmp_path / "m.csv")]) == 0
    (row,) = read_metrics_csv(tmp_path / "m.csv")
    # 1.49 and 1.5 are stored as float32
    assert row["index_mae"] == pytest.approx(0.01, abs=1e-6)


def test_evaluate_dimension_mismatch(rendered, tmp_path):
    write_scene(glossy_sphere(32), tmp_path / "s.json")
    assert main(["render", str(tmp_path / "s.json"), str(tmp_path / "small")]) == 0
    fake_result(tmp_path / "res", tmp_path / "small")
    assert main(["evaluate", str(tmp_path / "res"), str(rendered / "r"), "--out", str(tmp_path / "m.csv")]) == 2


def test_evaluate_empty_intersection(rendered, tmp_path):
    fake_result(tmp_path / "res", rendered / "r")
    write_pfm(tmp_path / "res" / "mask_view0.pfm", np.zeros((64, 64), np.float32))
    assert main(["evaluate", str(tmp_path / "res"), str(rendered / "r"), "--out", str(tmp_path / "m.csv")]) == 1


# --- experiment

def test_experiment_hash_stable(tmp_path):
    for run in ("a", "b"):
        assert main(["experiment", "sphere-fig4", "--out", str(tmp_path / run)]) == 0
    a = (tmp_path / "a" / "comparison.csv").read_bytes()
    assert a == (tmp_path / "b" / "comparison.csv").read_bytes()
    modes = {r["mode"] for r in read_metrics_csv(tmp_path / "a" / "comparison.csv")}
    assert modes == {"corrected_mixed", "uncorrected_specular"}


def test_unknown_preset():
    assert main(["experiment", "teapot"]) == 2


def test_version(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.strip()
