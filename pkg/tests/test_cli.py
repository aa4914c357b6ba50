import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from posefree.camera import Intrinsics
from posefree.checkpoint import load_tensors
from posefree.cli import main, write_oracle_checkpoint

TINY = ["--model.image_size=32", "--model.dim=16", "--model.heads=2", "--model.layers=1",
        "--model.triplane_tokens=4", "--model.point_width=16", "--model.render_steps=8"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    assert main(["gen-data", "--out", str(root), "--scenes", "2", "--views", "5", "--size", "32", "--seed", "7",
                 "--render-steps", "16"]) == 0
    return root


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(dataset), "--out", str(out), "--train.steps=3", "--train.warmup=1",
                 "--train.crop=8", "--train.log_every=0", *TINY]) == 0
    return out


def test_gen_data_layout(dataset):
    dirs = sorted(p for p in os.listdir(dataset) if p.startswith("scene_"))
    assert dirs == ["scene_0", "scene_1"]
    pngs = [f for d in dirs for f in os.listdir(dataset / d) if f.endswith(".png")]
    assert len(pngs) == 10
    cfg = json.load(open(dataset / "dataset.json"))
    assert cfg["views"] == 5 and cfg["seed"] == 7


def test_gen_data_is_deterministic(dataset, tmp_path):
    again = tmp_path / "again"
    assert main(["gen-data", "--out", str(again), "--scenes", "2", "--views", "5", "--size", "32", "--seed", "7",
                 "--render-steps", "16"]) == 0
    for d in ("scene_0", "scene_1"):
        for f in os.listdir(dataset / d):
            assert (dataset / d / f).read_bytes() == (again / d / f).read_bytes()


def test_gen_data_infeasible_exit_2(tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path / "x"), "--views", "6", "--min-angle-deg", "100"])
    assert code == 2
    assert not (tmp_path / "x").exists()
    assert "cannot place" in capsys.readouterr().err


def test_train_writes_checkpoints_log_and_config(checkpoint):
    names = set(os.listdir(checkpoint))
    assert {"last.json", "last.pftn", "step_0.json", "metrics.jsonl", "config.yaml"} <= names
    cfg = yaml.safe_load(open(checkpoint / "config.yaml"))
    assert cfg["train"]["steps"] == 3 and cfg["model"]["dim"] == 16
    assert len(open(checkpoint / "metrics.jsonl").read().splitlines()) == 3


def test_train_zero_steps_writes_initial_checkpoint(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--train.steps", "0", *TINY]) == 0
    assert json.load(open(tmp_path / "step_0.json"))["step"] == 0
    assert json.load(open(tmp_path / "last.json"))["step"] == 0
    assert not [n for n in os.listdir(tmp_path) if n.startswith("step_") and n != "step_0.json"
                and n != "step_0.pftn"]


def test_resume_from_final_is_noop(dataset, checkpoint, tmp_path):
    before = (checkpoint / "last.pftn").read_bytes()
    assert main(["train", "--data", str(dataset), "--out", str(checkpoint), "--resume", str(checkpoint / "last"),
                 "--train.steps=3", "--train.warmup=1", "--train.crop=8", "--train.log_every=0", *TINY]) == 0
    assert (checkpoint / "last.pftn").read_bytes() == before


def test_train_rejects_unknown_config_key(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "o"), "--train.bogus=1"]) == 5
    assert not (tmp_path / "o").exists()


def test_train_resume_mismatch_exit_4(dataset, checkpoint, tmp_path):
    code = main(["train", "--data", str(dataset), "--out", str(tmp_path), "--resume", str(checkpoint / "last"),
                 *TINY, "--model.dim=32"])
    assert code == 4


def test_eval_variable_views(dataset, checkpoint, tmp_path):
    for v in (4, 2):
        out = tmp_path / f"v{v}"
        assert main(["eval", "--checkpoint", str(checkpoint / "last"), "--data", str(dataset), "--views", str(v),
                     "--out", str(out)]) == 0
        rep = json.load(open(out / "report.json"))
        assert rep["views"] == v
        assert len(open(out / "scenes.csv").read().splitlines()) == 1 + 2


def test_eval_oracle_checkpoint(dataset, tmp_path):
    write_oracle_checkpoint(tmp_path / "oracle")
    assert main(["eval", "--checkpoint", str(tmp_path / "oracle"), "--data", str(dataset), "--views", "4",
                 "--out", str(tmp_path / "rep")]) == 0
    rep = json.load(open(tmp_path / "rep" / "report.json"))
    assert rep["acc15"] == 1.0 and rep["rot_err"] < 1e-4


def test_eval_bad_checkpoint_exit_4(dataset, tmp_path):
    (tmp_path / "junk.json").write_text("{\"format\": 99}")
    (tmp_path / "junk.pftn").write_bytes(b"")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk"), "--data", str(dataset), "--out",
                 str(tmp_path / "r")]) == 4


def write_intrinsics(path, size=32):
    path.write_text(json.dumps([Intrinsics.default(size).as_list()]))
    return path


@pytest.mark.parametrize("n", [4, 1])
def test_infer_outputs(dataset, checkpoint, tmp_path, n):
    imgs = [str(dataset / "scene_1" / f"view_{k}.png") for k in range(n)]
    intr = write_intrinsics(tmp_path / "k.json")
    out = tmp_path / "inf"
    assert main(["infer", "--checkpoint", str(checkpoint / "last"), *imgs, "--intrinsics", str(intr),
                 "--out", str(out)]) == 0
    poses = json.load(open(out / "poses.json"))
    assert len(poses["poses"]) in (n, 1)
    np.testing.assert_allclose(np.array(poses["poses"][0]["R"]).reshape(3, 3), np.eye(3), atol=1e-12)
    assert (out / "turntable.png").exists() and (out / "render_0.png").exists()
    tri = load_tensors(out / "triplane.pftn")
    assert {"plane_xy", "plane_xz", "plane_yz"} <= set(tri)
    assert any(k.startswith("decoder.") for k in tri)
    first = (out / "poses.json").read_bytes()
    assert main(["infer", "--checkpoint", str(checkpoint / "last"), *imgs, "--intrinsics", str(intr),
                 "--out", str(out)]) == 0
    assert (out / "poses.json").read_bytes() == first


def test_infer_size_mismatch_exit_5(dataset, checkpoint, tmp_path):
    from PIL import Image
    Image.new("RGB", (20, 20), "white").save(tmp_path / "small.png")
    assert main(["infer", "--checkpoint", str(checkpoint / "last"), str(tmp_path / "small.png"), "--intrinsics",
                 str(write_intrinsics(tmp_path / "k.json")), "--out", str(tmp_path / "o")]) == 5
    assert not (tmp_path / "o").exists()


def test_module_entry_point_runs():
    r = subprocess.run([sys.executable, "-m", "posefree", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("gen-data", "train", "eval", "infer"):
        assert cmd in r.stdout
