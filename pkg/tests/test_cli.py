import subprocess
import sys

import pytest

from meshtex.cli import main

SMALL = ["--set", "synth.grid=2", "--set", "synth.n_views=8", "--set", "synth.width=32",
         "--set", "synth.height=32"]
FAST = ["--set", "train.epochs=2", "--set", "adapt.max_rounds=2", "--set", "adapt.min_pixels=8"]


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(["synth", "--out", str(out), "--seed", "7", *SMALL]) == 0
    return out


def test_synth_seed_reproducible(scene, tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--seed", "7", *SMALL]) == 0
    for name in ["scene.json", "mesh.obj", "gt_checkpoint.mlsh", "images/000.png", "images/007.png"]:
        assert (tmp_path / name).read_bytes() == (scene / name).read_bytes()


def test_train_eval_render_export(scene, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--scene", str(scene / "scene.json"), "--out", str(run), "--threads", "2", *FAST]) == 0
    for name in ["checkpoint.mlsh", "rounds.csv", "densities.png", "loss.csv", "steps.csv", "loss.png",
                 "config.json"]:
        assert (run / name).exists(), name
    ck = str(run / "checkpoint.mlsh")
    assert main(["eval", "--scene", str(scene / "scene.json"), "--checkpoint", ck, "--out", str(run / "ev"),
                 "--split", "test"]) == 0
    assert "test PSNR" in capsys.readouterr().out
    assert (run / "ev" / "metrics.csv").exists() and (run / "ev" / "psnr.png").exists()
    assert main(["render", "--scene", str(scene / "scene.json"), "--checkpoint", ck, "--out", str(run / "r"),
                 "--views", "0,7"]) == 0
    assert sorted(p.name for p in (run / "r").iterdir()) == ["path_000.png", "path_007.png",
                                                             "render_000.png", "render_007.png"]
    assert main(["export", "--checkpoint", ck, "--scene", str(scene / "scene.json"), "--out", str(run / "x")]) == 0
    assert (run / "x" / "textures.csv").exists()


def test_train_without_adapt(scene, tmp_path):
    assert main(["train", "--scene", str(scene / "scene.json"), "--out", str(tmp_path), "--set",
                 "adapt.enabled=false", "--set", "train.epochs=1"]) == 0
    assert not (tmp_path / "rounds.csv").exists() and (tmp_path / "checkpoint.mlsh").exists()


def test_thread_count_does_not_change_checkpoint(scene, tmp_path):
    outs = []
    for threads in ("1", "3"):
        out = tmp_path / threads
        assert main(["train", "--scene", str(scene / "scene.json"), "--out", str(out), "--threads", threads,
                     *FAST]) == 0
        outs.append((out / "checkpoint.mlsh").read_bytes())
    assert outs[0] == outs[1]


def test_user_errors(scene, tmp_path):
    sj = str(scene / "scene.json")
    assert main(["eval", "--scene", sj, "--checkpoint", str(tmp_path / "missing.mlsh"), "--out", str(tmp_path)]) == 1
    assert main(["train", "--scene", sj, "--out", str(tmp_path), "--set", "train.nonsense=1"]) == 1
    assert main(["train", "--scene", sj, "--out", str(tmp_path), "--set", "garbage"]) == 1
    assert main(["train", "--scene", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1
    assert main(["frobnicate", "--out", str(tmp_path)]) == 1
    (tmp_path / "bad.mlsh").write_bytes(b"junk")
    assert main(["eval", "--scene", sj, "--checkpoint", str(tmp_path / "bad.mlsh"), "--out", str(tmp_path)]) == 1


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "meshtex", "eval", "--scene", str(tmp_path / "x.json"),
                        "--checkpoint", "x", "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 1 and "error" in r.stderr.lower()
