import json

import numpy as np
import pytest
from PIL import Image
from skimage.metrics import structural_similarity

from meshtex.core import TriangleMesh
from meshtex.io import (CheckpointError, DatasetError, MetricsReport, checkpoint_bytes, compute_metrics,
                        default_split, load_checkpoint, load_dataset, load_image, psnr, save_checkpoint,
                        save_image, ssim, write_scene)
from meshtex.synth import quad_grid
from meshtex.texture import TextureSet

from scenes import camera_towards, randomize_coeffs, random_mesh


def test_default_split_every_eighth():
    train, test = default_split(16)
    assert test == [7, 15] and len(train) == 14


def _dataset(tmp_path, n=16, size=(8, 6)):
    mesh = TriangleMesh(*quad_grid(1, 1.0))
    from meshtex.core import save_obj
    save_obj(mesh, tmp_path / "m.obj")
    cams = [camera_towards((0.1 * i, 0.2, 2.0), w=size[0], h=size[1]) for i in range(n)]
    imgs = [np.full((size[1], size[0], 3), i / 255) for i in range(n)]
    return write_scene(tmp_path, "m.obj", cams, imgs)


def test_load_dataset_roundtrip(tmp_path):
    ds = load_dataset(_dataset(tmp_path))
    assert ds.test == [7, 15] and len(ds.cameras) == 16
    idx, cams, imgs = ds.views("test")
    assert idx == [7, 15] and np.allclose(imgs[0], 7 / 255)
    assert ds.load_mesh().n_triangles == 2
    ds2 = load_dataset(tmp_path / "scene.json", test_every=4)
    assert ds2.test == [3, 7, 11, 15]


def test_explicit_split(tmp_path):
    path = _dataset(tmp_path, n=4)
    scene = json.loads(path.read_text())
    scene["split"] = {"train": [0, 1, 2], "test": [3]}
    path.write_text(json.dumps(scene))
    assert load_dataset(path).test == [3]
    scene["split"] = {"train": [0, 1], "test": [1, 3]}
    path.write_text(json.dumps(scene))
    with pytest.raises(DatasetError):
        load_dataset(path)


def test_png_normalization_and_lossless(tmp_path):
    Image.fromarray(np.full((2, 2, 3), 128, np.uint8)).save(tmp_path / "a.png")
    assert load_image(tmp_path / "a.png")[0, 0, 0] == pytest.approx(0.50196, abs=1e-5)
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (9, 7, 3)) / 255
    save_image(img, tmp_path / "b.png")
    assert np.array_equal(load_image(tmp_path / "b.png"), img)


def test_dataset_errors(tmp_path):
    path = _dataset(tmp_path, n=2)
    scene = json.loads(path.read_text())
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(DatasetError, match="malformed"):
        load_dataset(tmp_path / "bad.json")
    (tmp_path / "empty.json").write_text(json.dumps({**scene, "cameras": []}))
    with pytest.raises(DatasetError, match="empty"):
        load_dataset(tmp_path / "empty.json")
    (tmp_path / "miss.json").write_text(json.dumps({**scene, "images": ["images/000.png", "nope.png"]}))
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "miss.json")
    save_image(np.zeros((3, 3, 3)), tmp_path / "images" / "001.png")
    with pytest.raises(DatasetError, match="does not match"):
        load_dataset(path)
    (tmp_path / "count.json").write_text(json.dumps({**scene, "images": ["images/000.png"]}))
    with pytest.raises(DatasetError, match="count"):
        load_dataset(tmp_path / "count.json")


# ---------------------------------------------------------------- checkpoints

def _textures(degree=2, seed=0):
    rng = np.random.default_rng(seed)
    mesh = random_mesh(rng)
    ts = TextureSet.allocate(mesh, 0.07, degree)
    randomize_coeffs(ts, rng)
    return mesh, ts


def test_checkpoint_roundtrip(tmp_path):
    mesh, ts = _textures()
    save_checkpoint(ts, tmp_path / "a.mlsh")
    back = load_checkpoint(tmp_path / "a.mlsh", mesh, 2)
    for a, b in zip(ts.textures, back.textures):
        assert a.density == b.density and (a.width, a.height) == (b.width, b.height)
        assert np.array_equal(a.valid, b.valid) and a.forced == b.forced
        assert np.array_equal(a.coeffs.astype(np.float32), b.coeffs)
    save_checkpoint(back, tmp_path / "b.mlsh")
    assert (tmp_path / "a.mlsh").read_bytes() == (tmp_path / "b.mlsh").read_bytes()


def test_checkpoint_errors(tmp_path):
    mesh, ts = _textures()
    raw = checkpoint_bytes(ts)
    p = tmp_path / "c.mlsh"
    cases = {
        "magic": b"XLSH" + raw[4:],
        "version": raw[:4] + (7).to_bytes(4, "little") + raw[8:],
        "truncated": raw[:-10],
        "trailing": raw + b"\0",
    }
    for name, data in cases.items():
        p.write_bytes(data)
        with pytest.raises(CheckpointError, match=name if name != "magic" else "bad magic"):
            load_checkpoint(p, mesh)
    p.write_bytes(raw)
    with pytest.raises(CheckpointError, match="degree"):
        load_checkpoint(p, mesh, degree=3)
    other = TriangleMesh(mesh.vertices * 1.5, mesh.triangles)
    with pytest.raises(CheckpointError, match="layout"):
        load_checkpoint(p, other)


def test_degenerate_triangles_have_no_record(tmp_path):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], float)
    mesh = TriangleMesh(v, [[0, 1, 2], [0, 1, 3]])
    ts = TextureSet.allocate(mesh, 0.2)
    assert ts[1] is None
    save_checkpoint(ts, tmp_path / "d.mlsh")
    back = load_checkpoint(tmp_path / "d.mlsh", mesh)
    assert back[1] is None and back.n_texels == ts.n_texels


# ---------------------------------------------------------------- metrics

def test_psnr_examples():
    a = np.full((4, 4, 3), 0.3)
    assert psnr(a, a) == 100
    assert psnr(a + 0.01, a) == pytest.approx(40.0)
    with pytest.raises(ValueError):
        psnr(a, a, np.zeros((4, 4), bool))


def test_ssim_examples_and_skimage_agreement():
    a = np.full((16, 16, 3), 0.4)
    assert ssim(a, a) == pytest.approx(1.0)
    rr, cc = np.mgrid[0:32, 0:32]
    board = ((rr // 4 + cc // 4) % 2).astype(float)
    assert ssim(board, 1 - board) < 0
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(40, 33, 3))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    ref = structural_similarity(x, y, data_range=1.0, channel_axis=-1, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ssim(x, y) == pytest.approx(ref, abs=1e-6)
    assert ssim(x[:5, :5], y[:5, :5]) <= 1


def test_metrics_report(tmp_path):
    a = np.full((12, 12, 3), 0.5)
    mask = np.zeros((12, 12), bool)
    mask[2:9, 3:11] = True
    e1 = compute_metrics(a + 0.01, a, mask, 0, "train")
    e2 = compute_metrics(a + 0.001, a, mask, 1, "train")
    e3 = compute_metrics(a, a, mask, 2, "test")
    assert e1.psnr == pytest.approx(40) and e2.psnr == pytest.approx(60) and e3.ssim == pytest.approx(1)
    rep = MetricsReport([e1, e2, e3])
    assert rep.mean_psnr("train") == pytest.approx(50) and rep.mean_psnr("test") == 100
    rep.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "view,split,psnr,ssim" and lines[-1].startswith("mean,train,50.0")
    with pytest.raises(ValueError):
        compute_metrics(a, a, np.zeros((12, 12), bool))
