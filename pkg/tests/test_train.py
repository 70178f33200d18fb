import numpy as np
import pytest

from meshtex.core import TriangleMesh, frustum_visible
from meshtex.io import checkpoint_bytes, psnr
from meshtex.shade import ShadingPlan, build_plan, build_plans, compose_image, render_colors, render_image
from meshtex.sh import sh_basis_batch
from meshtex.synth import quad_grid
from meshtex.texture import TextureSet
from meshtex.train import (GradientBuffer, SparseAdam, TrainConfig, backward, image_loss, optimizer_step,
                           smooth_l1, train_round)

from scenes import camera_towards, randomize_coeffs, random_camera, random_mesh


def test_smooth_l1_examples():
    assert [float(v) for v in smooth_l1(0.0)] == [0.0, 0.0]
    assert [float(v) for v in smooth_l1(0.5)] == [0.125, 0.5]
    assert [float(v) for v in smooth_l1(2.0)] == [1.5, 1.0]
    assert [float(v) for v in smooth_l1(-3.0)] == [2.5, -1.0]


def test_image_loss_examples():
    a = np.full((4, 4, 3), 0.3)
    assert image_loss(a, a)[0] == 0
    b = a.copy()
    b[1, 2, 0] += 0.5
    mask = np.zeros((4, 4), bool)
    mask[1, 2] = True
    loss, g = image_loss(b, a, mask)
    assert loss == pytest.approx(0.125)
    assert g[1, 2, 0] == pytest.approx(0.5) and np.count_nonzero(g) == 1
    loss, g = image_loss(b, a, np.zeros((4, 4), bool))
    assert loss == 0 and not g.any()
    with pytest.raises(ValueError):
        image_loss(a, a[:3])


def _tiny_plan(basis, weight=1.0, texel=2, version=0):
    return ShadingPlan((1, 1), np.array([0]), np.array([0]), basis[None], np.array([0], np.int8),
                       np.array([0], np.int8), np.array([0]), np.array([texel]), np.array([weight]), version)


def test_backward_single_path_transpose():
    basis = sh_basis_batch(np.array([[0.0, 0.6, 0.8]]), 2)[0]
    plan = _tiny_plan(basis)
    g = np.array([[0.2, -0.1, 0.05]])
    buf = backward(plan, g)
    assert buf.texels.tolist() == [2]
    assert np.array_equal(buf.grads[0], g[0][:, None] * basis[None, :])
    empty = backward(plan, np.zeros((1, 3)))
    assert len(empty.texels) == 0 and empty.touched == set()


def test_backward_clamp_gating_and_stale_guard():
    mesh = TriangleMesh(*quad_grid(1, 1.0))
    ts = TextureSet.allocate(mesh, 0.1)
    plan = build_plan(mesh, ts, camera_towards((0.1, 0.2, 1.5)))
    colors = render_colors(plan, ts.flat_coeffs())
    colors[:, 0] = 1.5   # red clipped everywhere
    buf = backward(plan, np.ones((plan.n_pixels, 3)), colors)
    assert np.all(buf.grads[:, 0] == 0) and np.any(buf.grads[:, 1] != 0)
    ts.replace(0, ts[0].copy())
    with pytest.raises(RuntimeError, match="stale"):
        backward(plan, np.ones((plan.n_pixels, 3)), texset=ts)


def test_gradient_buffer_merge_and_dense():
    a = GradientBuffer(np.array([1, 4]), np.ones((2, 3, 1)))
    b = GradientBuffer(np.array([0, 4]), 2 * np.ones((2, 3, 1)))
    m = a.merged(b)
    assert m.texels.tolist() == [0, 1, 4]
    assert m.grads[:, 0, 0].tolist() == [2, 1, 3]
    assert m.dense(6)[:, 0, 0].tolist() == [2, 1, 0, 0, 3, 0]


def test_optimizer_one_step_and_zero():
    cfg = TrainConfig(lr=0.01)
    flat = np.zeros((5, 3, 9))
    st = SparseAdam(5, (3, 9), cfg)
    before = flat.copy()
    optimizer_step(flat, GradientBuffer(np.zeros(0, np.int64), np.zeros((0, 3, 9))), st)
    assert np.array_equal(flat, before) and st.allocated == 0
    g = np.zeros((1, 3, 9))
    g[0, 1, 4] = 0.37
    optimizer_step(flat, GradientBuffer(np.array([3]), g), st)
    expected = -cfg.lr * 0.37 / (0.37 + cfg.eps)
    assert abs(flat[3, 1, 4] - expected) < 1e-9
    assert np.count_nonzero(flat) == 1 and st.allocated == 1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)


def _teacher(seed=0, n_views=12, grid=1, gt_density=0.08):
    rng = np.random.default_rng(seed)
    mesh = TriangleMesh(*quad_grid(grid, 1.0))
    gt = TextureSet.allocate(mesh, gt_density)
    randomize_coeffs(gt, rng)
    cams = [random_camera(rng, (1.2, 1.8), 48, 48) for _ in range(n_views)]
    imgs = [render_image(mesh, gt, c)[0] for c in cams]
    return mesh, gt, cams, imgs


def test_teacher_student_heldout_psnr_rises():
    mesh, gt, cams, imgs = _teacher()
    train_c, train_i = cams[:10], imgs[:10]
    ts = TextureSet.allocate(mesh, 0.08)
    plans = build_plans(mesh, ts, cams[10:])

    def heldout():
        flat = ts.flat_coeffs()
        return np.mean([psnr(compose_image(p, render_colors(p, flat)), im, p_mask(p))
                        for p, im in zip(plans, imgs[10:])])
    hist = [heldout()]
    state = None
    for epoch in range(5):
        _, state = train_round(mesh, ts, train_c, train_i, TrainConfig(epochs=1, batch=2, seed=epoch), state)
        hist.append(heldout())
    assert all(b > a for a, b in zip(hist, hist[1:])), hist


def p_mask(plan):
    from meshtex.shade import coverage_mask
    return coverage_mask(plan)


def test_training_loss_trend_over_seeds():
    mesh, gt, cams, imgs = _teacher(1, n_views=8)
    diffs = []
    for seed in range(3):
        ts = TextureSet.allocate(mesh, 0.08)
        res, _ = train_round(mesh, ts, cams, imgs, TrainConfig(epochs=6, seed=seed))
        diffs.append(np.diff(res.epoch_loss))
        assert res.epoch_loss[-1] < res.epoch_loss[0]
        assert len(res.step_log) == 6 * len(cams) and len(res.renders) == len(cams)
    assert np.all(np.median(np.array(diffs), axis=0) <= 0)


def test_working_set_and_determinism():
    rng = np.random.default_rng(2)
    mesh = random_mesh(rng)
    gt = TextureSet.allocate(mesh, 0.06)
    randomize_coeffs(gt, rng)
    cams = [random_camera(rng, (0.5, 0.8)) for _ in range(3)]
    imgs = [render_image(mesh, gt, c)[0] for c in cams]
    ts = TextureSet.allocate(mesh, 0.06)
    for cam, img in zip(cams, imgs):
        plan = build_plan(mesh, ts, cam)
        flat = ts.flat_coeffs()
        target = img.reshape(-1, 3)[plan.pixels]
        loss, dl = image_loss(np.clip(render_colors(plan, flat), 0, 1), target)
        buf = backward(plan, dl, render_colors(plan, flat))
        vis = frustum_visible(mesh, cam)
        tris = {ts.unravel(int(i))[0] for i in buf.texels}
        assert tris <= vis
        assert (np.abs(buf.grads).sum() > 0) == bool(np.any(dl != 0))
    out = []
    for threads in (1, 3, 1):
        t2 = TextureSet.allocate(mesh, 0.06)
        train_round(mesh, t2, cams, imgs, TrainConfig(epochs=2, threads=threads))
        out.append(checkpoint_bytes(t2))
    assert out[0] == out[1] == out[2]


def test_train_round_errors():
    mesh = TriangleMesh(*quad_grid(1, 1.0))
    ts = TextureSet.allocate(mesh, 0.1)
    with pytest.raises(ValueError, match="empty"):
        train_round(mesh, ts, [], [], TrainConfig())
    away = camera_towards((0, 0, -1), (0, 0, -5))
    with pytest.raises(ValueError, match="no covered"):
        train_round(mesh, ts, [away], [np.zeros((64, 64, 3))], TrainConfig())
