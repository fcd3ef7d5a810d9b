import numpy as np
import pytest
from conftest import SMALL_ARCH, SMALL_ENC, small_params
from oracles import FD_STEP, adam_reference, central_diff, rel_err

from spnf.distill import DistillConfig
from spnf.field import init_field
from spnf.renderer import render_backward, render_rays
from spnf.scene_io import make_synthetic_scene
from spnf import distill as ds
from spnf.training import (
    AdamState,
    LossWeights,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    adam_step,
    lr_at,
    reconstruction_loss,
    reconstruction_loss_grad,
    total_loss,
    train,
)

TINY_DISTILL = DistillConfig(patch_size=8, pairs_per_patch=16, patches_per_iter=1, knn_region=4, knn_k=2)


def tiny_cfg(**kw):
    base = dict(iterations=4, batch_rays=32, n_samples=8, arch=SMALL_ARCH, encoding=SMALL_ENC,
                distill=TINY_DISTILL, chunk_rays=16, seed=3, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


def test_reconstruction_examples(rng):
    a = rng.random((5, 3))
    assert reconstruction_loss(a, a) == 0
    assert reconstruction_loss(np.full((1, 3), 0.5), np.full((1, 3), 0.4)) == pytest.approx(0.03, abs=1e-15)
    b = rng.random((5, 3))
    loop = sum(sum((a[r, c] - b[r, c]) ** 2 for c in range(3)) for r in range(5)) / 5
    assert reconstruction_loss(a, b) == pytest.approx(loop, rel=1e-14)
    with pytest.raises(ValueError):
        reconstruction_loss(a, b[:4])


def reconstruction_gradient_check(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((int(rng.integers(1, 9)), 3)), rng.random((1, 3))
    b = rng.random(a.shape)
    g = reconstruction_loss_grad(a, b)
    fd = central_diff(lambda: reconstruction_loss(a, b), a, FD_STEP)
    return float(rel_err(g, fd).max())


@pytest.mark.parametrize("seed", range(5))
def test_reconstruction_grad(seed):
    assert reconstruction_gradient_check(seed) < 1e-4


def test_total_loss_examples():
    w = LossWeights(0.2, 0.02)
    assert total_loss(0.01, 0.1, 0.2, w) == 0.01 + 0.2 * 0.1 + 0.02 * 0.2
    assert total_loss(0.5, 3.0, 7.0, LossWeights(0, 0)) == 0.5
    assert total_loss(0.0, 2.0, 0.0, w) == pytest.approx(2 * total_loss(0.0, 1.0, 0.0, w))
    with pytest.raises(ValueError):
        LossWeights(-1, 0)


def test_lr_schedule():
    cfg = TrainConfig(iterations=1000)
    assert lr_at(0, cfg) == pytest.approx(2e-3, rel=1e-12)
    assert lr_at(1000, cfg) == pytest.approx(2e-5, rel=1e-12)
    assert lr_at(500, cfg) == pytest.approx(2e-4, rel=1e-12)
    lrs = [lr_at(s, cfg) for s in range(1001)]
    assert all(x >= y for x, y in zip(lrs, lrs[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-5, lr_end=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(depth_loss="sum")


def scalar_params(x):
    p = init_field(0, SMALL_ARCH, SMALL_ENC, dtype=np.float64)
    p.tensors = {"x": np.array(x, dtype=np.float64)}
    return p


def test_adam_first_step_and_fixed_point():
    p = scalar_params([0.5, -2.0, 1.0])
    st0 = AdamState(0, {"x": np.zeros(3)}, {"x": np.zeros(3)})
    q, st1 = adam_step(p, {"x": np.array([3.0, -0.01, 0.0])}, st0, lr=1e-2)
    np.testing.assert_allclose(q.tensors["x"], [0.5 - 1e-2, -2.0 + 1e-2, 1.0], rtol=1e-6)
    assert st1.step == 1 and q.tensors["x"][2] == 1.0
    r, _ = adam_step(p, {"x": np.zeros(3)}, st0, lr=1e-2)
    np.testing.assert_array_equal(r.tensors["x"], p.tensors["x"])
    np.testing.assert_array_equal(p.tensors["x"], [0.5, -2.0, 1.0])  # input untouched


def test_adam_matches_reference_on_quadratic():
    A = np.diag([1.0, 4.0, 0.25])
    x0 = np.array([1.0, -1.0, 2.0])
    ref = adam_reference(x0, lambda x: A @ x, lr=0.1, steps=10)
    p = scalar_params(x0)
    st = AdamState(0, {"x": np.zeros(3)}, {"x": np.zeros(3)})
    for k in range(10):
        p, st = adam_step(p, {"x": A @ p.tensors["x"]}, st, lr=0.1)
        np.testing.assert_allclose(p.tensors["x"], ref[k], atol=1e-6)


def test_adam_rejects_nonfinite():
    p = scalar_params([1.0])
    with pytest.raises(FloatingPointError):
        adam_step(p, {"x": np.array([np.nan])}, AdamState(0, {"x": np.zeros(1)}, {"x": np.zeros(1)}), 1e-3)


@pytest.fixture(scope="module")
def scene16():
    return make_synthetic_scene("two-planes", n_views=9, resolution=16, seed=2)


def test_train_deterministic(scene16, tmp_path):
    cfg = tiny_cfg()
    train(scene16, cfg, checkpoint_path=tmp_path / "a.spnf", log_path=tmp_path / "a.jsonl")
    train(scene16, cfg, checkpoint_path=tmp_path / "b.spnf", log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.spnf").read_bytes() == (tmp_path / "b.spnf").read_bytes()
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()


def test_threads_match_sequential(scene16, tmp_path):
    train(scene16, tiny_cfg(deterministic=True), checkpoint_path=tmp_path / "a.spnf")
    train(scene16, tiny_cfg(deterministic=True, threads=3), checkpoint_path=tmp_path / "b.spnf")
    assert (tmp_path / "a.spnf").read_bytes() == (tmp_path / "b.spnf").read_bytes()


def test_baseline_logs_zero_regularizers(scene16):
    import json

    _, log = train(scene16, tiny_cfg(depth_loss="none"))
    assert len(log) == 4
    assert all(r["r_rank"] == 0 and r["r_conti"] == 0 for r in log)
    assert set(log[0]) == {"iter", "l_nerf", "r_rank", "r_conti", "lr"}
    json.dumps(log)
    _, log = train(scene16, tiny_cfg(weights=LossWeights(0, 0)))
    assert all(r["r_rank"] == 0 and r["r_conti"] == 0 for r in log)
    _, log = train(scene16, tiny_cfg())
    assert all(r["r_rank"] > 0 for r in log)


def test_log_every(scene16):
    _, log = train(scene16, tiny_cfg(iterations=7, log_every=3, depth_loss="none"))
    assert [r["iter"] for r in log] == [0, 3, 6]


def test_nan_aborts_with_iteration(scene16):
    p = init_field(0, SMALL_ARCH, SMALL_ENC)
    p.tensors["rgb.b"][:] = np.nan
    tr = Trainer(scene16, tiny_cfg(depth_loss="none"), params=p)
    with pytest.raises(TrainingDiverged) as exc:
        tr.run()
    assert exc.value.iteration == 0


def test_never_reads_test_views(scene16):
    import copy

    s = copy.copy(scene16)
    tr_cfg = tiny_cfg()
    trainer_ids = [1, 4, 7]
    test_ids = [v for v in range(9) if v not in trainer_ids]
    images = s.images.copy()
    images[test_ids] = np.nan
    s.images = images
    s.priors = [p if v in trainer_ids else None for v, p in enumerate(s.priors)]
    s.cameras = [c if v in trainer_ids else None for v, c in enumerate(s.cameras)]

    touched = set()

    class Spy(list):
        def __getitem__(self, i):
            touched.add(i)
            return list.__getitem__(self, i)

    s.cameras = Spy(s.cameras)
    params, log = train(s, tr_cfg, train_ids=trainer_ids)
    assert touched <= set(trainer_ids)
    assert all(np.isfinite(r["l_nerf"]) for r in log)
    assert all(np.isfinite(a).all() for a in params.tensors.values())


def float64_trainer(scene, **kw):
    # perturbed biases: with zero biases, rays whose hidden units all switch off put
    # later ReLUs exactly on their kink, where central differences see half a slope
    cfg = tiny_cfg(**kw)
    return Trainer(scene, cfg, params=small_params(5, jitter=0.1))


def test_distill_terms_add_only(scene16):
    # ranking-path gradient = baseline gradient + gradient of the two extra terms
    base = float64_trainer(scene16, depth_loss="none")
    full = float64_trainer(scene16)
    tb, gb = base.loss_and_grad(1)
    tf, gf = full.loss_and_grad(1)
    assert tb["l_nerf"] == tf["l_nerf"]

    recon, target, distill = full.sample_iteration(1)
    _, prior, pairs, nbrs, pix, rays = distill
    p = full.params
    out, cache = render_rays(p, rays.origins, rays.dirs, rays.t, rays.delta, keep_cache=True)
    d_map = np.full(256, np.nan)
    d_map[pix] = out.depth
    w, dc = full.cfg.weights, full.cfg.distill
    g_map = w.lambda_rank * ds.ranking_loss_grad(pairs, d_map, dc.margin_rank)
    g_map += w.gamma_conti * ds.continuity_loss_grad(nbrs, d_map, dc.margin_conti)
    extra = render_backward(p, cache, np.zeros((len(pix), 3)), g_map[pix])
    for k in gb:
        np.testing.assert_allclose(gf[k], gb[k] + extra[k], rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("depth_loss", ["ranking", "scaling"])
def test_end_to_end_gradient(scene16, depth_loss):
    tr = float64_trainer(scene16, depth_loss=depth_loss, iterations=10)
    it = 2
    _, grads = tr.loss_and_grad(it)
    rng = np.random.default_rng(0)
    keys = list(tr.params.tensors)
    checked = 0
    h = FD_STEP
    while checked < 20:
        k = keys[rng.integers(len(keys))]
        arr = tr.params.tensors[k]
        idx = tuple(rng.integers(s) for s in arr.shape)
        old = arr[idx]

        def total_at(v):
            arr[idx] = v
            return tr.loss_and_grad(it)[0]["total"]

        f0, fp, fm = total_at(old), total_at(old + h), total_at(old - h)
        fp2, fm2 = total_at(old + h / 2), total_at(old - h / 2)
        arr[idx] = old
        fd = (fp - fm) / (2 * h)
        fd_half = (fp2 - fm2) / h
        # a kink inside [old - h, old + h] shows up as step-size dependence
        if abs(fd - fd_half) > 1e-4 * max(abs(fd), 1e-6):
            continue
        assert rel_err(grads[k][idx], fd, floor=1e-7) < 1e-3, (k, idx, grads[k][idx], fd)
        checked += 1


@pytest.mark.slow
def test_bringup_loss_drops(tmp_path):
    scene = make_synthetic_scene("two-planes", n_views=9, resolution=64, seed=0)
    cfg = TrainConfig(iterations=2000, batch_rays=256, n_samples=32, seed=1, depth_loss="none", log_every=50)
    _, log = train(scene, cfg)
    first = log[0]["l_nerf"]
    last = np.mean([r["l_nerf"] for r in log[-4:]])
    assert last * 10 <= first, (first, last)
