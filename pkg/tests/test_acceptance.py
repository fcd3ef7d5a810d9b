"""Acceptance criteria, one test per criterion.

Each test appends a PASS/FAIL line to the terminal summary. Criteria 6 and 7
train nine fields and take the better part of an hour on one core; the runs
are cached per session and shared between the two tests.
"""

import json
import math
import os
import time
from types import SimpleNamespace

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from oracles import affine_grid_search, knn_loop, ranking_loss_loop
from test_distill import hinge_gradient_check
from test_field import field_gradient_check
from test_renderer import composite_gradient_check
from test_training import reconstruction_gradient_check

from spnf.cli import run as cli_run
from spnf.distill import DistillConfig, continuity_loss, knn_neighbors, ranking_loss, sample_pairs
from spnf.metrics import scale_invariant_depth_error
from spnf.renderer import composite_batch, stratified_t
from spnf.training import LossWeights, total_loss


def record(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def test_1_compositing_identity():
    rng = np.random.default_rng(1)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(1000):
        n = int(rng.integers(2, 129))
        near = float(rng.uniform(0.05, 2.0))
        t, delta = stratified_t(near, near + float(rng.uniform(0.5, 8.0)), n, rng.random((1, n)))
        # mix empty space, thin haze and hard surfaces
        sigma = (rng.exponential(rng.choice([0.01, 1.0, 50.0]), n) * (rng.random(n) < 0.7))[None]
        sigma, t, delta = sigma.astype(np.float32), t.astype(np.float32), delta.astype(np.float32)
        rgb = rng.random((1, n, 3), dtype=np.float32)
        out, _ = composite_batch(t, delta, sigma, rgb)
        expect = 1.0 - math.exp(-float(np.sum(sigma.astype(np.float64) * delta)))
        worst = max(worst, abs(float(out.opacity[0]) - expect))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 1.0
    assert record(1, ok, f"max |sum w - (1 - exp(-sum sigma delta))| = {worst:.2e} (< 1e-6, float32), {elapsed:.2f} s (< 1 s)")


def test_2_gradient_suite():
    t0 = time.perf_counter()
    errs = {"field_backward": [], "composite": [], "ranking_loss": [], "continuity_loss": [], "reconstruction_loss": []}
    for seed in range(100):
        errs["field_backward"].append(field_gradient_check(seed))
        errs["composite"].append(composite_gradient_check(seed))
        r, c = hinge_gradient_check(seed)
        errs["ranking_loss"].append(r)
        errs["continuity_loss"].append(c)
        errs["reconstruction_loss"].append(reconstruction_gradient_check(seed))
    elapsed = time.perf_counter() - t0
    passed = {k: sum(e < 1e-4 for e in v) for k, v in errs.items()}
    ok = all(p == 100 for p in passed.values()) and elapsed < 30
    detail = ", ".join(f"{k} {passed[k]}/100 (max {max(errs[k]):.1e})" for k in errs)
    assert record(2, ok, f"{detail}; {elapsed:.1f} s (< 30 s)")


def _prior_like(values, mask):
    # duck-typed prior so transformed values may leave [0, 1]
    return SimpleNamespace(values=values, mask=mask)


def test_3_distillation_semantics():
    rng = np.random.default_rng(3)
    cfg = DistillConfig(patch_size=8, pairs_per_patch=64, patches_per_iter=1, knn_k=4, knn_region=6)
    m = 2.0**-13  # dyadic margin keeps every hinge sum exact in float64
    rank_exact = knn_exact = knn_value_exact = invariant = 0
    for i in range(100):
        vals = np.round(rng.random((8, 8)) * 256) / 256
        mask = rng.random((8, 8)) < rng.uniform(0.5, 1.0)
        mask.flat[rng.choice(64, 2, replace=False)] = True
        d_r = np.round(rng.random(64) * 1024) / 1024
        pairs = sample_pairs(_prior_like(vals, mask), cfg, np.random.default_rng(i))
        rank_exact += ranking_loss(pairs, d_r, m) == ranking_loss_loop(pairs.k1, pairs.k2, d_r, m)

        anchors = np.flatnonzero(mask)
        nb = knn_neighbors(_prior_like(vals, mask), anchors, cfg)
        knn_exact += all(got.tolist() == knn_loop(vals, mask, a, 4, 6, "rank") for a, got in zip(anchors, nb.k2))
        cfg_v = DistillConfig(patch_size=8, knn_k=4, knn_region=6, knn_metric="value")
        nb_v = knn_neighbors(_prior_like(vals, mask), anchors, cfg_v)
        knn_value_exact += all(got.tolist() == knn_loop(vals, mask, a, 4, 6, "value") for a, got in zip(anchors, nb_v.k2))

        base_r = ranking_loss(pairs, d_r, 1e-4)
        knn_anchors = np.unique(pairs.k1)
        base_c = continuity_loss(knn_neighbors(_prior_like(vals, mask), knn_anchors, cfg), d_r, 1e-4)
        ok_all = True
        for g in (np.square, np.exp, lambda x: 3 * x + 1):
            gv = g(vals)
            p2 = sample_pairs(_prior_like(gv, mask), cfg, np.random.default_rng(i))
            nb2 = knn_neighbors(_prior_like(gv, mask), np.unique(p2.k1), cfg)
            ok_all &= np.array_equal(p2.k1, pairs.k1) and np.array_equal(p2.k2, pairs.k2)
            ok_all &= ranking_loss(p2, d_r, 1e-4) == base_r and continuity_loss(nb2, d_r, 1e-4) == base_c
        invariant += ok_all
    ok = rank_exact == knn_exact == invariant == 100
    assert record(
        3, ok,
        f"ranking_loss exact {rank_exact}/100, knn exact {knn_exact}/100 (rank gap; |value gap| oracle "
        f"{knn_value_exact}/100), invariance under x^2, e^x, 3x+1 {invariant}/100",
    )


def test_4_metric_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(20, 200))
        x = rng.normal(size=n) * rng.uniform(0.1, 5)
        y = rng.uniform(-2, 2) * x + rng.normal(size=n) * rng.uniform(0.01, 2) + rng.uniform(-3, 3)
        rep = scale_invariant_depth_error(x, y)
        worst = max(worst, abs(rep.error - affine_grid_search(x, y)[2]))
    d = rng.random(100) + 0.5
    ident = scale_invariant_depth_error(d, d)
    aff = scale_invariant_depth_error(2 * d + 3, d)
    d_hat = rng.random(100)
    inv = abs(scale_invariant_depth_error(-7.5 * d_hat + 11.0, d).error - scale_invariant_depth_error(d_hat, d).error)
    exact = max(abs(ident.w - 1), abs(ident.b), ident.error, abs(aff.w - 0.5), abs(aff.b + 1.5), aff.error, inv)
    ok = worst < 1e-3 and exact < 1e-9
    assert record(4, ok, f"grid-search gap {worst:.1e} (< 1e-3, 50 instances); identity/affine examples {exact:.1e} (< 1e-9)")


def test_5_loss_arithmetic():
    got = total_loss(0.01, 0.1, 0.2, LossWeights(0.2, 0.02))
    assert record(5, got == 0.034, f"total_loss(0.01, 0.1, 0.2; lambda=0.2, gamma=0.02) = {got!r} (expect 0.034)")


# ---------------------------------------------------------------------------
# paired training runs for criteria 6 and 7

SCENE_ARGS = ["--preset", "two-planes", "--views", "9", "--res", "64", "--seed", "0"]
SEEDS = (1, 2, 3)
# desk-scale training budget; see the README "Acceptance" section
RUN_FLAGS = ["--views", "3", "--iters", "3000", "--batch-rays", "256", "--samples", "32",
             "--patches-per-iter", "1", "--pairs-per-patch", "64"]


@pytest.fixture(scope="session")
def paired_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    scene = root / "scene"
    assert cli_run(["synth", *SCENE_ARGS, "--out", str(scene)]) == 0
    results = {}
    for loss in ("none", "ranking", "scaling"):
        for seed in SEEDS:
            ckpt = root / f"{loss}_{seed}.spnf"
            t0 = time.perf_counter()
            assert cli_run(["train", "--scene", str(scene), "--depth-loss", loss, "--seed", str(seed),
                            *RUN_FLAGS, "--out", str(ckpt), "--log", str(root / f"{loss}_{seed}.jsonl")]) == 0
            elapsed = time.perf_counter() - t0
            rep_path = root / f"{loss}_{seed}.json"
            assert cli_run(["eval", "--ckpt", str(ckpt), "--scene", str(scene), "--views", "test",
                            "--out", str(rep_path)]) == 0
            mean = json.loads(rep_path.read_text())["mean"]
            results[(loss, seed)] = {"depth_error": mean["depth_error"], "psnr": mean["psnr"], "seconds": elapsed}
    (root / "summary.json").write_text(json.dumps({f"{k[0]}_{k[1]}": v for k, v in results.items()}, indent=2))
    return results


@pytest.mark.slow
def test_6_ranking_ablation(paired_runs):
    base = [paired_runs[("none", s)] for s in SEEDS]
    rank = [paired_runs[("ranking", s)] for s in SEEDS]
    lower_every = all(r["depth_error"] < b["depth_error"] for r, b in zip(rank, base))
    mean_b = np.mean([b["depth_error"] for b in base])
    mean_r = np.mean([r["depth_error"] for r in rank])
    reduction = 1 - mean_r / mean_b
    psnr_b = np.mean([b["psnr"] for b in base])
    psnr_r = np.mean([r["psnr"] for r in rank])
    times = [r["seconds"] for r in base + rank]
    # runs are independent and single-threaded: four workers finish in ceil(6/4) rounds
    four_core = math.ceil(len(times) / 4) * max(times)
    ok = lower_every and reduction >= 0.30 and psnr_r >= psnr_b - 0.1 and four_core < 15 * 60
    per_seed = ", ".join(f"seed {s}: {r['depth_error']:.4f} vs {b['depth_error']:.4f}" for s, r, b in zip(SEEDS, rank, base))
    assert record(
        6, ok,
        f"depth error ranking vs none ({per_seed}); mean reduction {reduction:.1%} (>= 30%); "
        f"PSNR {psnr_r:.2f} vs {psnr_b:.2f} dB (>= -0.1); "
        f"4-worker wall time {four_core / 60:.1f} min (< 15), serial {sum(times) / 60:.1f} min on {os.cpu_count()} core(s)",
    )


@pytest.mark.slow
def test_7_ranking_vs_scaling(paired_runs):
    wins = [paired_runs[("ranking", s)]["depth_error"] <= paired_runs[("scaling", s)]["depth_error"] for s in SEEDS]
    per_seed = ", ".join(
        f"seed {s}: {paired_runs[('ranking', s)]['depth_error']:.4f} vs {paired_runs[('scaling', s)]['depth_error']:.4f}"
        for s in SEEDS
    )
    assert record(7, sum(wins) >= 2, f"ranking <= scaling depth error in {sum(wins)}/3 seeds ({per_seed})")


def test_8_cli_determinism(tmp_path):
    scene = tmp_path / "scene"
    assert cli_run(["synth", *SCENE_ARGS, "--out", str(scene)]) == 0
    flags = ["--views", "3", "--iters", "60", "--batch-rays", "256", "--samples", "32", "--seed", "5",
             "--patches-per-iter", "1", "--pairs-per-patch", "64", "--deterministic"]
    blobs = {}
    for tag, threads in (("1a", "1"), ("1b", "1"), ("4a", "4"), ("4b", "4")):
        ckpt = tmp_path / f"{tag}.spnf"
        assert cli_run(["train", "--scene", str(scene), *flags, "--threads", threads, "--out", str(ckpt)]) == 0
        blobs[tag] = ckpt.read_bytes()
    same_1 = blobs["1a"] == blobs["1b"]
    same_4 = blobs["4a"] == blobs["4b"]
    cross = blobs["1a"] == blobs["4a"]
    assert record(8, same_1 and same_4 and cross,
                  f"byte-identical checkpoints: threads 1 {same_1}, threads 4 {same_4}, threads 1 vs 4 {cross}")
