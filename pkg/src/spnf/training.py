"""Full objective, Adam with exponential decay, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import distill as ds
from .cameras import pixel_rays
from .field import EncodingConfig, FieldArch, FieldParams, init_field, save_checkpoint
from .renderer import DEFAULT_SAMPLES, render_backward, render_rays, stratified_t
from .scene_io import Scene, select_views

log = logging.getLogger(__name__)

DEPTH_LOSSES = ("ranking", "scaling", "none")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, what: str):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class LossWeights:
    lambda_rank: float = 0.2
    gamma_conti: float = 0.02

    def __post_init__(self):
        if self.lambda_rank < 0 or self.gamma_conti < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    iterations: int = 3000
    batch_rays: int = 1024
    lr_start: float = 2e-3
    lr_end: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    distill: ds.DistillConfig = field(default_factory=ds.DistillConfig)
    depth_loss: str = "ranking"
    seed: int = 0
    k_train: int = 3
    n_samples: int = DEFAULT_SAMPLES
    arch: FieldArch = field(default_factory=FieldArch)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    log_every: int = 100
    checkpoint_every: int = 0
    chunk_rays: int = 256
    threads: int = 1
    deterministic: bool = False

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.iterations < 1 or self.batch_rays < 1:
            raise ValueError("iterations and batch_rays must be >= 1")
        if self.depth_loss not in DEPTH_LOSSES:
            raise ValueError(f"depth_loss must be one of {DEPTH_LOSSES}")
        if self.threads < 1 or self.chunk_rays < 1:
            raise ValueError("threads and chunk_rays must be >= 1")

    @property
    def uses_priors(self) -> bool:
        if self.depth_loss == "ranking":
            return self.weights.lambda_rank > 0 or self.weights.gamma_conti > 0
        if self.depth_loss == "scaling":
            return self.weights.lambda_rank > 0
        return False


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: FieldParams) -> "AdamState":
        return cls(0, {k: np.zeros_like(a) for k, a in params.tensors.items()},
                   {k: np.zeros_like(a) for k, a in params.tensors.items()})


def reconstruction_loss(rendered: np.ndarray, gt: np.ndarray) -> float:
    """Mean over rays of the squared color error summed over channels."""
    rendered = np.asarray(rendered)
    gt = np.asarray(gt)
    if rendered.shape != gt.shape:
        raise ValueError("rendered and ground-truth batches differ in shape")
    return float(np.mean(np.sum((rendered - gt) ** 2, axis=-1)))


def reconstruction_loss_grad(rendered: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return 2.0 * (rendered - gt) / rendered.shape[0]


def total_loss(l_nerf: float, r_rank: float, r_conti: float, w: LossWeights) -> float:
    return l_nerf + w.lambda_rank * r_rank + w.gamma_conti * r_conti


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Log-linear decay from lr_start at step 0 to lr_end at the last step."""
    frac = min(max(step / cfg.iterations, 0.0), 1.0)
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


def adam_step(params: FieldParams, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns new (params, state); inputs are left untouched."""
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {k}")
    step = state.step + 1
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.tensors.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        upd = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_p[k] = (p - upd).astype(p.dtype)
        new_m[k], new_v[k] = m.astype(p.dtype), v.astype(p.dtype)
    return FieldParams(params.arch, params.encoding, new_p), AdamState(step, new_m, new_v)


@dataclass
class _Batch:
    origins: np.ndarray
    dirs: np.ndarray
    t: np.ndarray
    delta: np.ndarray


def _rays_for(scene: Scene, view_ids, px, jitter, u, n):
    """Rays for per-ray (view, pixel) picks, preserving input order."""
    origins = np.empty((len(px), 3))
    dirs = np.empty((len(px), 3))
    near = np.empty(len(px))
    far = np.empty(len(px))
    for v in np.unique(view_ids):
        sel = view_ids == v
        cam = scene.cameras[v]
        o, d = pixel_rays(cam, px[sel], None if jitter is None else jitter[sel])
        origins[sel], dirs[sel] = o, d
        near[sel], far[sel] = cam.near, cam.far
    t, delta = stratified_t(near, far, n, u)
    return _Batch(origins, dirs, t, delta)


class Trainer:
    """Owns params, Adam moments and the per-iteration sampling for one training run."""

    def __init__(self, scene: Scene, cfg: TrainConfig, train_ids=None, params: FieldParams | None = None):
        self.scene = scene
        self.cfg = cfg
        if train_ids is None:
            train_ids, _ = select_views(scene.n_views, cfg.k_train)
        self.train_ids = list(train_ids)
        if cfg.uses_priors and scene.priors is None:
            raise ValueError("depth distillation requested but the scene has no priors")
        h, w = scene.hw
        # only training views are ever touched
        self.images = np.stack([scene.images[i] for i in self.train_ids])
        self.priors = (
            [ds.resample_prior(scene.priors[i], h, w) for i in self.train_ids] if cfg.uses_priors else None
        )
        self.params = params if params is not None else init_field(cfg.seed, cfg.arch, cfg.encoding)
        self.state = AdamState.zeros_like(self.params)
        self.iteration = 0
        self.log: list[dict] = []
        self._pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # -- sampling -----------------------------------------------------------

    def _iter_rng(self, it: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, it])

    def sample_iteration(self, it: int):
        """Rays, targets and distillation batches for iteration ``it`` (pure function of seed, it)."""
        cfg = self.cfg
        rng = self._iter_rng(it)
        h, w = self.scene.hw
        k = len(self.train_ids)
        B, N = cfg.batch_rays, cfg.n_samples
        local = rng.integers(k, size=B)
        ys = rng.integers(h, size=B)
        xs = rng.integers(w, size=B)
        jitter = rng.random((B, 2))
        u = rng.random((B, N))
        views = np.asarray(self.train_ids)[local]
        recon = _rays_for(self.scene, views, np.stack([xs, ys], -1), jitter, u, N)
        target = self.images[local, ys, xs]

        distill = None
        if cfg.uses_priors:
            j = int(rng.integers(k))
            prior = self.priors[j]
            pairs = ds.sample_pairs(prior, cfg.distill, rng, view=self.train_ids[j])
            nbrs = None
            pix = pairs.pixels()
            if cfg.depth_loss == "ranking" and cfg.weights.gamma_conti > 0:
                nbrs = ds.knn_neighbors(prior, np.unique(pairs.k1), cfg.distill, view=self.train_ids[j])
                pix = np.union1d(pix, nbrs.pixels())
            py, px_ = np.divmod(pix, w)
            u_d = rng.random((len(pix), N))
            rays = _rays_for(self.scene, np.full(len(pix), self.train_ids[j]), np.stack([px_, py], -1), None, u_d, N)
            distill = (j, prior, pairs, nbrs, pix, rays)
        return recon, target, distill

    # -- one step -----------------------------------------------------------

    def _map(self, fn, items):
        if self._pool is None:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    def loss_and_grad(self, it: int, params: FieldParams | None = None):
        """Loss terms and parameter gradient of the full objective at iteration ``it``."""
        cfg = self.cfg
        params = params if params is not None else self.params
        recon, target, distill = self.sample_iteration(it)
        B = len(target)
        parts = [recon]
        if distill is not None:
            parts.append(distill[5])
        allrays = _Batch(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("origins", "dirs", "t", "delta")))
        R = len(allrays.origins)
        bounds = [(s, min(s + cfg.chunk_rays, R)) for s in range(0, R, cfg.chunk_rays)]

        def fwd(b):
            s, e = b
            return render_rays(params, allrays.origins[s:e], allrays.dirs[s:e], allrays.t[s:e],
                               allrays.delta[s:e], keep_cache=True)

        results = self._map(fwd, bounds)
        color = np.concatenate([r[0].color for r in results])
        depth = np.concatenate([r[0].depth for r in results])

        dtype = params.dtype
        g_color = np.zeros((R, 3), dtype=dtype)
        g_depth = np.zeros(R, dtype=dtype)
        terms = {"l_nerf": 0.0, "r_rank": 0.0, "r_conti": 0.0}
        if B:
            terms["l_nerf"] = reconstruction_loss(color[:B], target)
            g_color[:B] = reconstruction_loss_grad(color[:B], target)
        if distill is not None:
            j, prior, pairs, nbrs, pix, _ = distill
            h, w = self.scene.hw
            d_map = np.full(h * w, np.nan, dtype=dtype)
            d_map[pix] = depth[B:]
            g_map = np.zeros(h * w, dtype=dtype)
            wts = cfg.weights
            if cfg.depth_loss == "ranking":
                if wts.lambda_rank > 0:
                    terms["r_rank"] = ds.ranking_loss(pairs, d_map, cfg.distill.margin_rank)
                    g_map += wts.lambda_rank * ds.ranking_loss_grad(pairs, d_map, cfg.distill.margin_rank)
                if nbrs is not None:
                    terms["r_conti"] = ds.continuity_loss(nbrs, d_map, cfg.distill.margin_conti)
                    g_map += wts.gamma_conti * ds.continuity_loss_grad(nbrs, d_map, cfg.distill.margin_conti)
            else:
                loss, g = ds.scaling_loss_and_grad(pairs, prior, d_map)
                terms["r_rank"] = loss
                g_map += wts.lambda_rank * g
            g_depth[B:] = g_map[pix]
        terms["total"] = total_loss(terms["l_nerf"], terms["r_rank"], terms["r_conti"], cfg.weights)
        for name, val in terms.items():
            if not math.isfinite(val):
                raise TrainingDiverged(it, name)

        def bwd(item):
            (s, e), res = item
            return render_backward(params, res[1], g_color[s:e], g_depth[s:e])

        chunk_grads = self._map(bwd, list(zip(bounds, results)))
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        for cg in chunk_grads:  # fixed chunk order keeps the reduction deterministic
            for k in grads:
                grads[k] += cg[k]
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise TrainingDiverged(it, f"gradient ({k})")
        return terms, grads

    def step(self) -> dict:
        it = self.iteration
        terms, grads = self.loss_and_grad(it)
        lr = lr_at(it, self.cfg)
        self.params, self.state = adam_step(self.params, grads, self.state, lr,
                                            self.cfg.beta1, self.cfg.beta2, self.cfg.eps)
        self.iteration += 1
        return {"iter": it, "l_nerf": terms["l_nerf"], "r_rank": terms["r_rank"],
                "r_conti": terms["r_conti"], "lr": lr}

    def run(self, checkpoint_path=None, log_path=None, progress=None):
        cfg = self.cfg
        limit = threadpool_limits(1) if (cfg.threads > 1 or cfg.deterministic) else nullcontext()
        with limit:
            try:
                while self.iteration < cfg.iterations:
                    rec = self.step()
                    it = rec["iter"]
                    if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                        self.log.append(rec)
                        log.info("iter %d l_nerf %.5f r_rank %.5f r_conti %.5f lr %.2e",
                                 it, rec["l_nerf"], rec["r_rank"], rec["r_conti"], rec["lr"])
                        if progress is not None:
                            progress(rec)
                    if checkpoint_path and cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0:
                        save_checkpoint(checkpoint_path, self.params, self.iteration, self._ckpt_extra())
            finally:
                self.close()
        if checkpoint_path:
            save_checkpoint(checkpoint_path, self.params, self.iteration, self._ckpt_extra())
        if log_path:
            from .io_utils import atomic_write_text

            atomic_write_text(log_path, "".join(json.dumps(r) + "\n" for r in self.log))
        return self.params, self.log

    def _ckpt_extra(self) -> dict:
        return {"train_ids": self.train_ids, "n_samples": self.cfg.n_samples, "seed": self.cfg.seed,
                "depth_loss": self.cfg.depth_loss}


def train(scene: Scene, cfg: TrainConfig, checkpoint_path=None, log_path=None, train_ids=None):
    """Train a field on ``scene``; returns (params, log records)."""
    return Trainer(scene, cfg, train_ids=train_ids).run(checkpoint_path, log_path)
