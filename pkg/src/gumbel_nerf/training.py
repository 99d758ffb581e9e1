"""End-to-end optimization of the field, mapper, texture head and codes.

One training step samples a ray batch across instances, renders it with
stochastic expert selection at the scheduled temperature, and applies
AdamW to the model parameters and to the codes of the instances present
in the batch. The selection mask is held constant during backprop, so
each point's loss contribution reaches only its selected expert (plus
the shared texture head and mapper).

Test-time optimization reuses the same machinery with every model
parameter frozen: only the unseen instance's codes receive updates, at a
constant final temperature.

Exactly one training loop may own a checkpoint at a time; within a step
all mutation happens in the single-writer optimizer calls at the end.
"""

import dataclasses
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import checkpoint as ckpt_io
from . import kernels
from .field import (
    GatedMoeModel,
    GumbelNerfModel,
    InstanceCode,
    Mapper,
    ModelConfig,
    build_gated_model,
    build_model,
    encode_position,
    gated_backward,
    gated_forward_cached,
    init_code,
    map_shape_code,
    moe_backward,
    moe_forward_cached,
    sample_gumbel,
)
from .nn import AdamWState, LrSchedule, adamw_step, lr_at, zero_grads_like
from .rendering import full_image_rays


class TrainingDivergedError(RuntimeError):
    """Raised when the loss goes non-finite; carries step diagnostics."""


# ---------------------------------------------------------------------------
# Temperature schedule and loss
# ---------------------------------------------------------------------------

@dataclass
class TemperatureSchedule:
    """Cosine annealing from tau_max to tau_min over the first t_max_frac
    of training, constant tau_min afterwards."""

    tau_max: float = 10.0
    tau_min: float = 0.5
    t_max_frac: float = 0.2

    def __post_init__(self):
        if not (self.tau_max >= self.tau_min > 0):
            raise ValueError("need tau_max >= tau_min > 0")
        if not (0.0 <= self.t_max_frac <= 1.0):
            raise ValueError("t_max_frac must lie in [0, 1]")


def temperature_at(t, schedule):
    """Temperature at training fraction t in [0, 1]; continuous at the
    annealing/constant boundary and non-increasing."""
    if not (0.0 <= t <= 1.0):
        raise ValueError("t must lie in [0, 1]")
    if schedule.t_max_frac == 0.0 or t > schedule.t_max_frac:
        return schedule.tau_min
    half_range = 0.5 * (schedule.tau_max - schedule.tau_min)
    return float(
        schedule.tau_min
        + half_range * (1.0 + np.cos(np.pi * t / schedule.t_max_frac))
    )


def photometric_loss(rendered, target):
    """Mean over rays of the squared color error (summed over channels)."""
    rendered = np.asarray(rendered)
    target = np.asarray(target)
    if rendered.shape != target.shape:
        raise ValueError("rendered/target shape mismatch")
    if rendered.size == 0:
        raise ValueError("empty batch")
    diff = rendered - target
    return float((diff * diff).sum(axis=-1).mean())


# ---------------------------------------------------------------------------
# Configuration and checkpoint containers
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 10000
    batch_rays: int = 1024
    n_samples: int = 64
    seed: int = 0
    lr_model: float = 1.3e-3
    lr_codes: float = 1.3e-3
    lr_decay_factor: float = 0.1
    weight_decay: float = 1e-4
    schedule: TemperatureSchedule = dc_field(default_factory=TemperatureSchedule)
    baseline: bool = False
    balance_weight: float = 0.01
    selection_mode: str = "stochastic"
    white_background: bool = True
    stratified: bool = True
    near: float = 0.5
    far: float = 3.5
    crop_frac: float = 1.0
    crop_iters_frac: float = 0.0
    log_every: int = 100
    metrics_path: str = None

    def __post_init__(self):
        if self.batch_rays < 1:
            raise ValueError("batch size must be >= 1")

    def as_dict(self):
        out = dataclasses.asdict(self)
        out["schedule"] = dataclasses.asdict(self.schedule)
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["schedule"] = TemperatureSchedule(**d["schedule"])
        return cls(**d)


@dataclass
class Checkpoint:
    """A trained model plus instance codes, optimizer state and config."""

    model: GumbelNerfModel
    codes: dict
    model_opt: AdamWState
    code_opts: dict
    iteration: int
    train_config: TrainConfig
    model_config: ModelConfig

    @property
    def kind(self):
        return "gated" if isinstance(self.model, GatedMoeModel) else "gumbel"

    def save(self, path):
        header = {
            "kind": self.kind,
            "iteration": self.iteration,
            "model_config": self.model_config.as_dict(),
            "train_config": self.train_config.as_dict(),
            "instance_ids": sorted(self.codes),
        }
        arrays = {}
        for name, p in self.model.named_params().items():
            arrays[f"param/{name}"] = p
        for inst_id, code in self.codes.items():
            arrays[f"code/{inst_id}/shape"] = code.shape
            arrays[f"code/{inst_id}/texture"] = code.texture
        _save_opt(arrays, "opt/model", self.model_opt)
        for inst_id, opt in self.code_opts.items():
            _save_opt(arrays, f"opt/code/{inst_id}", opt)
        ckpt_io.save_arrays(path, header, arrays)

    @classmethod
    def load(cls, path):
        header, arrays = ckpt_io.load_arrays(path)
        model_config = ModelConfig(**header["model_config"])
        train_config = TrainConfig.from_dict(header["train_config"])
        rng = np.random.default_rng(0)
        if header["kind"] == "gated":
            model = build_gated_model(model_config, rng)
        else:
            model = build_model(model_config, rng)
        params = model.named_params()
        for name, p in params.items():
            loaded = arrays[f"param/{name}"]
            if loaded.shape != p.shape:
                raise ValueError(f"checkpoint tensor {name!r} has wrong shape")
            p[...] = loaded
        codes, code_opts = {}, {}
        for inst_id in header["instance_ids"]:
            codes[inst_id] = InstanceCode(
                arrays[f"code/{inst_id}/shape"].copy(),
                arrays[f"code/{inst_id}/texture"].copy(),
                inst_id,
            )
            code_opts[inst_id] = _load_opt(
                arrays, f"opt/code/{inst_id}", codes[inst_id].named("code"),
                train_config.lr_codes, train_config.weight_decay,
            )
        model_opt = _load_opt(
            arrays, "opt/model", params,
            train_config.lr_model, train_config.weight_decay,
        )
        return cls(
            model, codes, model_opt, code_opts,
            int(header["iteration"]), train_config, model_config,
        )

    def mean_code(self, instance_id="unseen"):
        """Initialization for an unseen instance: mean of trained codes."""
        shapes = np.stack([c.shape for c in self.codes.values()])
        textures = np.stack([c.texture for c in self.codes.values()])
        return InstanceCode(
            shapes.mean(axis=0), textures.mean(axis=0), instance_id
        )


def _save_opt(arrays, prefix, opt):
    arrays[f"{prefix}/step"] = np.asarray(opt.step, dtype=np.int64)
    for name, m in opt.m.items():
        arrays[f"{prefix}/m/{name}"] = m
        arrays[f"{prefix}/v/{name}"] = opt.v[name]


def _load_opt(arrays, prefix, params, lr, weight_decay):
    opt = AdamWState(lr=lr, weight_decay=weight_decay)
    opt.step = int(arrays[f"{prefix}/step"].ravel()[0])
    for name in params:
        mkey = f"{prefix}/m/{name}"
        if mkey in arrays:
            opt.m[name] = arrays[mkey].copy()
            opt.v[name] = arrays[f"{prefix}/v/{name}"].copy()
    return opt


# ---------------------------------------------------------------------------
# One rendered ray batch, forward and backward
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    loss: float
    aux_loss: float
    pixels: np.ndarray
    model_grads: dict
    code_grads: dict          # instance index -> (d_shape, d_texture)
    sel_counts: np.ndarray


def render_batch(model, codes, ray_inst, origins, dirs, tvals, deltas, targets,
                 tau, gumbel=None, white_background=True, want_grads=True,
                 balance_weight=0.0):
    """Render a ray batch and, optionally, backprop the photometric loss.

    codes: list of InstanceCode; ray_inst (B,) indexes into it per ray.
    tvals/deltas: (B, P) precomputed depths and spacings; gumbel: noise
    of shape (B*P, n_experts) or None for deterministic selection. The
    same frozen (tvals, gumbel) make the loss a deterministic function
    of the parameters, which is what the finite-difference checks rely on.
    """
    dtype = model.dtype
    n_rays, n_samples = tvals.shape
    pts = (origins[:, None, :] + tvals[..., None] * dirs[:, None, :])
    pts = np.ascontiguousarray(pts.reshape(-1, 3), dtype=dtype)
    inst_pts = np.repeat(ray_inst, n_samples)
    # all samples of a ray share its direction: encode once per ray
    enc_dirs = np.repeat(
        encode_position(
            np.ascontiguousarray(dirs, dtype=dtype), model.config.dir_freqs
        ),
        n_samples, axis=0,
    )

    mapped = np.stack([map_shape_code(c.shape, model.mapper) for c in codes])
    expert_codes = mapped[inst_pts].astype(dtype, copy=False)
    tex = np.stack([c.texture for c in codes])[inst_pts].astype(dtype, copy=False)
    shape_pts = np.stack([c.shape for c in codes])[inst_pts].astype(dtype, copy=False)

    gated = isinstance(model, GatedMoeModel)
    if gated:
        sample, sel, cache = gated_forward_cached(
            pts, None, shape_pts, expert_codes, tex, model,
            want_cache=want_grads, enc_dirs=enc_dirs,
        )
    else:
        sample, sel, cache = moe_forward_cached(
            pts, None, expert_codes, tex, model, tau,
            gumbel=gumbel, want_cache=want_grads, enc_dirs=enc_dirs,
        )

    sigma = np.ascontiguousarray(sample.sigma.reshape(n_rays, n_samples))
    rgb = np.ascontiguousarray(sample.rgb.reshape(n_rays, n_samples, 3))
    bg = 1.0 if white_background else 0.0
    deltas = np.ascontiguousarray(deltas, dtype=dtype)
    pixels, weights, trans = kernels.composite_forward(sigma, rgb, deltas, bg)
    targets = targets.astype(dtype, copy=False)
    loss = photometric_loss(pixels, targets)
    sel_counts = np.bincount(sel.indices, minlength=model.config.n_experts)

    aux = 0.0
    frac = prob_mean = None
    if gated and balance_weight > 0.0:
        probs = cache.gate_probs if want_grads else None
        if probs is None:
            raise ValueError("balance loss requires want_grads=True")
        frac = sel_counts.astype(np.float64) / sel.indices.shape[0]
        prob_mean = probs.mean(axis=0)
        aux = float(
            balance_weight * model.config.n_experts * (frac * prob_mean).sum()
        )

    if not want_grads:
        return StepResult(loss, aux, pixels, None, None, sel_counts)

    dpixels = (2.0 / n_rays) * (pixels - targets)
    dsigma, drgb = kernels.composite_backward(
        sigma, rgb, deltas, trans, weights, bg, dpixels
    )
    dsigma_flat = dsigma.reshape(-1)
    drgb_flat = drgb.reshape(-1, 3)

    if gated:
        dlogits_extra = None
        if balance_weight > 0.0:
            coeff = balance_weight * model.config.n_experts / sel.indices.shape[0]
            probs = cache.gate_probs
            f_arr = frac.astype(dtype)
            dlogits_extra = coeff * probs * (
                f_arr[None, :] - (probs @ f_arr)[:, None]
            )
        model_grads, d_shape_pts, d_expert_codes, d_tex = gated_backward(
            model, cache, drgb_flat, dsigma_flat, dlogits_extra=dlogits_extra
        )
    else:
        model_grads, d_expert_codes, d_tex = moe_backward(
            model, cache, drgb_flat, dsigma_flat
        )
        d_shape_pts = None

    code_grads = {}
    for u in np.unique(ray_inst):
        rows = np.nonzero(inst_pts == u)[0]
        d_mapped = d_expert_codes[rows].sum(axis=0)          # (N, d')
        z_shape = codes[u].shape.astype(dtype, copy=False)
        model_grads["mapper/w"] += d_mapped[:, :, None] * z_shape[None, None, :]
        model_grads["mapper/b"] += d_mapped
        d_shape = np.einsum("nij,ni->j", model.mapper.weights, d_mapped)
        if d_shape_pts is not None:
            d_shape = d_shape + d_shape_pts[rows].sum(axis=0)
        d_texture = d_tex[rows].sum(axis=0)
        code_grads[int(u)] = (d_shape.astype(dtype), d_texture)

    return StepResult(loss + aux, aux, pixels, model_grads, code_grads, sel_counts)


# ---------------------------------------------------------------------------
# Ray pools
# ---------------------------------------------------------------------------

@dataclass
class RayPool:
    """All training rays flattened, with per-ray instance and target color."""

    origins: np.ndarray
    dirs: np.ndarray
    targets: np.ndarray
    ray_inst: np.ndarray
    crop_index: np.ndarray   # subset of ray indices inside the center crop


def build_ray_pool(instances, intrinsics, near, far, crop_frac=1.0):
    """Precompute rays/targets for a list of dataset instances."""
    origins, dirs, targets, inst_idx, crop_sel = [], [], [], [], []
    focal, cx, cy, width, height = intrinsics
    margin_x = 0.5 * (1.0 - crop_frac) * width
    margin_y = 0.5 * (1.0 - crop_frac) * height
    jj, ii = np.mgrid[0:height, 0:width]
    in_crop = (
        (ii + 0.5 >= margin_x) & (ii + 0.5 <= width - margin_x)
        & (jj + 0.5 >= margin_y) & (jj + 0.5 <= height - margin_y)
    ).ravel()
    offset = 0
    for u, inst in enumerate(instances):
        for image, camera in zip(inst.images, inst.cameras):
            rays = full_image_rays(camera, near, far)
            origins.append(rays.origins.astype(np.float32))
            dirs.append(rays.dirs.astype(np.float32))
            targets.append(image.reshape(-1, 3).astype(np.float32))
            inst_idx.append(np.full(len(rays), u, dtype=np.int32))
            crop_sel.append(in_crop)
            offset += len(rays)
    crop_mask = np.concatenate(crop_sel)
    return RayPool(
        np.concatenate(origins),
        np.concatenate(dirs),
        np.concatenate(targets),
        np.concatenate(inst_idx),
        np.nonzero(crop_mask)[0],
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train(dataset, config, model_config=None):
    """Train on the dataset's train split; returns a Checkpoint.

    Deterministic for a fixed config: two runs with the same seed produce
    bit-identical parameters. Raises TrainingDivergedError on a
    non-finite loss.
    """
    if model_config is None:
        model_config = ModelConfig()
    instances = dataset.train
    if not instances:
        raise ValueError("dataset has no training instances")
    kernels.tune_allocator()

    seq = np.random.SeedSequence(config.seed)
    init_seq, loop_seq = seq.spawn(2)
    init_rng = np.random.default_rng(init_seq)
    loop_rng = np.random.default_rng(loop_seq)

    if config.baseline:
        model = build_gated_model(model_config, init_rng)
    else:
        model = build_model(model_config, init_rng)
    codes = [
        init_code(model_config, init_rng, inst.instance_id)
        for inst in instances
    ]

    pool = build_ray_pool(
        dataset.train, dataset.intrinsics, config.near, config.far,
        crop_frac=config.crop_frac,
    )
    n_pool = pool.origins.shape[0]
    crop_until = int(config.crop_iters_frac * config.iterations)

    params = model.named_params()
    model_opt = AdamWState(lr=config.lr_model, weight_decay=config.weight_decay)
    code_opts = [
        AdamWState(lr=config.lr_codes, weight_decay=config.weight_decay)
        for _ in codes
    ]
    model_sched = LrSchedule(
        config.lr_model, config.iterations, factor=config.lr_decay_factor
    )
    code_sched = LrSchedule(
        config.lr_codes, config.iterations, factor=config.lr_decay_factor
    )

    metrics_fh = None
    n_experts = model_config.n_experts
    if config.metrics_path:
        os.makedirs(os.path.dirname(config.metrics_path) or ".", exist_ok=True)
        metrics_fh = open(config.metrics_path, "a")
        if metrics_fh.tell() == 0:
            util_cols = ",".join(f"util_{k}" for k in range(n_experts))
            metrics_fh.write(f"iteration,loss,tau,{util_cols},lr\n")
    util_window = np.zeros(n_experts, dtype=np.int64)

    n_samples = config.n_samples
    stochastic = config.selection_mode == "stochastic"
    try:
        for step in range(config.iterations):
            frac = step / config.iterations if config.iterations else 0.0
            tau = temperature_at(frac, config.schedule)
            model_opt.lr = lr_at(step, model_sched)
            code_lr = lr_at(step, code_sched)

            if step < crop_until and pool.crop_index.size:
                picks = pool.crop_index[
                    loop_rng.integers(0, pool.crop_index.size, config.batch_rays)
                ]
            else:
                picks = loop_rng.integers(0, n_pool, config.batch_rays)
            origins = pool.origins[picks]
            dirs = pool.dirs[picks]
            targets = pool.targets[picks]
            ray_inst = pool.ray_inst[picks]

            span = config.far - config.near
            if config.stratified:
                offsets = loop_rng.random(
                    (config.batch_rays, n_samples), dtype=np.float32
                )
            else:
                offsets = np.full((config.batch_rays, n_samples), 0.5, np.float32)
            tvals = config.near + (np.arange(n_samples, dtype=np.float32) + offsets) \
                / n_samples * span
            deltas = np.empty_like(tvals)
            deltas[:, :-1] = np.diff(tvals, axis=1)
            deltas[:, -1] = 1e10

            gumbel = None
            if stochastic and not config.baseline:
                gumbel = sample_gumbel(
                    loop_rng, (config.batch_rays * n_samples, n_experts),
                    dtype=model.dtype,
                )

            result = render_batch(
                model, codes, ray_inst, origins, dirs, tvals, deltas, targets,
                tau, gumbel=gumbel, white_background=config.white_background,
                want_grads=True,
                balance_weight=config.balance_weight if config.baseline else 0.0,
            )
            if not np.isfinite(result.loss):
                raise TrainingDivergedError(
                    f"non-finite loss {result.loss} at iteration {step} "
                    f"(tau={tau:.4g}, lr={model_opt.lr:.4g})"
                )

            adamw_step(params, result.model_grads, model_opt)
            for u, (d_shape, d_texture) in result.code_grads.items():
                code_opts[u].lr = code_lr
                adamw_step(
                    codes[u].named("code"),
                    {"code/shape": d_shape, "code/texture": d_texture},
                    code_opts[u],
                )

            util_window += result.sel_counts
            if metrics_fh and (step % config.log_every == 0
                               or step == config.iterations - 1):
                total = max(1, int(util_window.sum()))
                util = ",".join(repr(float(c) / total) for c in util_window)
                metrics_fh.write(
                    f"{step},{result.loss!r},{tau!r},{util},"
                    f"{float(model_opt.lr)!r}\n"
                )
                util_window[:] = 0
    finally:
        if metrics_fh:
            metrics_fh.close()

    return Checkpoint(
        model,
        {c.instance_id: c for c in codes},
        model_opt,
        {c.instance_id: opt for c, opt in zip(codes, code_opts)},
        config.iterations,
        config,
        model_config,
    )


# ---------------------------------------------------------------------------
# Test-time latent optimization
# ---------------------------------------------------------------------------

def optimize_latents(checkpoint, views, iterations=200, lr=2e-2, seed=0,
                     batch_rays=None, n_samples=None, instance_id="unseen"):
    """Fit an unseen instance's codes against observed views.

    Every model parameter stays frozen (bit-identical before/after); only
    the new code moves, under exponentially decaying AdamW at the
    schedule's constant final temperature with stochastic selection.
    views: list of (image (H,W,3) in [0,1], Camera).
    """
    if not views:
        raise ValueError("need at least one observed view")
    kernels.tune_allocator()
    config = checkpoint.train_config
    model = checkpoint.model
    n_experts = checkpoint.model_config.n_experts
    batch_rays = batch_rays or config.batch_rays
    n_samples = n_samples or config.n_samples

    code = checkpoint.mean_code(instance_id)
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    origins, dirs, targets = [], [], []
    for image, camera in views:
        rays = full_image_rays(camera, config.near, config.far)
        origins.append(rays.origins.astype(np.float32))
        dirs.append(rays.dirs.astype(np.float32))
        targets.append(np.asarray(image).reshape(-1, 3).astype(np.float32))
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    targets = np.concatenate(targets)

    opt = AdamWState(lr=lr, weight_decay=config.weight_decay)
    sched = LrSchedule(lr, iterations, factor=config.lr_decay_factor)
    tau = config.schedule.tau_min
    span = config.far - config.near

    for step in range(iterations):
        opt.lr = lr_at(step, sched)
        picks = rng.integers(0, origins.shape[0], batch_rays)
        if config.stratified:
            offsets = rng.random((batch_rays, n_samples), dtype=np.float32)
        else:
            offsets = np.full((batch_rays, n_samples), 0.5, np.float32)
        tvals = config.near + (np.arange(n_samples, dtype=np.float32) + offsets) \
            / n_samples * span
        deltas = np.empty_like(tvals)
        deltas[:, :-1] = np.diff(tvals, axis=1)
        deltas[:, -1] = 1e10
        gumbel = None
        if not isinstance(model, GatedMoeModel):
            gumbel = sample_gumbel(
                rng, (batch_rays * n_samples, n_experts), dtype=model.dtype
            )
        result = render_batch(
            model, [code], np.zeros(batch_rays, dtype=np.int32),
            origins[picks], dirs[picks], tvals, deltas, targets[picks],
            tau, gumbel=gumbel, white_background=config.white_background,
            want_grads=True, balance_weight=0.0,
        )
        if not np.isfinite(result.loss):
            raise TrainingDivergedError(
                f"non-finite loss at test-time step {step}"
            )
        d_shape, d_texture = result.code_grads[0]
        adamw_step(
            code.named("code"),
            {"code/shape": d_shape, "code/texture": d_texture},
            opt,
        )
    return code
