"""Image-quality metrics and mixture diagnostics.

PSNR/SSIM score rendered views against ground truth; the diagnostics
probe the routing itself: per-expert utilization histograms, density
continuity along line segments at shrinking step sizes, and per-expert
decomposition renders that composite only the samples each expert won.
All functions here are pure over their inputs.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .field import (
    GatedMoeModel,
    compute_logits,
    gate_indices,
    gated_forward_cached,
    map_shape_code,
    map_texture_code,
    moe_densities,
    moe_forward_cached,
    sample_gumbel,
    select_expert,
)
from .rendering import full_image_rays, sample_depths
from . import kernels

PSNR_CAP_DB = 99.0


def psnr(image_a, image_b):
    """10*log10(1/MSE) over all pixels/channels, capped at 99 dB."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = np.mean((a - b) ** 2)
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _gaussian_window():
    radius = _SSIM_WINDOW // 2
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(coords ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(image_a, image_b):
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).

    Color images are converted to grayscale by channel mean; dynamic
    range is 1. Local statistics use population (not sample) variance,
    computed on the valid interior so no boundary padding is involved.
    """
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    if a.ndim == 3:
        a = a.mean(axis=2)
        b = b.mean(axis=2)
    if min(a.shape) < _SSIM_WINDOW:
        raise ValueError(f"image smaller than the {_SSIM_WINDOW}px SSIM window")
    win = _gaussian_window()
    mu_a = convolve2d(a, win, mode="valid")
    mu_b = convolve2d(b, win, mode="valid")
    var_a = convolve2d(a * a, win, mode="valid") - mu_a ** 2
    var_b = convolve2d(b * b, win, mode="valid") - mu_b ** 2
    cov = convolve2d(a * b, win, mode="valid") - mu_a * mu_b
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# Expert utilization
# ---------------------------------------------------------------------------

@dataclass
class UtilizationHistogram:
    counts: np.ndarray
    frequencies: np.ndarray
    entropy: float   # nats, in [0, log N]


def _entropy(frequencies):
    nz = frequencies[frequencies > 0]
    return float(-(nz * np.log(nz)).sum())


def expert_utilization(model, code, points, tau, mode="stochastic", rng=None):
    """Tally which expert wins at each probe point."""
    points = np.atleast_2d(points)
    if points.shape[0] == 0:
        raise ValueError("empty probe set")
    if isinstance(model, GatedMoeModel):
        indices = gate_indices(points, code, model)
    else:
        _, sigmas = moe_densities(points, code, model)
        logits = compute_logits(sigmas, tau)
        if mode == "stochastic":
            if rng is None:
                raise ValueError("stochastic utilization needs an rng")
            noise = sample_gumbel(rng, sigmas.shape, dtype=sigmas.dtype)
            indices = select_expert(logits, noise).indices
        else:
            indices = select_expert(logits).indices
    counts = np.bincount(indices, minlength=model.config.n_experts)
    freq = counts / counts.sum()
    return UtilizationHistogram(counts, freq, _entropy(freq))


# ---------------------------------------------------------------------------
# Continuity probing
# ---------------------------------------------------------------------------

@dataclass
class ContinuityProbeReport:
    start: np.ndarray
    end: np.ndarray
    step_sizes: list
    max_jumps: list
    per_expert_max_jumps: list    # one (N,) array per step size, or None
    verdict: str

    def as_dict(self):
        return {
            "start": list(map(float, self.start)),
            "end": list(map(float, self.end)),
            "step_sizes": list(map(float, self.step_sizes)),
            "max_jumps": list(map(float, self.max_jumps)),
            "per_expert_max_jumps": None
            if self.per_expert_max_jumps is None
            else [list(map(float, j)) for j in self.per_expert_max_jumps],
            "verdict": self.verdict,
        }


def probe_continuity(density_fn, start, end, step_sizes, shrink_ratio=1.5,
                     zero_tol=1e-9):
    """Probe a density field along a segment at successively finer steps.

    density_fn(points (B,3)) -> sigma (B,) or (sigma, per-expert (B,N)).
    step_sizes must be decreasing, each roughly halving the previous.
    Verdict is "continuous-consistent" when the max adjacent jump shrinks
    by at least shrink_ratio per halving (or is below zero_tol), and
    "jump-detected" otherwise.
    """
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    steps = [float(s) for s in step_sizes]
    if len(steps) < 2:
        raise ValueError("need at least two step sizes")
    for prev, cur in zip(steps, steps[1:]):
        if not (0 < cur <= 0.6 * prev):
            raise ValueError("step sizes must decrease by roughly half")
    length = np.linalg.norm(end - start)
    if length <= 0:
        raise ValueError("degenerate segment")
    direction = (end - start) / length

    max_jumps, per_expert = [], []
    have_experts = True
    for s in steps:
        n_pts = int(np.floor(length / s)) + 1
        pts = start[None, :] + (np.arange(n_pts) * s)[:, None] * direction[None, :]
        out = density_fn(pts)
        if isinstance(out, tuple):
            sigma, expert_sigma = out
            per_expert.append(np.abs(np.diff(expert_sigma, axis=0)).max(axis=0))
        else:
            sigma = out
            have_experts = False
        max_jumps.append(float(np.abs(np.diff(sigma)).max()))

    consistent = all(
        nxt <= zero_tol or nxt * shrink_ratio <= prev
        for prev, nxt in zip(max_jumps, max_jumps[1:])
    )
    return ContinuityProbeReport(
        start, end, steps, max_jumps,
        per_expert if have_experts else None,
        "continuous-consistent" if consistent else "jump-detected",
    )


# ---------------------------------------------------------------------------
# Decomposition renders
# ---------------------------------------------------------------------------

@dataclass
class DecompositionResult:
    images: np.ndarray          # (N, H, W, 3)
    opacity: np.ndarray         # (H, W) full-render opacity mass
    expert_opacity: np.ndarray  # (N, H, W), sums to `opacity` per pixel
    foreground_share: np.ndarray  # fraction of foreground samples per expert


def render_decomposition(model, code, camera, config, near=0.5, far=3.5,
                         weight_threshold=1e-4):
    """Per-expert renders from only the samples each expert won.

    Selection is deterministic. Compositing weights come from the full
    render, so per-expert opacity masses partition the full opacity
    exactly; non-selected samples simply contribute nothing. Expert
    images keep the configured background for the unclaimed weight.
    """
    n = model.config.n_experts
    rays = full_image_rays(camera, near, far)
    t, delta = sample_depths(
        rays, dataclasses.replace(config, stratified=False)
    )
    k, p = t.shape
    bg = 1.0 if config.white_background else 0.0
    gated = isinstance(model, GatedMoeModel)
    expert_codes = map_shape_code(code.shape, model.mapper)
    tex = map_texture_code(code.texture)

    images = np.empty((n, k, 3), dtype=np.float32)
    opacity = np.empty(k, dtype=np.float32)
    expert_opacity = np.empty((n, k), dtype=np.float32)
    fg_counts = np.zeros(n, dtype=np.int64)

    rays_per_chunk = max(1, config.chunk_size // p)
    for start in range(0, k, rays_per_chunk):
        stop = min(start + rays_per_chunk, k)
        nr = stop - start
        pts = (
            rays.origins[start:stop, None, :]
            + t[start:stop, ..., None] * rays.dirs[start:stop, None, :]
        ).reshape(-1, 3)
        dirs = np.repeat(rays.dirs[start:stop], p, axis=0)
        if gated:
            sample, sel, _ = gated_forward_cached(
                pts, dirs, code.shape, expert_codes, tex, model
            )
        else:
            sample, sel, _ = moe_forward_cached(
                pts, dirs, expert_codes, tex, model, tau=1.0, gumbel=None
            )
        sigma = np.ascontiguousarray(
            sample.sigma.reshape(nr, p), dtype=np.float32
        )
        rgb = np.ascontiguousarray(
            sample.rgb.reshape(nr, p, 3), dtype=np.float32
        )
        dl = np.ascontiguousarray(delta[start:stop], dtype=np.float32)
        _, weights, _ = kernels.composite_forward(sigma, rgb, dl, bg)
        sel_idx = sel.indices.reshape(nr, p)
        opacity[start:stop] = weights.sum(axis=1)
        foreground = weights > weight_threshold
        for e in range(n):
            mask = (sel_idx == e).astype(np.float32)
            wm = weights * mask
            acc = wm.sum(axis=1)
            expert_opacity[e, start:stop] = acc
            images[e, start:stop] = np.einsum("rs,rsc->rc", wm, rgb)
            images[e, start:stop] += (bg * (1.0 - acc))[:, None]
            fg_counts[e] += int((foreground & (sel_idx == e)).sum())

    total_fg = max(1, int(fg_counts.sum()))
    h, w = camera.height, camera.width
    return DecompositionResult(
        np.clip(images.reshape(n, h, w, 3), 0.0, 1.0),
        opacity.reshape(h, w),
        expert_opacity.reshape(n, h, w),
        fg_counts / total_fg,
    )


# ---------------------------------------------------------------------------
# Held-out evaluation protocol
# ---------------------------------------------------------------------------

@dataclass
class ViewScore:
    instance_id: str
    view_index: int
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    scores: list
    per_instance: dict       # id -> (mean psnr, mean ssim, n views)
    mean_psnr: float
    mean_ssim: float
    n_views: int
    config_hash: str

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("instance_id,view,psnr,ssim\n")
            for s in self.scores:
                fh.write(f"{s.instance_id},{s.view_index},{s.psnr!r},{s.ssim!r}\n")
            for inst_id, (p, s, n) in sorted(self.per_instance.items()):
                fh.write(f"{inst_id},mean({n}),{p!r},{s!r}\n")
            fh.write(f"overall,mean({self.n_views}),{self.mean_psnr!r},"
                     f"{self.mean_ssim!r}\n")
            fh.write(f"# config_hash={self.config_hash}\n")


def config_hash(checkpoint):
    blob = json.dumps(
        {
            "kind": checkpoint.kind,
            "model": checkpoint.model_config.as_dict(),
            "train": checkpoint.train_config.as_dict(),
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def evaluate(checkpoint, dataset, split="test", input_views=1,
             tto_iterations=200, tto_lr=2e-2, seed=0, n_samples=None,
             render_chunk=16384):
    """Score held-out views after per-instance latent optimization.

    For unseen instances the first `input_views` views drive test-time
    optimization and the remaining views are scored; instances whose
    codes are already in the checkpoint are scored on all views without
    optimization. Rendering is deterministic (no selection noise).
    """
    from .rendering import RenderConfig, render_image
    from .training import optimize_latents
    from .field import field_evaluator

    kernels.tune_allocator()
    instances = dataset.test if split == "test" else dataset.train
    if not instances:
        raise ValueError(f"dataset has no {split!r} instances")
    cfg = RenderConfig(
        n_samples=n_samples or checkpoint.train_config.n_samples,
        stratified=False,
        white_background=checkpoint.train_config.white_background,
        chunk_size=render_chunk,
    )
    near, far = checkpoint.train_config.near, checkpoint.train_config.far

    scores = []
    per_instance = {}
    for inst in instances:
        if inst.instance_id in checkpoint.codes:
            code = checkpoint.codes[inst.instance_id]
            eval_views = list(range(len(inst.cameras)))
        else:
            if input_views >= len(inst.cameras):
                raise ValueError(
                    f"{inst.instance_id}: needs more views than the "
                    f"{input_views} reserved for optimization"
                )
            observed = [
                (inst.images[v], inst.cameras[v]) for v in range(input_views)
            ]
            code = optimize_latents(
                checkpoint, observed, iterations=tto_iterations, lr=tto_lr,
                seed=seed, instance_id=inst.instance_id,
            )
            eval_views = list(range(input_views, len(inst.cameras)))
        field_fn = field_evaluator(checkpoint.model, code)
        inst_scores = []
        for v in eval_views:
            rendered = render_image(field_fn, inst.cameras[v], cfg,
                                    near=near, far=far)
            score = ViewScore(
                inst.instance_id, v,
                psnr(rendered, inst.images[v]),
                ssim(rendered, inst.images[v]),
            )
            scores.append(score)
            inst_scores.append(score)
        per_instance[inst.instance_id] = (
            float(np.mean([s.psnr for s in inst_scores])),
            float(np.mean([s.ssim for s in inst_scores])),
            len(inst_scores),
        )
    return MetricReport(
        scores,
        per_instance,
        float(np.mean([s.psnr for s in scores])),
        float(np.mean([s.ssim for s in scores])),
        len(scores),
        config_hash(checkpoint),
    )
