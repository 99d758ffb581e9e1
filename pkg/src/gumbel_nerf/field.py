"""Mixture-of-experts radiance field with density-based expert selection.

The field is a set of per-part expert MLPs conditioned on expert-specific
latent codes, a texture head shared across experts, and a linear mapper
that turns one instance-level shape code into per-expert codes. Expert
selection happens *after* all experts run: densities become logits via a
tempered log-softmax and one expert wins, either by plain argmax
(deterministic mode) or by argmax over logits plus standard Gumbel noise
(stochastic mode). The winning expert alone supplies the density and the
feature vector fed to the texture head, which keeps the deterministic
density field continuous (a max of continuous functions).

A foresight-gated baseline model is included for comparison: a gating
MLP picks the expert from position and shape code alone, before any
expert runs, scaling the winner's features by its softmax gate value.

Model parameters are read-only during field evaluation; any number of
evaluations may run concurrently against the same model.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .nn import (
    MlpParams,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    positional_encode,
    sigmoid,
    softplus,
    zero_grads_like,
)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    """Architecture knobs; the defaults are the desk-scale reference model."""

    n_experts: int = 4
    trunk_layers: int = 4
    hidden_width: int = 64
    feature_width: int = 64
    shape_code_dim: int = 32
    texture_code_dim: int = 32
    expert_code_dim: int = 16
    pos_freqs: int = 6
    dir_freqs: int = 4
    texture_layers: int = 2
    gate_layers: int = 3
    gate_hidden: int = 32
    sigma_floor: float = 1e-6

    @property
    def pos_enc_dim(self):
        return 3 + 6 * self.pos_freqs

    @property
    def dir_enc_dim(self):
        return 3 + 6 * self.dir_freqs

    def to_text(self):
        lines = ["# gumbel-nerf model config"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            kwargs[key] = float(value) if key == "sigma_floor" else int(value)
        return cls(**kwargs)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())

    def as_dict(self):
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass
class InstanceCode:
    """Optimizable per-instance latents: a shape code and a texture code."""

    shape: np.ndarray
    texture: np.ndarray
    instance_id: str = ""

    def validate(self):
        if not (np.isfinite(self.shape).all() and np.isfinite(self.texture).all()):
            raise ValueError(f"non-finite code for instance {self.instance_id!r}")

    def named(self, prefix):
        return {f"{prefix}/shape": self.shape, f"{prefix}/texture": self.texture}

    def copy(self):
        return InstanceCode(self.shape.copy(), self.texture.copy(), self.instance_id)


def init_code(config, rng, instance_id="", dtype=np.float32, std=0.01):
    """Small-normal init keeps early training near the mean shape."""
    return InstanceCode(
        (std * rng.standard_normal(config.shape_code_dim)).astype(dtype),
        (std * rng.standard_normal(config.texture_code_dim)).astype(dtype),
        instance_id,
    )


@dataclass
class Mapper:
    """N linear maps from the instance shape code to expert shape codes.

    The texture mapping is the identity and carries no parameters.
    """

    weights: np.ndarray  # (N, expert_code_dim, shape_code_dim)
    biases: np.ndarray   # (N, expert_code_dim)

    def named(self, prefix):
        return {f"{prefix}/w": self.weights, f"{prefix}/b": self.biases}

    def n_params(self):
        return self.weights.size + self.biases.size


@dataclass
class Expert:
    """One part expert: a trunk MLP emitting features plus a density head."""

    trunk: MlpParams
    sigma_head: MlpParams

    def named(self, prefix):
        out = self.trunk.named(f"{prefix}/trunk")
        out.update(self.sigma_head.named(f"{prefix}/sigma"))
        return out

    def n_params(self):
        return self.trunk.n_params() + self.sigma_head.n_params()


@dataclass
class GumbelNerfModel:
    config: ModelConfig
    experts: list
    texture_head: MlpParams
    mapper: Mapper

    @property
    def dtype(self):
        return self.texture_head.weights[0].dtype

    def named_params(self):
        out = {}
        for n, expert in enumerate(self.experts):
            out.update(expert.named(f"expert{n}"))
        out.update(self.texture_head.named("texture"))
        out.update(self.mapper.named("mapper"))
        return out

    def n_params(self):
        return sum(p.size for p in self.named_params().values())


@dataclass
class GatedMoeModel(GumbelNerfModel):
    """Foresight baseline: same experts plus a position-based gating MLP."""

    gate: MlpParams = None

    def named_params(self):
        out = super().named_params()
        out.update(self.gate.named("gate"))
        return out


def _build_shared(config, rng, dtype):
    trunk_in = config.pos_enc_dim + config.expert_code_dim
    trunk_widths = (
        [trunk_in]
        + [config.hidden_width] * (config.trunk_layers - 1)
        + [config.feature_width]
    )
    experts = []
    for _ in range(config.n_experts):
        trunk = init_mlp(trunk_widths, ["relu"] * config.trunk_layers, rng, dtype)
        sigma_head = init_mlp([config.feature_width, 1], ["identity"], rng, dtype)
        experts.append(Expert(trunk, sigma_head))
    head_in = config.feature_width + config.dir_enc_dim + config.texture_code_dim
    head_widths = [head_in] + [config.hidden_width] * config.texture_layers + [3]
    texture_head = init_mlp(
        head_widths, ["relu"] * config.texture_layers + ["sigmoid"], rng, dtype
    )
    bound = np.sqrt(6.0 / config.shape_code_dim)
    mapper = Mapper(
        rng.uniform(
            -bound, bound,
            (config.n_experts, config.expert_code_dim, config.shape_code_dim),
        ).astype(dtype),
        np.zeros((config.n_experts, config.expert_code_dim), dtype=dtype),
    )
    return experts, texture_head, mapper


def build_model(config, rng, dtype=np.float32):
    experts, texture_head, mapper = _build_shared(config, rng, dtype)
    return GumbelNerfModel(config, experts, texture_head, mapper)


def build_gated_model(config, rng, dtype=np.float32):
    experts, texture_head, mapper = _build_shared(config, rng, dtype)
    gate_in = config.pos_enc_dim + config.shape_code_dim
    widths = [gate_in] + [config.gate_hidden] * (config.gate_layers - 1)
    widths += [config.n_experts]
    gate = init_mlp(
        widths, ["relu"] * (config.gate_layers - 1) + ["identity"], rng, dtype
    )
    return GatedMoeModel(config, experts, texture_head, mapper, gate)


# ---------------------------------------------------------------------------
# Elementary field operations
# ---------------------------------------------------------------------------

def encode_position(x, n_freqs):
    """Raw coordinates concatenated with their Fourier features."""
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    out = np.concatenate([x2, positional_encode(x2, n_freqs)], axis=1)
    return out[0] if single else out


def map_shape_code(shape_code, mapper):
    """Apply the N per-expert linear maps; (d_s,) -> (N, d') or batched."""
    z = np.asarray(shape_code)
    if z.shape[-1] != mapper.weights.shape[2]:
        raise ValueError(
            f"shape code dim {z.shape[-1]} != mapper input {mapper.weights.shape[2]}"
        )
    if z.ndim == 1:
        return np.einsum("nij,j->ni", mapper.weights, z) + mapper.biases
    return np.einsum("nij,uj->uni", mapper.weights, z) + mapper.biases[None]


def map_texture_code(texture_code):
    """The texture mapping is the identity."""
    return texture_code


def expert_forward(x, expert_code, expert, config):
    """Evaluate one expert at points x: returns (features, density).

    Density is softplus(raw) + sigma_floor, so it is strictly positive
    and its log is always defined; it depends on position only.
    """
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if not np.isfinite(x2).all():
        raise ValueError("non-finite position")
    enc = encode_position(x2, config.pos_freqs)
    code = np.atleast_2d(expert_code)
    if code.shape[0] == 1 and enc.shape[0] > 1:
        code = np.broadcast_to(code, (enc.shape[0], code.shape[1]))
    h = mlp_forward(expert.trunk, np.concatenate([enc, code], axis=1))
    raw = mlp_forward(expert.sigma_head, h)[:, 0]
    sig = softplus(raw) + config.sigma_floor
    return (h[0], sig[0]) if single else (h, sig)


def compute_logits(sigmas, tau):
    """Tempered log-softmax over per-expert densities.

    logits_n = (log sigma_n)/tau - logsumexp over experts, stabilized by
    max subtraction; exp(logits) always sums to one.
    """
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    sig = np.asarray(sigmas)
    if sig.size == 0:
        raise ValueError("empty density vector")
    if np.any(sig <= 0):
        raise ValueError("densities must be strictly positive")
    scaled = np.log(sig) / tau
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sample_gumbel(rng, shape, dtype=np.float64):
    """Standard Gumbel draws via inverse-transform sampling of uniforms."""
    if np.dtype(dtype) == np.float32:
        u = rng.random(shape, dtype=np.float32)
    else:
        u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return (-np.log(-np.log(u))).astype(dtype, copy=False)


@dataclass
class SelectorOutput:
    """Which expert won at each point, with the selection diagnostics."""

    indices: np.ndarray
    onehot: np.ndarray
    logits: np.ndarray
    gumbel: np.ndarray = None
    sigma: np.ndarray = None
    features: np.ndarray = None


def select_expert(logits, gumbel=None, sigmas=None, features=None):
    """Pick one expert per point: argmax(logits + noise), ties to lowest index.

    With gumbel=None this is the pure deterministic argmax, which equals
    the argmax over the densities themselves. When sigmas/features are
    supplied, their selected rows are gathered into the output.
    """
    single = np.ndim(logits) == 1
    lg = np.atleast_2d(logits)
    if lg.shape[-1] == 0:
        raise ValueError("empty logits")
    scores = lg if gumbel is None else lg + np.atleast_2d(gumbel)
    idx = np.argmax(scores, axis=-1)
    onehot = np.zeros_like(lg)
    onehot[np.arange(lg.shape[0]), idx] = 1.0
    sel_sigma = sel_feat = None
    if sigmas is not None:
        sel_sigma = np.atleast_2d(sigmas)[np.arange(lg.shape[0]), idx]
    if features is not None:
        sel_feat = features[np.arange(lg.shape[0]), idx]
    out = SelectorOutput(
        idx, onehot, lg,
        None if gumbel is None else np.atleast_2d(gumbel),
        sel_sigma, sel_feat,
    )
    if single:
        out = SelectorOutput(
            int(idx[0]), onehot[0], lg[0],
            None if gumbel is None else np.atleast_2d(gumbel)[0],
            None if sel_sigma is None else sel_sigma[0],
            None if sel_feat is None else sel_feat[0],
        )
    return out


def texture_head_forward(features, directions, texture_code, head, config):
    """Shared radiance head: sigmoid-bounded RGB from (h, encoded d, z_t)."""
    single = features.ndim == 1
    h = np.atleast_2d(features)
    d = np.atleast_2d(directions)
    enc_d = encode_position(d, config.dir_freqs)
    code = np.atleast_2d(texture_code)
    if code.shape[0] == 1 and h.shape[0] > 1:
        code = np.broadcast_to(code, (h.shape[0], code.shape[1]))
    rgb = mlp_forward(head, np.concatenate([h, enc_d, code], axis=1))
    return rgb[0] if single else rgb


# ---------------------------------------------------------------------------
# Full-field evaluation
# ---------------------------------------------------------------------------

@dataclass
class FieldSample:
    """Radiance (RGB in [0,1]) and density at evaluated points."""

    rgb: np.ndarray
    sigma: np.ndarray


@dataclass
class FieldCache:
    """Everything the backward pass needs from one cached forward."""

    enc_x: np.ndarray
    expert_codes: np.ndarray       # (B, N, d') inputs as evaluated
    trunk_caches: list             # per expert; None for unevaluated experts
    sigma_caches: list
    raws: np.ndarray               # (B, N) raw density-head outputs (0 if unused)
    sel_indices: np.ndarray
    head_cache: list
    feature_width: int
    dir_enc_dim: int
    # foresight extras
    gate_cache: list = None
    gate_probs: np.ndarray = None
    sel_gate_prob: np.ndarray = None
    sel_features_raw: np.ndarray = None


def _gather_codes(codes, batch):
    code = np.atleast_2d(codes)
    if code.shape[0] == 1 and batch > 1:
        code = np.broadcast_to(code, (batch, code.shape[1]))
    return code


def moe_forward_cached(x, d, expert_codes, texture_codes, model, tau,
                       gumbel=None, want_cache=False, enc_dirs=None):
    """Hindsight forward over a batch of points with per-point codes.

    expert_codes: (B, N, d') or (N, d') broadcast; texture_codes: (B, d_t)
    or (d_t,). gumbel=None selects deterministically (max density);
    otherwise gumbel must be (B, N) noise. Precomputed direction
    encodings can be passed as enc_dirs (B, dir_enc_dim), in which case
    d is ignored. Returns (FieldSample, SelectorOutput, FieldCache|None).
    """
    config = model.config
    dtype = model.dtype
    x = np.ascontiguousarray(x, dtype=dtype)
    if not np.isfinite(x).all():
        raise ValueError("non-finite position")
    batch = x.shape[0]
    n = config.n_experts

    enc_x = encode_position(x, config.pos_freqs)
    if expert_codes.ndim == 2:
        expert_codes = np.broadcast_to(
            expert_codes[None], (batch, n, expert_codes.shape[1])
        )
    expert_codes = expert_codes.astype(dtype, copy=False)
    tex = _gather_codes(texture_codes, batch).astype(dtype, copy=False)

    sigmas = np.empty((batch, n), dtype=dtype)
    raws = np.empty((batch, n), dtype=dtype)
    features = []
    trunk_caches, sigma_caches = [], []
    for k, expert in enumerate(model.experts):
        inp = np.concatenate([enc_x, expert_codes[:, k, :]], axis=1)
        h, tcache = mlp_forward_cached(expert.trunk, inp)
        raw, scache = mlp_forward_cached(expert.sigma_head, h)
        raws[:, k] = raw[:, 0]
        sigmas[:, k] = softplus(raw[:, 0]) + config.sigma_floor
        features.append(h)
        trunk_caches.append(tcache if want_cache else None)
        sigma_caches.append(scache if want_cache else None)

    logits = compute_logits(sigmas, tau)
    sel = select_expert(logits, gumbel, sigmas)
    idx = sel.indices

    h_sel = np.empty((batch, config.feature_width), dtype=dtype)
    for k in range(n):
        rows = idx == k
        if rows.any():
            h_sel[rows] = features[k][rows]
    sel.features = h_sel

    if enc_dirs is None:
        enc_dirs = encode_position(
            np.ascontiguousarray(d, dtype=dtype), config.dir_freqs
        )
    head_in = np.concatenate([h_sel, enc_dirs, tex], axis=1)
    rgb, head_cache = mlp_forward_cached(model.texture_head, head_in)

    cache = None
    if want_cache:
        cache = FieldCache(
            enc_x, expert_codes, trunk_caches, sigma_caches, raws, idx,
            head_cache, config.feature_width, config.dir_enc_dim,
        )
    return FieldSample(rgb, sel.sigma), sel, cache


def moe_backward(model, cache, drgb, dsigma):
    """Backward through the hindsight field with the selection held constant.

    Gradients flow only into the selected expert at each point (plus the
    shared head and, via the returned code gradients, the mapper).
    Returns (param grads dict, d_expert_codes (B, N, d'), d_texture_codes).
    """
    config = model.config
    grads = zero_grads_like(model.named_params())
    batch = drgb.shape[0]

    head_grads, dhead_in = mlp_backward(model.texture_head, cache.head_cache, drgb)
    head_grads.add_named("texture", grads)
    fw = cache.feature_width
    dh_sel = dhead_in[:, :fw]
    d_tex = dhead_in[:, fw + cache.dir_enc_dim:].copy()

    d_expert_codes = np.zeros_like(cache.expert_codes)
    pos_dim = cache.enc_x.shape[1]
    draw_all = dsigma * sigmoid(cache.raws[np.arange(batch), cache.sel_indices])
    for k, expert in enumerate(model.experts):
        rows = np.nonzero(cache.sel_indices == k)[0]
        if rows.size == 0:
            continue
        scache = [layer[rows] for layer in cache.sigma_caches[k]]
        sgrads, dh_sigma = mlp_backward(
            expert.sigma_head, scache, draw_all[rows, None]
        )
        sgrads.add_named(f"expert{k}/sigma", grads)
        dh = dh_sel[rows] + dh_sigma
        tcache = [layer[rows] for layer in cache.trunk_caches[k]]
        tgrads, dinp = mlp_backward(expert.trunk, tcache, dh)
        tgrads.add_named(f"expert{k}/trunk", grads)
        d_expert_codes[rows, k, :] = dinp[:, pos_dim:]
    return grads, d_expert_codes, d_tex


def moe_field_forward(x, d, code, model, tau, mode="stochastic", rng=None,
                      gumbel=None):
    """Evaluate the full field for one instance code at a batch of points.

    mode="deterministic" takes the max-density expert with no noise;
    mode="stochastic" adds standard Gumbel noise to the logits (supply
    rng, or explicit (B, N) noise via gumbel). Density is independent of
    the viewing direction by construction.
    """
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    d2 = np.atleast_2d(d)
    if d2.shape[0] == 1 and x2.shape[0] > 1:
        d2 = np.broadcast_to(d2, x2.shape)
    if mode == "stochastic":
        if gumbel is None:
            if rng is None:
                raise ValueError("stochastic mode needs an rng or explicit noise")
            gumbel = sample_gumbel(
                rng, (x2.shape[0], model.config.n_experts), model.dtype
            )
    elif mode == "deterministic":
        gumbel = None
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    expert_codes = map_shape_code(code.shape, model.mapper)
    sample, sel, _ = moe_forward_cached(
        x2, d2, expert_codes, map_texture_code(code.texture), model, tau,
        gumbel=gumbel, want_cache=False,
    )
    if single:
        sel = SelectorOutput(
            int(sel.indices[0]), sel.onehot[0], sel.logits[0],
            None if sel.gumbel is None else sel.gumbel[0],
            sample.sigma[0], sel.features[0],
        )
        return FieldSample(sample.rgb[0], sample.sigma[0]), sel
    return sample, sel


def moe_densities(x, code, model, tau=1.0):
    """Deterministic densities: per-expert values and their pointwise max."""
    config = model.config
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=model.dtype)
    enc_x = encode_position(x, config.pos_freqs)
    expert_codes = map_shape_code(code.shape, model.mapper).astype(model.dtype)
    sigmas = np.empty((x.shape[0], config.n_experts), dtype=model.dtype)
    for k, expert in enumerate(model.experts):
        inp = np.concatenate(
            [enc_x, np.broadcast_to(expert_codes[k], (x.shape[0], expert_codes.shape[1]))],
            axis=1,
        )
        h = mlp_forward(expert.trunk, inp)
        raw = mlp_forward(expert.sigma_head, h)[:, 0]
        sigmas[:, k] = softplus(raw) + config.sigma_floor
    return sigmas.max(axis=1), sigmas


# ---------------------------------------------------------------------------
# Foresight-gated baseline
# ---------------------------------------------------------------------------

def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def gated_forward_cached(x, d, shape_codes, expert_codes, texture_codes, model,
                         want_cache=False, enc_dirs=None):
    """Foresight forward: the gate picks one expert before any expert runs.

    Only the winning expert is evaluated per point, and its features are
    scaled by the winning softmax gate value so gradients reach the gate.
    shape_codes: (B, d_s) or (d_s,). Returns (FieldSample, SelectorOutput,
    FieldCache|None); SelectorOutput.logits are the gate logits.
    """
    config = model.config
    dtype = model.dtype
    x = np.ascontiguousarray(x, dtype=dtype)
    if not np.isfinite(x).all():
        raise ValueError("non-finite position")
    batch = x.shape[0]
    n = config.n_experts

    enc_x = encode_position(x, config.pos_freqs)
    shape_b = _gather_codes(shape_codes, batch).astype(dtype, copy=False)
    if expert_codes.ndim == 2:
        expert_codes = np.broadcast_to(
            expert_codes[None], (batch, n, expert_codes.shape[1])
        )
    expert_codes = expert_codes.astype(dtype, copy=False)
    tex = _gather_codes(texture_codes, batch).astype(dtype, copy=False)

    gate_in = np.concatenate([enc_x, shape_b], axis=1)
    glogits, gate_cache = mlp_forward_cached(model.gate, gate_in)
    probs = _softmax(glogits)
    idx = np.argmax(glogits, axis=-1)
    p_sel = probs[np.arange(batch), idx]

    h_raw = np.empty((batch, config.feature_width), dtype=dtype)
    raws = np.zeros((batch, n), dtype=dtype)
    sigma = np.empty(batch, dtype=dtype)
    trunk_caches = [None] * n
    sigma_caches = [None] * n
    for k, expert in enumerate(model.experts):
        rows = np.nonzero(idx == k)[0]
        if rows.size == 0:
            continue
        inp = np.concatenate([enc_x[rows], expert_codes[rows, k, :]], axis=1)
        h, tcache = mlp_forward_cached(expert.trunk, inp)
        h_scaled = p_sel[rows, None] * h
        raw, scache = mlp_forward_cached(expert.sigma_head, h_scaled)
        h_raw[rows] = h
        raws[rows, k] = raw[:, 0]
        sigma[rows] = softplus(raw[:, 0]) + config.sigma_floor
        trunk_caches[k] = (rows, tcache) if want_cache else None
        sigma_caches[k] = (rows, scache) if want_cache else None

    h_sel = p_sel[:, None] * h_raw
    if enc_dirs is None:
        enc_dirs = encode_position(
            np.ascontiguousarray(d, dtype=dtype), config.dir_freqs
        )
    head_in = np.concatenate([h_sel, enc_dirs, tex], axis=1)
    rgb, head_cache = mlp_forward_cached(model.texture_head, head_in)

    onehot = np.zeros((batch, n), dtype=dtype)
    onehot[np.arange(batch), idx] = 1.0
    sel = SelectorOutput(idx, onehot, glogits, None, sigma, h_sel)

    cache = None
    if want_cache:
        cache = FieldCache(
            enc_x, expert_codes, trunk_caches, sigma_caches, raws, idx,
            head_cache, config.feature_width, config.dir_enc_dim,
            gate_cache=gate_cache, gate_probs=probs, sel_gate_prob=p_sel,
            sel_features_raw=h_raw,
        )
    return FieldSample(rgb, sigma), sel, cache


def gated_backward(model, cache, drgb, dsigma, dlogits_extra=None):
    """Backward for the gated baseline with the top-1 choice held constant.

    Gradients reach the gate through the softmax value that scales the
    winning expert's features (straight-through top-1 dispatch).
    dlogits_extra, if given, is added to the gate-logit gradient (used
    for the load-balance auxiliary loss). Returns (param grads,
    d_shape_codes, d_expert_codes, d_texture_codes).
    """
    config = model.config
    grads = zero_grads_like(model.named_params())
    batch = drgb.shape[0]
    idx = cache.sel_indices
    p_sel = cache.sel_gate_prob

    head_grads, dhead_in = mlp_backward(model.texture_head, cache.head_cache, drgb)
    head_grads.add_named("texture", grads)
    fw = cache.feature_width
    dh_scaled = dhead_in[:, :fw].copy()
    d_tex = dhead_in[:, fw + cache.dir_enc_dim:].copy()

    d_expert_codes = np.zeros_like(cache.expert_codes)
    dp = np.zeros(batch, dtype=drgb.dtype)
    pos_dim = cache.enc_x.shape[1]
    draw_all = dsigma * sigmoid(cache.raws[np.arange(batch), idx])
    for k, expert in enumerate(model.experts):
        if cache.trunk_caches[k] is None:
            continue
        rows, tcache = cache.trunk_caches[k]
        _, scache = cache.sigma_caches[k]
        sgrads, dh_from_sigma = mlp_backward(
            expert.sigma_head, scache, draw_all[rows, None]
        )
        sgrads.add_named(f"expert{k}/sigma", grads)
        dh_s = dh_scaled[rows] + dh_from_sigma
        # d/dh and d/dp of (p * h)
        dh = p_sel[rows, None] * dh_s
        dp[rows] = (dh_s * cache.sel_features_raw[rows]).sum(axis=1)
        tgrads, dinp = mlp_backward(expert.trunk, tcache, dh)
        tgrads.add_named(f"expert{k}/trunk", grads)
        d_expert_codes[rows, k, :] = dinp[:, pos_dim:]

    # softmax jacobian restricted to the selected component
    probs = cache.gate_probs
    dlogits = -probs * (dp * p_sel)[:, None]
    dlogits[np.arange(batch), idx] += dp * p_sel
    if dlogits_extra is not None:
        dlogits = dlogits + dlogits_extra
    gate_grads, dgate_in = mlp_backward(model.gate, cache.gate_cache, dlogits)
    gate_grads.add_named("gate", grads)
    d_shape = dgate_in[:, pos_dim:].copy()
    return grads, d_shape, d_expert_codes, d_tex


def gate_forward(x, d, code, model):
    """Public foresight-baseline evaluation for one instance code."""
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    d2 = np.atleast_2d(d)
    if d2.shape[0] == 1 and x2.shape[0] > 1:
        d2 = np.broadcast_to(d2, x2.shape)
    expert_codes = map_shape_code(code.shape, model.mapper)
    sample, sel, _ = gated_forward_cached(
        x2, d2, code.shape, expert_codes, map_texture_code(code.texture), model
    )
    if single:
        return FieldSample(sample.rgb[0], sample.sigma[0]), int(sel.indices[0])
    return sample, sel


def gate_indices(x, code, model):
    """Which expert the gate picks at each point (before experts run)."""
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=model.dtype)
    enc_x = encode_position(x, model.config.pos_freqs)
    shape_b = _gather_codes(code.shape, x.shape[0]).astype(model.dtype, copy=False)
    glogits = mlp_forward(model.gate, np.concatenate([enc_x, shape_b], axis=1))
    return np.argmax(glogits, axis=-1)


def field_evaluator(model, code):
    """Deterministic (x, d) -> (rgb, sigma) evaluator for rendering."""
    expert_codes = map_shape_code(code.shape, model.mapper)
    tex = map_texture_code(code.texture)
    if isinstance(model, GatedMoeModel):
        def field_fn(x, d):
            sample, _, _ = gated_forward_cached(
                x, d, code.shape, expert_codes, tex, model
            )
            return sample.rgb, sample.sigma
    else:
        def field_fn(x, d):
            sample, _, _ = moe_forward_cached(
                x, d, expert_codes, tex, model, tau=1.0, gumbel=None
            )
            return sample.rgb, sample.sigma
    return field_fn


def gated_densities(x, code, model):
    """Densities of the gated field plus each expert's own (unscaled) field."""
    config = model.config
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=model.dtype)
    batch = x.shape[0]
    enc_x = encode_position(x, config.pos_freqs)
    shape_b = _gather_codes(code.shape, batch).astype(model.dtype, copy=False)
    glogits = mlp_forward(model.gate, np.concatenate([enc_x, shape_b], axis=1))
    probs = _softmax(glogits)
    idx = np.argmax(glogits, axis=-1)
    p_sel = probs[np.arange(batch), idx]

    expert_codes = map_shape_code(code.shape, model.mapper).astype(model.dtype)
    per_expert = np.empty((batch, config.n_experts), dtype=model.dtype)
    sigma = np.empty(batch, dtype=model.dtype)
    for k, expert in enumerate(model.experts):
        inp = np.concatenate(
            [enc_x, np.broadcast_to(expert_codes[k], (batch, expert_codes.shape[1]))],
            axis=1,
        )
        h = mlp_forward(expert.trunk, inp)
        raw_own = mlp_forward(expert.sigma_head, h)[:, 0]
        per_expert[:, k] = softplus(raw_own) + config.sigma_floor
        rows = idx == k
        if rows.any():
            raw_gated = mlp_forward(
                expert.sigma_head, p_sel[rows, None] * h[rows]
            )[:, 0]
            sigma[rows] = softplus(raw_gated) + config.sigma_floor
    return sigma, per_expert
