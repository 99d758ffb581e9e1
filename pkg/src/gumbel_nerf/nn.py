"""Minimal feedforward-MLP substrate.

Everything the field and training code needs from a neural-network
library, kept deliberately small: parameter records, forward evaluation
with cached activations, exact reverse-mode gradients, a decoupled
weight-decay Adam optimizer, exponential learning-rate decay, and
Fourier positional encoding. Default precision is float32; pass
``dtype=np.float64`` at init for gradient-check fidelity.

Parameter records are treated as immutable during forward/backward
evaluation; only the optimizer writes to them.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels

ACTIVATIONS = ("relu", "softplus", "sigmoid", "identity")


class NonFiniteGradientError(ValueError):
    """Raised when an optimizer step receives NaN/inf gradients."""


@dataclass
class MlpParams:
    """Weights, biases and per-layer activation tags of a feedforward MLP.

    weights[k] has shape (in_k, out_k) and consecutive layers chain:
    out_k == in_{k+1}. Inputs are row vectors, so a layer computes
    ``act(x @ W + b)``.
    """

    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must align")
        for k, (w, b, act) in enumerate(
            zip(self.weights, self.biases, self.activations)
        ):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r} in layer {k}")
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {k} weight/bias shapes inconsistent")
            if k > 0 and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer widths do not chain at layer {k}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"non-finite parameters in layer {k}")

    @property
    def in_width(self):
        return self.weights[0].shape[0]

    @property
    def out_width(self):
        return self.weights[-1].shape[1]

    @property
    def n_layers(self):
        return len(self.weights)

    def named(self, prefix):
        """Flat {name: array} view of the parameters (arrays shared)."""
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}/w{k}"] = w
            out[f"{prefix}/b{k}"] = b
        return out

    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass
class MlpGrads:
    """Accumulated parameter gradients, shape-congruent with an MlpParams."""

    dweights: list
    dbiases: list

    @classmethod
    def zeros_like(cls, params):
        return cls(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases],
        )

    def add_named(self, prefix, out):
        """Accumulate into a flat {name: array} gradient dict."""
        for k, (dw, db) in enumerate(zip(self.dweights, self.dbiases)):
            out[f"{prefix}/w{k}"] += dw
            out[f"{prefix}/b{k}"] += db


def init_mlp(widths, activations, rng, dtype=np.float32):
    """Kaiming-uniform fan-in weights (bound sqrt(6/fan_in)), zero biases."""
    if len(widths) != len(activations) + 1:
        raise ValueError("need len(widths) == len(activations) + 1")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(weights, biases, list(activations))


def softplus(x):
    """log(1 + e^x), stable at both tails."""
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return expit(x)


_ACT_CODE = {
    "identity": kernels.ACT_IDENTITY,
    "relu": kernels.ACT_RELU,
    "softplus": kernels.ACT_SOFTPLUS,
    "sigmoid": kernels.ACT_SIGMOID,
}


def _layers_forward(params, x, cache):
    h = np.atleast_2d(x)
    if h.shape[1] != params.in_width:
        raise ValueError(
            f"input width {h.shape[1]} != expected {params.in_width}"
        )
    if cache is not None:
        cache.append(h)
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = np.empty((h.shape[0], w.shape[1]), dtype=h.dtype)
        np.dot(h, w, out=z)
        kernels.bias_act(z, b, _ACT_CODE[act])
        h = z
        if cache is not None:
            cache.append(h)
    return h


def mlp_forward(params, x):
    """Evaluate the MLP on a (batch, in_width) array or a single vector."""
    single = x.ndim == 1
    h = _layers_forward(params, x, None)
    return h[0] if single else h


def mlp_forward_cached(params, x):
    """Forward pass that also returns the activation cache for backprop.

    The cache is the list [input, act_1, ..., act_K] of layer outputs;
    it is sufficient to reconstruct exact gradients in mlp_backward
    (every supported activation's derivative is recoverable from its
    output, so pre-activations are never stored).
    """
    cache = []
    h = _layers_forward(params, x, cache)
    return h, cache


def mlp_backward(params, cache, dy):
    """Exact reverse-mode gradients from a forward cache.

    dy is the gradient of a scalar loss w.r.t. the MLP output, shaped
    like the cached output. Returns (MlpGrads, gradient w.r.t. input).
    """
    if len(cache) != params.n_layers + 1:
        raise ValueError("cache does not match this MLP (stale or truncated)")
    dy = np.ascontiguousarray(np.atleast_2d(dy))
    if dy.shape != cache[-1].shape:
        raise ValueError("output-gradient shape does not match cached forward")
    dweights = [None] * params.n_layers
    dbiases = [None] * params.n_layers
    for k in range(params.n_layers - 1, -1, -1):
        dz = kernels.act_backward(
            dy, cache[k + 1], _ACT_CODE[params.activations[k]]
        )
        dweights[k] = cache[k].T @ dz
        dbiases[k] = dz.sum(axis=0)
        dy = dz @ params.weights[k].T
    return MlpGrads(dweights, dbiases), dy


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------

def positional_encode(p, n_freqs):
    """Fourier features: (sin(2^k pi q), cos(2^k pi q)) per component q.

    k runs over 0..n_freqs-1, component-major, so the output width is
    2 * n_freqs * dim. n_freqs == 0 yields a zero-width encoding; raw
    coordinates are not included (callers concatenate them separately).
    """
    if n_freqs < 0:
        raise ValueError("frequency count must be >= 0")
    single = p.ndim == 1
    p2 = np.atleast_2d(p)
    if not np.isfinite(p2).all():
        raise ValueError("non-finite coordinates")
    out = kernels.fourier_features(np.ascontiguousarray(p2), n_freqs)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Optimizer and learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    """Moment accumulators plus hyperparameters for decoupled AdamW."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state):
    """Apply one AdamW step in place to a {name: array} parameter dict.

    Bias-corrected moments; weight decay is decoupled from the adaptive
    step. Non-finite gradients reject the whole step before any update.
    """
    for name in params:
        g = grads[name]
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}")
    state.step += 1
    inv_bc1 = 1.0 / (1.0 - state.beta1 ** state.step)
    inv_bc2 = 1.0 / (1.0 - state.beta2 ** state.step)
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        kernels.adamw_update(
            p.ravel(), grads[name].ravel(),
            state.m[name].ravel(), state.v[name].ravel(),
            state.lr, state.beta1, state.beta2, state.eps, state.weight_decay,
            inv_bc1, inv_bc2,
        )


@dataclass
class LrSchedule:
    """Exponential decay lr(step) = base * factor^(step/total), or constant."""

    base: float
    total_steps: int = 0
    kind: str = "exponential"
    factor: float = 0.1


def lr_at(step, schedule):
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.kind == "constant" or schedule.total_steps <= 0:
        return schedule.base
    return schedule.base * schedule.factor ** (step / schedule.total_steps)


def zero_grads_like(params):
    """Fresh all-zero gradient dict congruent with a parameter dict."""
    return {name: np.zeros_like(p) for name, p in params.items()}
