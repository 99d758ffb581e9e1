"""Shared test utilities: finite-difference oracles and hand-built models."""

import numpy as np

from gumbel_nerf.field import Expert, ModelConfig
from gumbel_nerf.nn import MlpParams


def numeric_gradient(f, x, h=1e-4):
    """Central finite differences of scalar f at array x, elementwise."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def tiny_config(n_experts=2):
    """Micro architecture for finite-difference end-to-end checks."""
    return ModelConfig(
        n_experts=n_experts,
        trunk_layers=2,
        hidden_width=8,
        feature_width=8,
        shape_code_dim=4,
        texture_code_dim=4,
        expert_code_dim=3,
        pos_freqs=2,
        dir_freqs=1,
        texture_layers=1,
        gate_layers=2,
        gate_hidden=6,
    )


def constant_density_expert(config, sigma_value, dtype=np.float32):
    """Expert whose density field is exactly sigma_value everywhere.

    Zero trunk weights give constant (zero) features; the density head
    bias solves softplus(b) + floor = sigma_value.
    """
    trunk_in = config.pos_enc_dim + config.expert_code_dim
    widths = (
        [trunk_in]
        + [config.hidden_width] * (config.trunk_layers - 1)
        + [config.feature_width]
    )
    weights = [
        np.zeros((a, b), dtype=dtype) for a, b in zip(widths[:-1], widths[1:])
    ]
    biases = [np.zeros(b, dtype=dtype) for b in widths[1:]]
    trunk = MlpParams(weights, biases, ["relu"] * config.trunk_layers)
    raw_bias = np.log(np.expm1(sigma_value - config.sigma_floor))
    sigma_head = MlpParams(
        [np.zeros((config.feature_width, 1), dtype=dtype)],
        [np.array([raw_bias], dtype=dtype)],
        ["identity"],
    )
    return Expert(trunk, sigma_head)


def plane_switch_gate(config, scale=1000.0, dtype=np.float32):
    """Gate MLP whose top choice flips between experts 0 and 1 at x0 = 0.

    The raw x0 coordinate enters the encoded position first, so the gate
    computes logits (scale*x0, -scale*x0, small...) exactly through its
    relu layers via a positive/negative split.
    """
    gate_in = config.pos_enc_dim + config.shape_code_dim
    hidden = config.gate_hidden
    n = config.n_experts
    if config.gate_layers < 2 or hidden < 2:
        raise ValueError("gate too small for the plane construction")
    layers_w = []
    layers_b = []
    w0 = np.zeros((gate_in, hidden), dtype=dtype)
    w0[0, 0] = 1.0    # relu(x0)
    w0[0, 1] = -1.0   # relu(-x0)
    layers_w.append(w0)
    layers_b.append(np.zeros(hidden, dtype=dtype))
    for _ in range(config.gate_layers - 2):
        w = np.zeros((hidden, hidden), dtype=dtype)
        w[0, 0] = 1.0
        w[1, 1] = 1.0
        layers_w.append(w)
        layers_b.append(np.zeros(hidden, dtype=dtype))
    w_out = np.zeros((hidden, n), dtype=dtype)
    w_out[0, 0] = scale
    w_out[1, 0] = -scale
    w_out[0, 1] = -scale
    w_out[1, 1] = scale
    layers_w.append(w_out)
    layers_b.append(np.zeros(n, dtype=dtype))
    acts = ["relu"] * (config.gate_layers - 1) + ["identity"]
    return MlpParams(layers_w, layers_b, acts)
