"""Unit tests for the MLP substrate, optimizer and encodings."""

import math

import numpy as np
import pytest

from gumbel_nerf import checkpoint as ckpt_io
from gumbel_nerf.nn import (
    AdamWState,
    LrSchedule,
    MlpParams,
    NonFiniteGradientError,
    adamw_step,
    init_mlp,
    lr_at,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    positional_encode,
)

from helpers import numeric_gradient, relative_error


def _encode_oracle(p, n_freqs):
    """Independent elementwise trig evaluation of the encoding."""
    out = []
    for q in p:
        for k in range(n_freqs):
            out.append(math.sin(2.0 ** k * math.pi * q))
            out.append(math.cos(2.0 ** k * math.pi * q))
    return np.array(out)


class TestPositionalEncode:
    def test_zero_input(self):
        enc = positional_encode(np.zeros(3), 2)
        assert enc.shape == (12,)
        np.testing.assert_allclose(enc[0::2], 0.0, atol=1e-15)
        np.testing.assert_allclose(enc[1::2], 1.0, atol=1e-15)

    def test_half(self):
        enc = positional_encode(np.array([0.5]), 1)
        np.testing.assert_allclose(enc, [1.0, 0.0], atol=1e-12)

    def test_matches_elementwise_oracle(self):
        p = np.array([0.25, -0.25])
        enc = positional_encode(p, 3)
        assert enc.shape == (12,)
        np.testing.assert_allclose(enc, _encode_oracle(p, 3), atol=1e-12)

    def test_random_matches_oracle_batch(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(-2, 2, (50, 3))
        enc = positional_encode(pts, 5)
        assert enc.shape == (50, 30)
        for row, p in zip(enc, pts):
            np.testing.assert_allclose(row, _encode_oracle(p, 5), atol=1e-12)

    def test_bounded(self):
        rng = np.random.default_rng(3)
        enc = positional_encode(rng.uniform(-100, 100, (200, 3)), 6)
        assert np.all(enc >= -1.0) and np.all(enc <= 1.0)

    def test_zero_freqs_empty(self):
        assert positional_encode(np.ones(3), 0).shape == (0,)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            positional_encode(np.array([np.nan, 0.0, 0.0]), 2)


class TestMlpForward:
    def test_zero_params_identity(self):
        mlp = MlpParams(
            [np.zeros((3, 4)), np.zeros((4, 2))],
            [np.zeros(4), np.zeros(2)],
            ["identity", "identity"],
        )
        np.testing.assert_array_equal(mlp_forward(mlp, np.ones(3)), np.zeros(2))

    def test_identity_relu_clamps(self):
        mlp = MlpParams([np.eye(2)], [np.zeros(2)], ["relu"])
        np.testing.assert_array_equal(
            mlp_forward(mlp, np.array([1.0, -1.0])), [1.0, 0.0]
        )

    def test_matches_independent_matvec(self):
        rng = np.random.default_rng(11)
        mlp = init_mlp([5, 7, 3], ["relu", "identity"], rng, dtype=np.float64)
        x = rng.standard_normal(5)
        # independent re-implementation with explicit loops
        h = x.copy()
        for w, b, act in zip(mlp.weights, mlp.biases, mlp.activations):
            out = np.zeros(w.shape[1])
            for j in range(w.shape[1]):
                acc = b[j]
                for i in range(w.shape[0]):
                    acc += h[i] * w[i, j]
                out[j] = acc
            h = np.maximum(out, 0.0) if act == "relu" else out
        np.testing.assert_allclose(mlp_forward(mlp, x), h, atol=1e-12)

    def test_width_mismatch(self):
        mlp = MlpParams([np.zeros((3, 2))], [np.zeros(2)], ["identity"])
        with pytest.raises(ValueError):
            mlp_forward(mlp, np.ones(4))

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        mlp = init_mlp([4, 8, 2], ["softplus", "sigmoid"], rng)
        x = rng.standard_normal((6, 4)).astype(np.float32)
        a = mlp_forward(mlp, x)
        b = mlp_forward(mlp, x)
        assert a.tobytes() == b.tobytes()

    def test_invalid_chain_rejected(self):
        with pytest.raises(ValueError):
            MlpParams(
                [np.zeros((3, 4)), np.zeros((5, 2))],
                [np.zeros(4), np.zeros(2)],
                ["relu", "identity"],
            )


class TestBackprop:
    def test_scalar_linear(self):
        mlp = MlpParams([np.array([[2.0]])], [np.zeros(1)], ["identity"])
        y, cache = mlp_forward_cached(mlp, np.array([3.0]))
        grads, dx = mlp_backward(mlp, cache, np.ones_like(y))
        assert grads.dweights[0][0, 0] == 3.0  # df/dw = x
        assert dx[0, 0] == 2.0                 # df/dx = w

    def test_zero_output_grad(self):
        rng = np.random.default_rng(5)
        mlp = init_mlp([3, 5, 2], ["relu", "identity"], rng, dtype=np.float64)
        y, cache = mlp_forward_cached(mlp, rng.standard_normal((4, 3)))
        grads, dx = mlp_backward(mlp, cache, np.zeros_like(y))
        for dw, db in zip(grads.dweights, grads.dbiases):
            assert not dw.any() and not db.any()
        assert not dx.any()

    def test_stale_cache_rejected(self):
        rng = np.random.default_rng(5)
        mlp = init_mlp([3, 5, 2], ["relu", "identity"], rng)
        _, cache = mlp_forward_cached(mlp, rng.standard_normal((4, 3)).astype("f"))
        with pytest.raises(ValueError):
            mlp_backward(mlp, cache[:-1], np.zeros((4, 2)))

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        acts = ["relu", "softplus", "sigmoid", "identity"]
        layer_acts = [acts[seed % 4], acts[(seed + 1) % 4], "identity"]
        mlp = init_mlp([4, 6, 5, 3], layer_acts, rng, dtype=np.float64)
        x = rng.standard_normal((3, 4))
        target = rng.standard_normal((3, 3))

        def loss():
            out = mlp_forward(mlp, x)
            return float(((out - target) ** 2).sum())

        y, cache = mlp_forward_cached(mlp, x)
        grads, _ = mlp_backward(mlp, cache, 2.0 * (y - target))
        for k in range(mlp.n_layers):
            fd_w = numeric_gradient(loss, mlp.weights[k])
            fd_b = numeric_gradient(loss, mlp.biases[k])
            assert relative_error(grads.dweights[k], fd_w) < 1e-4
            assert relative_error(grads.dbiases[k], fd_b) < 1e-4

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        mlp = init_mlp([4, 8, 2], ["softplus", "sigmoid"], rng, dtype=np.float64)
        x = rng.standard_normal((2, 4))

        def loss():
            return float(mlp_forward(mlp, x).sum())

        y, cache = mlp_forward_cached(mlp, x)
        _, dx = mlp_backward(mlp, cache, np.ones_like(y))
        assert relative_error(dx, numeric_gradient(loss, x)) < 1e-4


class TestAdamW:
    def test_zero_grad_zero_decay_is_identity(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        state = AdamWState(lr=0.1, weight_decay=0.0)
        adamw_step(p, {"w": np.zeros(3)}, state)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0, 3.0])
        assert state.step == 1

    def test_first_step_is_signed_lr(self):
        g = np.array([0.5, -0.2, 3.0])
        p = {"w": np.zeros(3)}
        state = AdamWState(lr=1e-2, weight_decay=0.0)
        adamw_step(p, {"w": g}, state)
        np.testing.assert_allclose(p["w"], -1e-2 * np.sign(g), rtol=1e-6)

    def test_decay_alone_scales(self):
        p = {"w": np.array([2.0, -4.0])}
        state = AdamWState(lr=0.1, weight_decay=0.5)
        adamw_step(p, {"w": np.zeros(2)}, state)
        np.testing.assert_allclose(p["w"], np.array([2.0, -4.0]) * (1 - 0.05),
                                   rtol=1e-12)

    def test_nonfinite_grad_rejected_with_name(self):
        p = {"layer/w0": np.zeros(2)}
        state = AdamWState(lr=0.1)
        with pytest.raises(NonFiniteGradientError, match="layer/w0"):
            adamw_step(p, {"layer/w0": np.array([1.0, np.nan])}, state)
        assert state.step == 0  # step rejected before any update

    def test_second_moment_nonnegative(self):
        rng = np.random.default_rng(1)
        p = {"w": rng.standard_normal(10)}
        state = AdamWState(lr=1e-3)
        for _ in range(5):
            adamw_step(p, {"w": rng.standard_normal(10)}, state)
        assert np.all(state.v["w"] >= 0)
        assert state.step == 5


class TestLrSchedule:
    def test_start_value(self):
        sched = LrSchedule(1.3e-3, total_steps=1000)
        assert lr_at(0, sched) == pytest.approx(1.3e-3)

    def test_full_decade(self):
        sched = LrSchedule(1.3e-3, total_steps=1000)
        assert lr_at(1000, sched) == pytest.approx(1.3e-4)

    def test_half_decade(self):
        sched = LrSchedule(1.3e-3, total_steps=1000)
        assert lr_at(500, sched) == pytest.approx(1.3e-3 * 10 ** -0.5, rel=1e-12)

    def test_constant_mode(self):
        sched = LrSchedule(2e-2, total_steps=100, kind="constant")
        assert lr_at(77, sched) == 2e-2

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            lr_at(-1, LrSchedule(1e-3, 10))


class TestCheckpointFormat:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "model.npz"
        arrays = {
            "expert0/trunk/w0": np.arange(6, dtype=np.float32).reshape(2, 3),
            "opt/model/step": np.asarray(7, dtype=np.int64),
        }
        ckpt_io.save_arrays(path, {"kind": "test"}, arrays)
        header, loaded = ckpt_io.load_arrays(path)
        assert header["kind"] == "test"
        assert header["format_version"] == ckpt_io.FORMAT_VERSION
        np.testing.assert_array_equal(
            loaded["expert0/trunk/w0"], arrays["expert0/trunk/w0"]
        )
        assert loaded["opt/model/step"] == 7

    def test_floats_stored_as_float32(self, tmp_path):
        path = tmp_path / "m.npz"
        ckpt_io.save_arrays(path, {}, {"w": np.ones(3, dtype=np.float64)})
        _, loaded = ckpt_io.load_arrays(path)
        assert loaded["w"].dtype == np.float32

    def test_reserved_key_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            ckpt_io.save_arrays(tmp_path / "x.npz", {}, {"__header__": np.ones(1)})

    def test_non_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, a=np.ones(2))
        with pytest.raises(ValueError):
            ckpt_io.load_arrays(path)
