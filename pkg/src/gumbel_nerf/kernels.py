"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

The compiled path is used automatically when numba imports successfully.
Set ``GUMBEL_NERF_DISABLE_NUMBA=1`` to force the pure-numpy fallback (the
two paths agree to floating-point tolerance; see benchmarks/ for a speed
comparison). Both variants of every kernel stay importable under their
``*_numpy`` / ``*_jit`` names so they can be benchmarked side by side.

All kernels are dtype-generic over float32/float64 and allocate their
outputs in the dtype of the input arrays.
"""

import ctypes
import os

import numpy as np

NUMBA_DISABLED = os.environ.get("GUMBEL_NERF_DISABLE_NUMBA", "0") == "1"

_ALLOCATOR_TUNED = False


def tune_allocator():
    """Keep large numpy temporaries in the heap arena instead of mmap.

    A training step keeps ~40 multi-MB activation buffers alive at once;
    with glibc defaults each one is mmap'ed and returned to the kernel
    on free, so every step re-pays the page faults (~4x slower steps).
    Raising the mmap and trim thresholds keeps the freed blocks warm.
    Idempotent; silently a no-op off glibc.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass

try:
    if NUMBA_DISABLED:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

# activation codes shared by the fused layer kernels
ACT_IDENTITY, ACT_RELU, ACT_SOFTPLUS, ACT_SIGMOID = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# Fourier feature encoding
# ---------------------------------------------------------------------------

def fourier_features_numpy(x, n_freqs):
    """Encode each component q of x as (sin(2^k pi q), cos(2^k pi q)), k < n_freqs.

    Layout is component-major with the frequency index inner:
    [q0k0_sin, q0k0_cos, q0k1_sin, ..., q1k0_sin, ...]. Output width is
    2 * n_freqs * x.shape[1]; n_freqs == 0 yields a zero-width array.
    """
    batch, dim = x.shape
    if n_freqs == 0:
        return np.zeros((batch, 0), dtype=x.dtype)
    # angles in float64 regardless of storage dtype, matching the jit path
    freqs = 2.0 ** np.arange(n_freqs) * np.pi
    ang = x.astype(np.float64)[:, :, None] * freqs[None, None, :]
    out = np.empty((batch, dim, n_freqs, 2), dtype=x.dtype)
    out[..., 0] = np.sin(ang)
    out[..., 1] = np.cos(ang)
    return out.reshape(batch, 2 * n_freqs * dim)


def _fourier_features_impl(x, n_freqs, out):
    # one sin/cos pair per component, then double-angle recurrences:
    # sin(2a) = 2 sin a cos a, cos(2a) = cos^2 a - sin^2 a
    batch, dim = x.shape
    for b in range(batch):
        col = 0
        for c in range(dim):
            s = np.sin(x[b, c] * np.pi)
            co = np.cos(x[b, c] * np.pi)
            for _ in range(n_freqs):
                out[b, col] = s
                out[b, col + 1] = co
                col += 2
                s2 = 2.0 * s * co
                co = co * co - s * s
                s = s2


# ---------------------------------------------------------------------------
# Fused MLP layer pieces
# ---------------------------------------------------------------------------

def bias_act_numpy(z, bias, act):
    """In place: z <- activation(z + bias)."""
    z += bias
    if act == ACT_RELU:
        np.maximum(z, 0.0, out=z)
    elif act == ACT_SOFTPLUS:
        np.logaddexp(0.0, z, out=z)
    elif act == ACT_SIGMOID:
        # sigmoid(z) = 1/(1+e^-z); the e^-z overflow for very negative z
        # saturates to the correct 0 limit, so silence that warning
        with np.errstate(over="ignore"):
            np.negative(z, out=z)
            np.exp(z, out=z)
            z += 1.0
            np.reciprocal(z, out=z)
    return z


def _bias_act_impl(z, bias, act):
    rows, cols = z.shape
    for i in range(rows):
        for j in range(cols):
            v = z[i, j] + bias[j]
            if act == ACT_RELU:
                v = v if v > 0.0 else 0.0
            elif act == ACT_SOFTPLUS:
                # log(1 + e^v), stable at both tails
                v = v + np.log1p(np.exp(-v)) if v > 0.0 else np.log1p(np.exp(v))
            elif act == ACT_SIGMOID:
                v = 1.0 / (1.0 + np.exp(-v)) if v >= 0.0 else \
                    np.exp(v) / (1.0 + np.exp(v))
            z[i, j] = v


def act_backward_numpy(dy, activated, act):
    """dloss/dpreactivation from the layer output; fresh array."""
    if act == ACT_RELU:
        return dy * (activated > 0)
    if act == ACT_SOFTPLUS:
        return dy * (1.0 - np.exp(-activated))
    if act == ACT_SIGMOID:
        return dy * activated * (1.0 - activated)
    return dy


def _act_backward_impl(dy, activated, act, out):
    rows, cols = dy.shape
    for i in range(rows):
        for j in range(cols):
            a = activated[i, j]
            if act == ACT_RELU:
                g = 1.0 if a > 0.0 else 0.0
            elif act == ACT_SOFTPLUS:
                g = 1.0 - np.exp(-a)
            else:  # sigmoid
                g = a * (1.0 - a)
            out[i, j] = dy[i, j] * g


# ---------------------------------------------------------------------------
# Volume compositing
# ---------------------------------------------------------------------------

def composite_forward_numpy(sigma, rgb, delta, background):
    """Alpha-composite per-ray samples into pixel colors.

    sigma, delta: (rays, samples); rgb: (rays, samples, 3);
    background: scalar intensity added with the leftover transmittance.
    Returns (pixels (rays, 3), weights, transmittance), where
    transmittance[:, 0] == 1 and each step multiplies by exp(-sigma*delta).
    """
    att = np.exp(-sigma * delta)
    trans = np.ones_like(att)
    np.cumprod(att[:, :-1], axis=1, out=trans[:, 1:])
    weights = trans * (1.0 - att)
    pixels = np.einsum("rs,rsc->rc", weights, rgb)
    pixels += (background * (1.0 - weights.sum(axis=1)))[:, None]
    return pixels, weights, trans


def _composite_forward_impl(sigma, rgb, delta, background, pixels, weights, trans):
    n_rays, n_samples = sigma.shape
    for r in range(n_rays):
        t = 1.0
        acc = 0.0
        p0 = 0.0
        p1 = 0.0
        p2 = 0.0
        for i in range(n_samples):
            trans[r, i] = t
            a = np.exp(-sigma[r, i] * delta[r, i])
            w = t * (1.0 - a)
            weights[r, i] = w
            p0 += w * rgb[r, i, 0]
            p1 += w * rgb[r, i, 1]
            p2 += w * rgb[r, i, 2]
            acc += w
            t *= a
        leftover = background * (1.0 - acc)
        pixels[r, 0] = p0 + leftover
        pixels[r, 1] = p1 + leftover
        pixels[r, 2] = p2 + leftover


def composite_backward_numpy(sigma, rgb, delta, trans, weights, background, dpixels):
    """Gradients of composite_forward w.r.t. per-sample sigma and rgb.

    dpixels: (rays, 3) upstream gradient. Returns (dsigma, drgb).
    """
    att = np.exp(-sigma * delta)
    u = np.einsum("rsc,rc->rs", rgb, dpixels)
    u -= background * dpixels.sum(axis=1)[:, None]
    wu = weights * u
    suffix = np.cumsum(wu[:, ::-1], axis=1)[:, ::-1] - wu
    dsigma = delta * (trans * att * u - suffix)
    drgb = weights[:, :, None] * dpixels[:, None, :]
    return dsigma, drgb


def _composite_backward_impl(sigma, rgb, delta, trans, weights, background,
                             dpixels, dsigma, drgb):
    n_rays, n_samples = sigma.shape
    for r in range(n_rays):
        d0 = dpixels[r, 0]
        d1 = dpixels[r, 1]
        d2 = dpixels[r, 2]
        bg_dot = background * (d0 + d1 + d2)
        suffix = 0.0
        for i in range(n_samples - 1, -1, -1):
            u = rgb[r, i, 0] * d0 + rgb[r, i, 1] * d1 + rgb[r, i, 2] * d2 - bg_dot
            a = np.exp(-sigma[r, i] * delta[r, i])
            w = weights[r, i]
            dsigma[r, i] = delta[r, i] * (trans[r, i] * a * u - suffix)
            drgb[r, i, 0] = w * d0
            drgb[r, i, 1] = w * d1
            drgb[r, i, 2] = w * d2
            suffix += w * u


# ---------------------------------------------------------------------------
# AdamW parameter update
# ---------------------------------------------------------------------------

def adamw_update_numpy(param, grad, m, v, lr, beta1, beta2, eps, weight_decay,
                       inv_bc1, inv_bc2):
    """One decoupled-weight-decay Adam step, in place, on flat arrays.

    inv_bc1/inv_bc2 are the bias-correction factors 1/(1-beta^t) for the
    current step count t.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    step = (m * inv_bc1) / (np.sqrt(v * inv_bc2) + eps)
    if weight_decay != 0.0:
        step += weight_decay * param
    param -= lr * step


def _adamw_update_impl(param, grad, m, v, lr, beta1, beta2, eps, weight_decay,
                       inv_bc1, inv_bc2):
    for i in range(param.shape[0]):
        g = grad[i]
        mi = beta1 * m[i] + (1.0 - beta1) * g
        vi = beta2 * v[i] + (1.0 - beta2) * g * g
        m[i] = mi
        v[i] = vi
        step = (mi * inv_bc1) / (np.sqrt(vi * inv_bc2) + eps)
        if weight_decay != 0.0:
            step += weight_decay * param[i]
        param[i] -= lr * step


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    _fourier_features_jit = njit(cache=True)(_fourier_features_impl)
    _composite_forward_jit = njit(cache=True)(_composite_forward_impl)
    _composite_backward_jit = njit(cache=True)(_composite_backward_impl)
    _adamw_update_jit = njit(cache=True)(_adamw_update_impl)
    _bias_act_jit = njit(cache=True)(_bias_act_impl)
    _act_backward_jit = njit(cache=True)(_act_backward_impl)

    def bias_act_jit(z, bias, act):
        _bias_act_jit(z, bias, act)
        return z

    def act_backward_jit(dy, activated, act):
        if act == ACT_IDENTITY:
            return dy
        out = np.empty_like(dy)
        _act_backward_jit(dy, activated, act, out)
        return out

    def fourier_features_jit(x, n_freqs):
        batch, dim = x.shape
        out = np.empty((batch, 2 * n_freqs * dim), dtype=x.dtype)
        if n_freqs > 0:
            _fourier_features_jit(x, n_freqs, out)
        return out

    def composite_forward_jit(sigma, rgb, delta, background):
        pixels = np.empty((sigma.shape[0], 3), dtype=sigma.dtype)
        weights = np.empty_like(sigma)
        trans = np.empty_like(sigma)
        _composite_forward_jit(sigma, rgb, delta, background, pixels, weights, trans)
        return pixels, weights, trans

    def composite_backward_jit(sigma, rgb, delta, trans, weights, background, dpixels):
        dsigma = np.empty_like(sigma)
        drgb = np.empty_like(rgb)
        _composite_backward_jit(sigma, rgb, delta, trans, weights, background,
                                dpixels, dsigma, drgb)
        return dsigma, drgb

    def adamw_update_jit(param, grad, m, v, lr, beta1, beta2, eps, weight_decay,
                         inv_bc1, inv_bc2):
        _adamw_update_jit(param, grad, m, v, lr, beta1, beta2, eps, weight_decay,
                          inv_bc1, inv_bc2)

    fourier_features = fourier_features_jit
    composite_forward = composite_forward_jit
    composite_backward = composite_backward_jit
    adamw_update = adamw_update_jit
    bias_act = bias_act_jit
    act_backward = act_backward_jit
else:
    fourier_features = fourier_features_numpy
    composite_forward = composite_forward_numpy
    composite_backward = composite_backward_numpy
    adamw_update = adamw_update_numpy
    bias_act = bias_act_numpy
    act_backward = act_backward_numpy
