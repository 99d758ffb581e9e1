"""Pinhole cameras, ray generation, depth sampling and volume rendering.

Rays follow the convention that the camera looks down -z in its own
frame. Depth samples along a ray are stratum midpoints (deterministic)
or one uniform draw per stratum (stratified); the spacing after the last
sample is an effectively-infinite sentinel so the final sample absorbs
whatever transmittance remains. Compositing is the usual emission-
absorption sum; with the white-background flag the leftover transmittance
is filled with white instead of black.

Rendering is pure over its inputs: stratified jitter for a whole image
is drawn up front indexed by ray, so chunk size never changes a pixel.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels

DELTA_SENTINEL = 1e10


@dataclass
class Camera:
    """Camera-to-world pose plus pinhole intrinsics (pixels)."""

    c2w: np.ndarray
    focal: float
    width: int
    height: int
    cx: float = None
    cy: float = None

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise ValueError("pose must be a 4x4 camera-to-world matrix")
        rot = self.c2w[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("pose rotation block is not orthonormal")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0


@dataclass
class RayBatch:
    """Origins, unit directions and per-ray near/far bounds."""

    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self):
        return self.origins.shape[0]


@dataclass
class RenderConfig:
    n_samples: int = 64
    stratified: bool = False
    white_background: bool = True
    chunk_size: int = 16384

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("need at least one sample per ray")


def generate_rays(camera, pixels, near=0.5, far=3.5):
    """Rays through continuous pixel coordinates (px, py).

    Integer pixel (i, j) should be queried at its center (i+0.5, j+0.5);
    passing exactly (cx, cy) yields the optical axis. Directions are
    unit-norm in world space.
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if px.shape[1] != 2:
        raise ValueError("pixels must be (K, 2) coordinates")
    if (
        (px[:, 0] < 0).any() or (px[:, 0] > camera.width).any()
        or (px[:, 1] < 0).any() or (px[:, 1] > camera.height).any()
    ):
        raise ValueError("pixel coordinates out of image bounds")
    if not (0 <= near < far):
        raise ValueError("need 0 <= near < far")
    cam_dirs = np.stack(
        [
            (px[:, 0] - camera.cx) / camera.focal,
            -(px[:, 1] - camera.cy) / camera.focal,
            -np.ones(px.shape[0]),
        ],
        axis=1,
    )
    world = cam_dirs @ camera.c2w[:3, :3].T
    world /= np.linalg.norm(world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.c2w[:3, 3], world.shape).copy()
    k = px.shape[0]
    return RayBatch(origins, world, np.full(k, near), np.full(k, far))


def full_image_rays(camera, near=0.5, far=3.5):
    """One ray per pixel center, row-major over the image grid."""
    jj, ii = np.mgrid[0:camera.height, 0:camera.width]
    pixels = np.stack([ii.ravel() + 0.5, jj.ravel() + 0.5], axis=1)
    return generate_rays(camera, pixels, near, far)


def sample_depths(rays, config, rng=None, jitter=None):
    """Depths and spacings along each ray.

    Deterministic mode places samples at stratum midpoints; stratified
    mode draws one uniform per stratum (pass jitter (K, P) in [0,1) to
    make the draw explicit, e.g. precomputed per image). The final
    spacing is the DELTA_SENTINEL.
    """
    k = len(rays)
    p = config.n_samples
    if config.stratified:
        if jitter is None:
            if rng is None:
                raise ValueError("stratified sampling needs an rng or jitter")
            jitter = rng.random((k, p))
        offsets = jitter
    else:
        offsets = np.full((k, p), 0.5)
    span = (rays.far - rays.near)[:, None]
    t = rays.near[:, None] + (np.arange(p)[None, :] + offsets) / p * span
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = DELTA_SENTINEL
    return t, delta


def ray_points(rays, t):
    """World-space sample positions, (K, P, 3)."""
    return rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]


def transmittance(sigma, delta):
    """Fraction of light surviving up to each sample.

    T[0] = 1 and T[i+1] = T[i] * exp(-sigma[i] * delta[i]) exactly as
    evaluated, so the sequence telescopes and is non-increasing.
    """
    sig = np.atleast_2d(sigma)
    dl = np.atleast_2d(delta)
    if (sig < 0).any():
        raise ValueError("negative density")
    if (dl <= 0).any():
        raise ValueError("spacings must be positive")
    att = np.exp(-sig * dl)
    trans = np.ones_like(att)
    np.cumprod(att[:, :-1], axis=1, out=trans[:, 1:])
    return trans[0] if np.ndim(sigma) == 1 else trans


def composite_ray(sigma, rgb, delta, white_background=True):
    """Emission-absorption compositing of one ray or a batch of rays.

    Returns pixel colors clipped to [0, 1]; sample colors must already
    be in [0, 1] so the pre-clip value is in range up to rounding.
    """
    single = np.ndim(sigma) == 1
    sig = np.ascontiguousarray(np.atleast_2d(sigma))
    dl = np.ascontiguousarray(np.atleast_2d(delta), dtype=sig.dtype)
    col = np.ascontiguousarray(
        rgb.reshape(sig.shape[0], sig.shape[1], 3), dtype=sig.dtype
    )
    if (sig < 0).any():
        raise ValueError("negative density")
    bg = 1.0 if white_background else 0.0
    pixels, _, _ = kernels.composite_forward(sig, col, dl, bg)
    np.clip(pixels, 0.0, 1.0, out=pixels)
    return pixels[0] if single else pixels


def render_rays(field_fn, rays, config, rng=None, jitter=None):
    """Composite a ray batch against a field evaluator.

    field_fn(x (B,3), d (B,3)) -> (rgb (B,3), sigma (B,)). Evaluation is
    chunked by config.chunk_size; chunking never changes pixel values.
    """
    t, delta = sample_depths(rays, config, rng=rng, jitter=jitter)
    k, p = t.shape
    pixels = np.empty((k, 3), dtype=np.float32)
    bg = 1.0 if config.white_background else 0.0
    rays_per_chunk = max(1, config.chunk_size // p)
    for start in range(0, k, rays_per_chunk):
        stop = min(start + rays_per_chunk, k)
        pts = ray_points(
            RayBatch(rays.origins[start:stop], rays.dirs[start:stop],
                     rays.near[start:stop], rays.far[start:stop]),
            t[start:stop],
        ).reshape(-1, 3)
        dirs = np.repeat(rays.dirs[start:stop], p, axis=0)
        rgb, sigma = field_fn(pts, dirs)
        n_rays = stop - start
        chunk_px, _, _ = kernels.composite_forward(
            np.ascontiguousarray(sigma.reshape(n_rays, p), dtype=np.float32),
            np.ascontiguousarray(rgb.reshape(n_rays, p, 3), dtype=np.float32),
            np.ascontiguousarray(delta[start:stop], dtype=np.float32),
            bg,
        )
        pixels[start:stop] = chunk_px
    np.clip(pixels, 0.0, 1.0, out=pixels)
    return pixels


def render_image(field_fn, camera, config, rng=None, near=0.5, far=3.5):
    """Render a full image; deterministic given (field, camera, jitter)."""
    rays = full_image_rays(camera, near, far)
    jitter = None
    if config.stratified:
        if rng is None:
            raise ValueError("stratified rendering needs an rng")
        jitter = rng.random((len(rays), config.n_samples))
    pixels = render_rays(field_fn, rays, config, jitter=jitter)
    return pixels.reshape(camera.height, camera.width, 3)
