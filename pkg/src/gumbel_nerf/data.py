"""Procedural multi-part toy objects with an analytic ground-truth field.

Each toy instance is a car-like composite of primitives — one body box,
usually a cabin box, four wheel spheres — randomized per instance and
kept inside the unit cube centered at the origin. The instance doubles
as an analytic radiance field: density and albedo are piecewise constant,
taken from the first part (in fixed part order) containing the query
point, and zero/black outside all parts.

Datasets are rendered from this oracle and stored on disk as

    <root>/intrinsics.txt                      focal cx cy width height
    <root>/<split>/<instance_id>/rgb/<view>.png
    <root>/<split>/<instance_id>/pose/<view>.txt   row-major 4x4, one line

with random viewpoints for train instances and a spiral sweep for test
instances, all looking at the origin. Loads are read-only and shareable.
"""

import dataclasses
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .rendering import Camera, RenderConfig, render_image


# ---------------------------------------------------------------------------
# Toy geometry
# ---------------------------------------------------------------------------

@dataclass
class Part:
    """A primitive with constant albedo and density.

    size by kind: box -> half extents (3,), sphere -> (radius,),
    cylinder -> (radius, half_height) around a z-aligned axis.
    """

    kind: str
    center: np.ndarray
    size: np.ndarray
    albedo: np.ndarray
    density: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.kind not in ("box", "sphere", "cylinder"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.density <= 0:
            raise ValueError("part density must be positive")
        if ((self.albedo < 0) | (self.albedo > 1)).any():
            raise ValueError("albedo must lie in [0, 1]")

    def contains(self, points):
        rel = np.atleast_2d(points) - self.center
        if self.kind == "box":
            return (np.abs(rel) <= self.size).all(axis=1)
        if self.kind == "sphere":
            return (rel * rel).sum(axis=1) <= self.size[0] ** 2
        radial = rel[:, 0] ** 2 + rel[:, 1] ** 2 <= self.size[0] ** 2
        return radial & (np.abs(rel[:, 2]) <= self.size[1])

    def bounds(self):
        """Axis-aligned (lo, hi) corners of the part."""
        if self.kind == "box":
            half = self.size
        elif self.kind == "sphere":
            half = np.full(3, self.size[0])
        else:
            half = np.array([self.size[0], self.size[0], self.size[1]])
        return self.center - half, self.center + half


@dataclass
class ToyInstanceSpec:
    """An ordered part list; earlier parts win containment ties."""

    instance_id: str
    parts: list
    seed: int = 0

    def validate(self):
        for part in self.parts:
            lo, hi = part.bounds()
            if (lo < -0.5).any() or (hi > 0.5).any():
                raise ValueError(
                    f"part of {self.instance_id!r} leaves the unit cube"
                )


@dataclass
class CarFamily:
    """Sampling ranges for the car-like toy family (scene-length units)."""

    body_half_length: tuple = (0.26, 0.38)
    body_half_width: tuple = (0.12, 0.17)
    body_half_height: tuple = (0.07, 0.11)
    wheel_radius: tuple = (0.05, 0.08)
    cabin_prob: float = 0.8
    density: tuple = (40.0, 120.0)


def generate_instance(family, rng, instance_id, seed=0):
    """Deterministic car-like composite for a given rng state."""
    u = lambda lo_hi: float(rng.uniform(*lo_hi))
    hx = u(family.body_half_length)
    hy = u(family.body_half_width)
    hz = u(family.body_half_height)
    wheel_r = u(family.wheel_radius)

    body_color = rng.uniform(0.15, 0.95, 3)
    # push toward a saturated hue so instances are visually distinct
    body_color[int(rng.integers(3))] = rng.uniform(0.7, 1.0)
    wheel_color = np.full(3, rng.uniform(0.03, 0.15))
    parts = [
        Part("box", (0.0, 0.0, 0.0), (hx, hy, hz), body_color,
             u(family.density))
    ]
    if rng.random() < family.cabin_prob:
        cab_h = rng.uniform(0.05, 0.08)
        cab_x = rng.uniform(-0.10, 0.04)
        cabin_color = rng.uniform(0.25, 0.9, 3)
        parts.append(
            Part("box", (cab_x, 0.0, hz + cab_h),
                 (0.45 * hx, 0.8 * hy, cab_h), cabin_color,
                 u(family.density))
        )
    wheel_x = hx - wheel_r
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            parts.append(
                Part("sphere", (sx * wheel_x, sy * hy, -hz), (wheel_r,),
                     wheel_color, u(family.density))
            )
    spec = ToyInstanceSpec(instance_id, parts, seed)
    spec.validate()
    return spec


def oracle_eval(spec, points):
    """(albedo, density) of the first containing part; zeros outside."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not np.isfinite(pts).all():
        raise ValueError("non-finite query point")
    rgb = np.zeros((pts.shape[0], 3))
    sigma = np.zeros(pts.shape[0])
    unassigned = np.ones(pts.shape[0], dtype=bool)
    for part in spec.parts:
        hit = unassigned & part.contains(pts)
        rgb[hit] = part.albedo
        sigma[hit] = part.density
        unassigned &= ~hit
    if np.ndim(points) == 1:
        return rgb[0], sigma[0]
    return rgb, sigma


def oracle_field(spec):
    """Field evaluator (x, d) -> (rgb, sigma) backed by the oracle."""

    def field_fn(x, d):
        rgb, sigma = oracle_eval(spec, x)
        return rgb.astype(np.float32), sigma.astype(np.float32)

    return field_fn


# ---------------------------------------------------------------------------
# Camera rigs
# ---------------------------------------------------------------------------

def look_at_pose(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose at `position` looking at `target` (down -z)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position coincides with target")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        right = np.cross(forward, (0.0, 1.0, 0.0))
        rnorm = np.linalg.norm(right)
    right /= rnorm
    true_up = np.cross(right, forward)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = -forward
    c2w[:3, 3] = position
    return c2w


def _sphere_position(azimuth, elevation, radius):
    ce = np.cos(elevation)
    return radius * np.array(
        [ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)]
    )


def random_rig(n_views, rng, radius=1.8, elevation_deg=(-15.0, 70.0)):
    """Random viewpoints on a sphere cap, all looking at the origin."""
    poses = []
    lo, hi = np.deg2rad(elevation_deg[0]), np.deg2rad(elevation_deg[1])
    for _ in range(n_views):
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        elevation = rng.uniform(lo, hi)
        poses.append(look_at_pose(_sphere_position(azimuth, elevation, radius)))
    return poses


def spiral_rig(n_views, radius=1.8, turns=2.5, elevation_deg=(-10.0, 70.0)):
    """Archimedean-spiral sweep: azimuth winds while elevation climbs."""
    poses = []
    lo, hi = np.deg2rad(elevation_deg[0]), np.deg2rad(elevation_deg[1])
    denom = max(1, n_views - 1)
    for k in range(n_views):
        s = k / denom
        azimuth = 2.0 * np.pi * turns * s
        elevation = lo + (hi - lo) * s
        poses.append(look_at_pose(_sphere_position(azimuth, elevation, radius)))
    return poses


def make_camera(c2w, resolution, focal_scale=1.2):
    return Camera(c2w, focal=focal_scale * resolution,
                  width=resolution, height=resolution)


# ---------------------------------------------------------------------------
# Image / pose / intrinsics files
# ---------------------------------------------------------------------------

def write_png(path, image):
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def read_png(path):
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_pose(path, c2w):
    with open(path, "w") as fh:
        fh.write(" ".join(repr(float(v)) for v in np.asarray(c2w).ravel()) + "\n")


def read_pose(path):
    with open(path) as fh:
        values = fh.read().split()
    if len(values) != 16:
        raise ValueError(f"{path}: expected 16 pose numbers, got {len(values)}")
    return np.array([float(v) for v in values]).reshape(4, 4)


def write_intrinsics(path, focal, cx, cy, width, height):
    with open(path, "w") as fh:
        fh.write(f"{focal!r} {cx!r} {cy!r} {width} {height}\n")


def read_intrinsics(path):
    with open(path) as fh:
        values = fh.read().split()
    if len(values) != 5:
        raise ValueError(f"{path}: expected 5 intrinsics numbers")
    return (float(values[0]), float(values[1]), float(values[2]),
            int(values[3]), int(values[4]))


# ---------------------------------------------------------------------------
# Dataset on disk
# ---------------------------------------------------------------------------

@dataclass
class InstanceViews:
    instance_id: str
    split: str
    images: np.ndarray      # (V, H, W, 3) float32 in [0, 1]
    cameras: list


@dataclass
class Dataset:
    root: str
    intrinsics: tuple       # (focal, cx, cy, width, height)
    train: list
    test: list

    @property
    def resolution(self):
        return self.intrinsics[3]

    def find(self, instance_id):
        for inst in self.train + self.test:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(f"no instance {instance_id!r} in dataset")


def render_dataset(specs, cameras_per_instance, config, out_root, split):
    """Render oracle views and write them in the documented layout."""
    os.makedirs(out_root, exist_ok=True)
    for spec, cameras in zip(specs, cameras_per_instance):
        inst_dir = os.path.join(out_root, split, spec.instance_id)
        rgb_dir = os.path.join(inst_dir, "rgb")
        pose_dir = os.path.join(inst_dir, "pose")
        os.makedirs(rgb_dir, exist_ok=True)
        os.makedirs(pose_dir, exist_ok=True)
        field_fn = oracle_field(spec)
        for v, camera in enumerate(cameras):
            image = render_image(field_fn, camera, config)
            write_png(os.path.join(rgb_dir, f"{v:03d}.png"), image)
            write_pose(os.path.join(pose_dir, f"{v:03d}.txt"), camera.c2w)


def generate_dataset(out_root, n_train=8, n_test=2, n_views=20, resolution=64,
                     seed=0, n_samples=192, family=None):
    """Generate specs, rigs and rendered views for both splits."""
    family = family or CarFamily()
    seq = np.random.SeedSequence(seed)
    spec_seq, train_rig_seq = seq.spawn(2)
    spec_rng = np.random.default_rng(spec_seq)
    rig_rng = np.random.default_rng(train_rig_seq)

    train_specs = [
        generate_instance(family, spec_rng, f"car_{i:03d}", seed)
        for i in range(n_train)
    ]
    test_specs = [
        generate_instance(family, spec_rng, f"car_{n_train + i:03d}", seed)
        for i in range(n_test)
    ]
    config = RenderConfig(n_samples=n_samples, stratified=False,
                          white_background=True)
    train_cams = [
        [make_camera(p, resolution) for p in random_rig(n_views, rig_rng)]
        for _ in train_specs
    ]
    spiral = [make_camera(p, resolution) for p in spiral_rig(n_views)]
    test_cams = [spiral for _ in test_specs]

    os.makedirs(out_root, exist_ok=True)
    cam0 = (train_cams + test_cams)[0][0]
    write_intrinsics(
        os.path.join(out_root, "intrinsics.txt"),
        cam0.focal, cam0.cx, cam0.cy, cam0.width, cam0.height,
    )
    render_dataset(train_specs, train_cams, config, out_root, "train")
    render_dataset(test_specs, test_cams, config, out_root, "test")
    return train_specs, test_specs


def _load_instance(inst_dir, instance_id, split, intrinsics):
    focal, cx, cy, width, height = intrinsics
    rgb_dir = os.path.join(inst_dir, "rgb")
    pose_dir = os.path.join(inst_dir, "pose")
    if not os.path.isdir(rgb_dir) or not os.path.isdir(pose_dir):
        raise ValueError(f"{inst_dir}: missing rgb/ or pose/ directory")
    views = sorted(
        os.path.splitext(name)[0]
        for name in os.listdir(rgb_dir)
        if name.endswith(".png")
    )
    if not views:
        raise ValueError(f"{rgb_dir}: no views found")
    images, cameras = [], []
    for view in views:
        png_path = os.path.join(rgb_dir, f"{view}.png")
        pose_path = os.path.join(pose_dir, f"{view}.txt")
        if not os.path.isfile(pose_path):
            raise ValueError(f"{png_path}: missing pose file {pose_path}")
        image = read_png(png_path)
        if image.shape != (height, width, 3):
            raise ValueError(
                f"{png_path}: resolution {image.shape[1]}x{image.shape[0]} "
                f"does not match intrinsics {width}x{height}"
            )
        images.append(image)
        cameras.append(
            Camera(read_pose(pose_path), focal, width, height, cx, cy)
        )
    return InstanceViews(instance_id, split, np.stack(images), cameras)


def load_dataset(root):
    """Load and validate a dataset directory tree."""
    intr_path = os.path.join(root, "intrinsics.txt")
    if not os.path.isfile(intr_path):
        raise ValueError(f"{root}: missing intrinsics.txt")
    intrinsics = read_intrinsics(intr_path)
    splits = {"train": [], "test": []}
    for split in splits:
        split_dir = os.path.join(root, split)
        if not os.path.isdir(split_dir):
            continue
        for instance_id in sorted(os.listdir(split_dir)):
            inst_dir = os.path.join(split_dir, instance_id)
            if os.path.isdir(inst_dir):
                splits[split].append(
                    _load_instance(inst_dir, instance_id, split, intrinsics)
                )
    if not splits["train"] and not splits["test"]:
        raise ValueError(f"{root}: no instances found")
    return Dataset(root, intrinsics, splits["train"], splits["test"])
