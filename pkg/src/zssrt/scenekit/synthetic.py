"""Procedural test scenes with an exact analytic renderer.

Scenes are a handful of Lambertian boxes and spheres inside a fixed cube.
The analytic renderer intersects rays in closed form and antialiases with a
small Gaussian-weighted sub-pixel tap grid, so images of the same scene can
be produced at any resolution from one consistent camera model. Shading is
view independent on purpose: multi-view color consistency of the scene is
exact, which makes these scenes usable as oracles.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ConfigurationError
from .cameras import CameraPose, look_at
from .dataset import AA_SIGMA

BOUNDS_MIN = (-1.5, -1.5, -1.5)
BOUNDS_MAX = (1.5, 1.5, 1.5)
LIGHT_DIR = np.array([0.38, 0.21, 0.90])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.35
DIFFUSE = 0.65
AA_TAPS = 5  # tap grid per axis; the taps weight a Gaussian of AA_SIGMA pixels
AA_SPAN = 1.0  # tap grid reaches this far into neighboring pixels
CAPTURE_NOISE = 0.0  # optional sensor noise sigma on captured views, in [0, 1] units
CAMERA_RADIUS = 3.6
FOV_X = 0.82


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray
    albedo_a: np.ndarray
    albedo_b: np.ndarray
    pattern: str = "solid"  # solid | stripes | checker
    axis: int = 0
    period: float = 0.25

    def contains(self, pts):
        return (np.abs(pts - self.center) <= self.half + 1e-12).all(axis=-1)

    def sdf(self, pts):
        q = np.abs(pts - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def normals(self, pts):
        rel = (pts - self.center) / self.half
        axis = np.argmax(np.abs(rel), axis=-1)
        n = np.zeros_like(pts)
        n[np.arange(len(pts)), axis] = np.sign(rel[np.arange(len(pts)), axis])
        return n

    def albedo(self, pts):
        return _patterned_albedo(self, pts)

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
        t0 = (self.center - self.half - o) * inv
        t1 = (self.center + self.half - o) * inv
        tlo = np.minimum(t0, t1)
        thi = np.maximum(t0, t1)
        # rays parallel to a slab: inside -> (-inf, inf), outside -> no hit
        par = np.abs(d) < 1e-12
        if par.any():
            inside = np.abs(o - self.center) <= self.half
            tlo = np.where(par, np.where(inside, -np.inf, np.inf), tlo)
            thi = np.where(par, np.where(inside, np.inf, -np.inf), thi)
        tnear = tlo.max(axis=-1)
        tfar = thi.min(axis=-1)
        t = np.where(tnear > 1e-6, tnear, tfar)
        hit = (tfar >= np.maximum(tnear, 1e-6)) & (t > 1e-6)
        return hit, np.where(hit, t, np.inf)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo_a: np.ndarray
    albedo_b: np.ndarray
    pattern: str = "solid"
    axis: int = 2
    period: float = 0.2

    def contains(self, pts):
        return ((pts - self.center) ** 2).sum(axis=-1) <= self.radius**2 + 1e-12

    def sdf(self, pts):
        return np.linalg.norm(pts - self.center, axis=-1) - self.radius

    def normals(self, pts):
        n = pts - self.center
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)

    def albedo(self, pts):
        return _patterned_albedo(self, pts)

    def intersect(self, o, d):
        oc = o - self.center
        b = (oc * d).sum(axis=-1)
        c = (oc * oc).sum(axis=-1) - self.radius**2
        disc = b * b - c
        ok = disc >= 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-6, t0, t1)
        hit = ok & (t > 1e-6)
        return hit, np.where(hit, t, np.inf)


def _patterned_albedo(prim, pts):
    a = np.broadcast_to(prim.albedo_a, pts.shape).copy()
    if prim.pattern == "solid":
        return a
    if prim.pattern == "stripes":
        phase = pts[..., prim.axis] / prim.period
        sel = np.floor(phase).astype(np.int64) % 2 == 0
    elif prim.pattern == "checker":
        ij = np.floor(pts[..., :2] / prim.period).astype(np.int64)
        sel = (ij.sum(axis=-1) % 2) == 0
    else:
        raise ConfigurationError(f"unknown pattern {prim.pattern!r}")
    b = np.broadcast_to(prim.albedo_b, pts.shape)
    a[~sel] = b[~sel]
    return a


@dataclass
class Scene:
    primitives: list
    background: np.ndarray
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    seed: int

    def shade_points(self, pts, normals):
        """Lambertian shading with a fixed directional light, range (0, 1]."""
        lam = AMBIENT + DIFFUSE * np.maximum(0.0, normals @ LIGHT_DIR)
        colors = np.zeros_like(pts)
        owner = self._owner(pts)
        for k, prim in enumerate(self.primitives):
            m = owner == k
            if m.any():
                colors[m] = prim.albedo(pts[m])
        return np.clip(colors * lam[..., None], 0.0, 1.0)

    def _owner(self, pts):
        owner = np.full(len(pts), -1, dtype=np.int64)
        for k, prim in enumerate(self.primitives):
            m = prim.contains(pts) & (owner < 0)
            owner[m] = k
        return owner

    def trace(self, origins, dirs):
        """Nearest-hit trace. Returns (colors, hit_mask, t)."""
        o = origins.reshape(-1, 3)
        d = dirs.reshape(-1, 3)
        best_t = np.full(len(o), np.inf)
        best_k = np.full(len(o), -1, dtype=np.int64)
        for k, prim in enumerate(self.primitives):
            hit, t = prim.intersect(o, d)
            closer = hit & (t < best_t)
            best_t[closer] = t[closer]
            best_k[closer] = k
        colors = np.broadcast_to(self.background, o.shape).astype(np.float64).copy()
        hit = best_k >= 0
        if hit.any():
            pts = o[hit] + best_t[hit, None] * d[hit]
            for k, prim in enumerate(self.primitives):
                m = best_k[hit] == k
                if m.any():
                    n = prim.normals(pts[m])
                    lam = AMBIENT + DIFFUSE * np.maximum(0.0, n @ LIGHT_DIR)
                    colors[np.flatnonzero(hit)[m]] = np.clip(
                        prim.albedo(pts[m]) * lam[:, None], 0.0, 1.0
                    )
        shape = origins.shape
        return colors.reshape(shape), hit.reshape(shape[:-1]), best_t.reshape(shape[:-1])


def build_scene(seed: int) -> Scene:
    """Deterministic scene from a seed: checkered ground, striped boxes, spheres."""
    rng = np.random.default_rng(seed)

    def color():
        return rng.uniform(0.15, 0.95, size=3)

    prims = [
        Box(
            center=np.array([0.0, 0.0, -1.15]),
            half=np.array([1.35, 1.35, 0.15]),
            albedo_a=np.array([0.85, 0.85, 0.82]),
            albedo_b=np.array([0.25, 0.28, 0.32]),
            pattern="checker",
            period=0.35,
        )
    ]
    for _ in range(3):
        half = rng.uniform(0.14, 0.38, size=3)
        center = np.array(
            [rng.uniform(-0.85, 0.85), rng.uniform(-0.85, 0.85), rng.uniform(-1.0 + half[2], 0.45)]
        )
        prims.append(
            Box(
                center=center,
                half=half,
                albedo_a=color(),
                albedo_b=color(),
                pattern="stripes" if rng.uniform() < 0.8 else "solid",
                axis=int(rng.integers(0, 3)),
                period=float(rng.uniform(0.10, 0.26)),
            )
        )
    for _ in range(2):
        r = float(rng.uniform(0.18, 0.36))
        center = np.array(
            [rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(-1.0 + r, 0.5)]
        )
        prims.append(
            Sphere(
                center=center,
                radius=r,
                albedo_a=color(),
                albedo_b=color(),
                pattern="stripes" if rng.uniform() < 0.6 else "solid",
                axis=int(rng.integers(0, 3)),
                period=float(rng.uniform(0.10, 0.22)),
            )
        )
    return Scene(
        primitives=prims,
        background=np.array([1.0, 1.0, 1.0]),
        bounds_min=np.array(BOUNDS_MIN),
        bounds_max=np.array(BOUNDS_MAX),
        seed=seed,
    )


def render_analytic_image(scene: Scene, pose: CameraPose, s: int = 1,
                          taps: int = AA_TAPS, sigma: float = AA_SIGMA) -> np.ndarray:
    """Antialiased analytic render at scale s, shape (s*H, s*W, 3) in [0, 1].

    Each output pixel averages a taps x taps grid of rays with Gaussian
    weights of the given sigma (in output-pixel units). The tap grid spans
    AA_SPAN pixels to either side, so the point-spread function reaches into
    neighboring pixels the way sensor plus optics blur does on a real
    camera. The PSF is self-similar across resolutions: rendering at 2x and
    box downsampling does NOT reproduce the 1x image exactly, which mirrors
    how a camera's sampling differs from naive averaging.
    """
    h, w = pose.height * s, pose.width * s
    f = pose.focal
    js = (np.arange(w, dtype=np.float64) + 0.5) / s
    is_ = (np.arange(h, dtype=np.float64) + 0.5) / s
    xs, ys = np.meshgrid(js, is_, indexing="xy")

    offs = np.linspace(-AA_SPAN, AA_SPAN, taps)  # in output pixels
    wts = np.exp(-(offs**2) / (2.0 * sigma**2))
    acc = np.zeros((h, w, 3))
    total = 0.0
    origin = np.broadcast_to(pose.origin, (h, w, 3))
    for a in range(taps):
        for b in range(taps):
            wt = wts[a] * wts[b]
            dx = (xs + offs[b] / s - 0.5 * pose.width) / f
            dy = -(ys + offs[a] / s - 0.5 * pose.height) / f
            d = np.stack([dx, dy, -np.ones_like(dx)], axis=-1)
            d = d @ pose.rotation.T
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
            colors, _, _ = scene.trace(origin, d)
            acc += wt * colors
            total += wt
    return acc / total


def hemisphere_poses(rng: np.random.Generator, n: int, width: int, height: int,
                     radius: float = CAMERA_RADIUS, fov_x: float = FOV_X):
    """n cameras on the upper hemisphere looking at the origin."""
    poses = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    az0 = rng.uniform(0.0, 2 * np.pi)
    for i in range(n):
        az = az0 + golden * i + rng.uniform(-0.08, 0.08)
        el = rng.uniform(np.deg2rad(24.0), np.deg2rad(56.0))
        eye = radius * np.array(
            [np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)]
        )
        poses.append(CameraPose(look_at(eye, np.zeros(3)), fov_x, width, height))
    return poses


def sample_probe_points(scene: Scene, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points on primitive surfaces, biased away from the ground slab."""
    pts = []
    first = 1 if len(scene.primitives) > 1 else 0
    while len(pts) < n:
        k = int(rng.integers(first, len(scene.primitives)))
        prim = scene.primitives[k]
        if isinstance(prim, Sphere):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            p = prim.center + prim.radius * d
        else:
            axis = int(rng.integers(0, 3))
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
            p = prim.center + rng.uniform(-1.0, 1.0, size=3) * prim.half
            p[axis] = prim.center[axis] + sign * prim.half[axis]
        # surface point must be unoccluded by any earlier primitive's volume
        if p[2] > -0.9 and scene._owner(p[None])[0] == k:
            pts.append(p)
    return np.array(pts)


def _save_png(path: Path, img: np.ndarray):
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def generate_synthetic_scene(out_dir, seed: int, n_views: int, res: int,
                             n_test: int = 3, scales=(2, 4),
                             noise: float = CAPTURE_NOISE) -> dict:
    """Write a posed multi-view dataset for the scene derived from seed.

    Layout under out_dir:
        transforms.json        train split (camera_angle_x, bounds, frames)
        transforms_test.json   held-out split, same schema
        images/r_???.png       train views at the base resolution
        test/r_???.png         held-out views at the base resolution
        refs_x{s}/r_???.png    held-out views rendered s times larger
        probe_points.json      surface points for cross-view consistency checks

    With noise > 0 the base-resolution views get seeded Gaussian sensor
    noise on top of the optical blur, the way a real low-resolution
    capture would. The refs_x{s} renders are always exact; they exist only
    to evaluate against.

    Everything is a pure function of its arguments, so repeated runs
    produce byte-identical files.
    """
    if n_views < 2:
        raise ConfigurationError(f"need at least 2 views, got {n_views}")
    if res < 32:
        raise ConfigurationError(f"base resolution must be >= 32, got {res}")
    out_dir = Path(out_dir)
    scene = build_scene(seed)
    rng = np.random.default_rng(seed + 1)
    train_poses = hemisphere_poses(rng, n_views, res, res)
    test_poses = hemisphere_poses(rng, n_test, res, res)

    def frame_entries(poses, prefix):
        frames = []
        for i, pose in enumerate(poses):
            frames.append(
                {
                    "file_path": f"{prefix}/r_{i:03d}.png",
                    "transform_matrix": pose.cam_to_world.tolist(),
                }
            )
        return frames

    noise_rng = np.random.default_rng(seed + 3)

    def capture(img):
        if noise <= 0.0:
            return img
        return np.clip(img + noise_rng.normal(0.0, noise, size=img.shape), 0.0, 1.0)

    for i, pose in enumerate(train_poses):
        _save_png(out_dir / "images" / f"r_{i:03d}.png",
                  capture(render_analytic_image(scene, pose)))
    for i, pose in enumerate(test_poses):
        _save_png(out_dir / "test" / f"r_{i:03d}.png",
                  capture(render_analytic_image(scene, pose)))
        for s in scales:
            _save_png(
                out_dir / f"refs_x{s}" / f"r_{i:03d}.png",
                render_analytic_image(scene, pose, s=s),
            )

    bounds = {"min": list(BOUNDS_MIN), "max": list(BOUNDS_MAX)}
    meta = {
        "camera_angle_x": FOV_X,
        "bounds": bounds,
        "frames": frame_entries(train_poses, "images"),
    }
    meta_test = {
        "camera_angle_x": FOV_X,
        "bounds": bounds,
        "frames": frame_entries(test_poses, "test"),
    }
    (out_dir / "transforms.json").write_text(json.dumps(meta, indent=2))
    (out_dir / "transforms_test.json").write_text(json.dumps(meta_test, indent=2))
    probes = sample_probe_points(scene, 16, np.random.default_rng(seed + 2))
    (out_dir / "probe_points.json").write_text(json.dumps({"points": probes.tolist()}, indent=2))
    return {"seed": seed, "n_views": n_views, "res": res, "n_test": n_test,
            "scales": list(scales), "noise": noise}


class AnalyticField:
    """Adapter that exposes a Scene through the field query protocol.

    Density ramps from its full value inside a primitive to zero outside over
    a thin sigmoid shell around the surface, which is what a field converged
    on antialiased images looks like: silhouettes cover pixels fractionally
    instead of flipping on and off. Color at a point is the shaded albedo of
    the nearest primitive. Useful as a rendering oracle: compositing against
    it behaves like an opaque surface whose colors the analytic tracer also
    produces.
    """

    def __init__(self, scene: Scene, density: float = 500.0, near: float = 0.5,
                 far: float = 7.0, edge_width: float = 0.02):
        self.scene = scene
        self.density = density
        self.edge_width = edge_width
        self.bounds = np.stack([scene.bounds_min, scene.bounds_max])
        self.near = near
        self.far = far

    def query(self, x, d=None):
        import torch

        pts = x.detach().cpu().numpy().astype(np.float64).reshape(-1, 3)
        dists = np.stack([prim.sdf(pts) for prim in self.scene.primitives], axis=0)
        owner = np.argmin(dists, axis=0)
        sd = dists[owner, np.arange(pts.shape[0])]
        with np.errstate(over="ignore"):
            sigma = self.density / (1.0 + np.exp(sd / self.edge_width))
        colors = np.zeros_like(pts)
        for k, prim in enumerate(self.scene.primitives):
            m = owner == k
            if m.any():
                n = prim.normals(pts[m])
                lam = AMBIENT + DIFFUSE * np.maximum(0.0, n @ LIGHT_DIR)
                colors[m] = np.clip(prim.albedo(pts[m]) * lam[:, None], 0.0, 1.0)
        sigma_t = torch.from_numpy(sigma).to(x.dtype)
        color_t = torch.from_numpy(colors).to(x.dtype)
        return sigma_t.reshape(x.shape[:-1]), color_t.reshape(x.shape)
