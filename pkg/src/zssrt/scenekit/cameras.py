"""Camera poses and ray generation.

Cameras follow the OpenGL/Blender convention: the camera looks down its
local -z axis, +x points right and +y points up in the image. Poses are
stored as 4x4 camera-to-world matrices.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError

ORTHO_TOL = 1e-6
MIN_SIDE = 8


@dataclass(frozen=True)
class CameraPose:
    """A posed pinhole camera.

    cam_to_world: (4, 4) rigid transform, rotation part orthonormal.
    fov_x: full horizontal field of view in radians.
    width, height: image size in pixels at the native (x1) resolution.
    """

    cam_to_world: np.ndarray
    fov_x: float
    width: int
    height: int

    def __post_init__(self):
        m = np.asarray(self.cam_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValidationError(f"cam_to_world must be 4x4, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=ORTHO_TOL):
            raise ValidationError("cam_to_world last row must be [0, 0, 0, 1]")
        r = m[:3, :3]
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > ORTHO_TOL:
            raise ValidationError(f"rotation not orthonormal (deviation {err:.3e})")
        if not np.isfinite(m).all():
            raise ValidationError("cam_to_world contains non-finite values")
        if not (0.0 < float(self.fov_x) < np.pi):
            raise ValidationError(f"fov_x must lie in (0, pi), got {self.fov_x}")
        if self.width < MIN_SIDE or self.height < MIN_SIDE:
            raise ValidationError(
                f"image size must be at least {MIN_SIDE}px per side, got "
                f"{self.width}x{self.height}"
            )
        object.__setattr__(self, "cam_to_world", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    @property
    def focal(self) -> float:
        """Focal length in pixels at the native resolution."""
        return 0.5 * self.width / np.tan(0.5 * self.fov_x)

    @property
    def forward(self) -> np.ndarray:
        """Unit viewing direction in world space (camera -z)."""
        return -self.rotation[:, 2]

    def scaled(self, s: int) -> "CameraPose":
        """The same camera with an s-times denser pixel grid."""
        return CameraPose(self.cam_to_world, self.fov_x, self.width * s, self.height * s)


def _pixel_dirs(pose: CameraPose, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """World-space unit directions through image-plane points (xs, ys).

    xs, ys are in native pixel units (continuous, origin at the top-left
    corner of the image, x to the right, y downward).
    """
    f = pose.focal
    dx = (xs - 0.5 * pose.width) / f
    dy = -(ys - 0.5 * pose.height) / f
    dz = -np.ones_like(dx)
    cam = np.stack([dx, dy, dz], axis=-1)
    world = cam @ pose.rotation.T
    world /= np.linalg.norm(world, axis=-1, keepdims=True)
    return world


def gen_rays(pose: CameraPose, s: int = 1):
    """Rays through every sub-pixel center of the camera at scale factor s.

    Sub-pixel (k, l) of native pixel (u, v) gets the ray through image-plane
    point (u + (k + 0.5) / s, v + (l + 0.5) / s); s=1 is the usual
    pixel-center offset of 0.5. Returns (origins, dirs), each of shape
    (s*H, s*W, 3); directions are unit length.
    """
    if s < 1 or int(s) != s:
        raise ValidationError(f"scale factor must be a positive integer, got {s}")
    s = int(s)
    h, w = pose.height * s, pose.width * s
    js = (np.arange(w, dtype=np.float64) + 0.5) / s
    is_ = (np.arange(h, dtype=np.float64) + 0.5) / s
    xs, ys = np.meshgrid(js, is_, indexing="xy")
    dirs = _pixel_dirs(pose, xs, ys)
    origins = np.broadcast_to(pose.origin, dirs.shape).copy()
    return origins, dirs


def rays_for_patch(pose: CameraPose, u: int, v: int, p: int, s: int = 1):
    """Rays covering the native-pixel box [u, u+p) x [v, v+p) at scale s.

    Equivalent to slicing gen_rays(pose, s) at [v*s:(v+p)*s, u*s:(u+p)*s]
    without materializing the full grid. Returns (origins, dirs) of shape
    (p*s, p*s, 3).
    """
    if not (0 <= u and u + p <= pose.width and 0 <= v and v + p <= pose.height):
        raise ValidationError(
            f"patch [{u},{u + p})x[{v},{v + p}) exceeds image {pose.width}x{pose.height}"
        )
    s = int(s)
    js = u + (np.arange(p * s, dtype=np.float64) + 0.5) / s
    is_ = v + (np.arange(p * s, dtype=np.float64) + 0.5) / s
    xs, ys = np.meshgrid(js, is_, indexing="xy")
    dirs = _pixel_dirs(pose, xs, ys)
    origins = np.broadcast_to(pose.origin, dirs.shape).copy()
    return origins, dirs


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at eye looking toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = eye - target
    z = z / np.linalg.norm(z)
    x = np.cross(up, z)
    n = np.linalg.norm(x)
    if n < 1e-9:  # looking straight along up; pick an arbitrary right vector
        x = np.cross(np.array([0.0, 1.0, 0.0]), z)
        n = np.linalg.norm(x)
    x = x / n
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0] = x
    m[:3, 1] = y
    m[:3, 2] = z
    m[:3, 3] = eye
    return m
