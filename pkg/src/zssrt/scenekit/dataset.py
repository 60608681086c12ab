"""Posed image containers, dataset IO and downsampling operators."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ShapeError, ValidationError
from .cameras import CameraPose

LEVEL_TAGS = ("LR", "LLR", "HR")
DEFAULT_BOUNDS = np.array([[-1.5, -1.5, -1.5], [1.5, 1.5, 1.5]])


@dataclass
class PosedImage:
    """An image with its camera. Pixels are float32 RGB in [0, 1].

    level_tag records where the image sits in the resolution chain:
    LR for captured inputs, LLR for their downsampled versions used as
    degradation-mapping targets, HR for super-resolved outputs.
    """

    pixels: np.ndarray
    pose: CameraPose
    level_tag: str = "LR"

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"pixels must be (H, W, 3), got {px.shape}")
        if px.shape[0] != self.pose.height or px.shape[1] != self.pose.width:
            raise ValidationError(
                f"pixels {px.shape[:2]} disagree with pose {self.pose.height}x{self.pose.width}"
            )
        if self.level_tag not in LEVEL_TAGS:
            raise ValidationError(f"level_tag must be one of {LEVEL_TAGS}, got {self.level_tag!r}")
        px = px.astype(np.float32, copy=False)
        if not np.isfinite(px).all():
            raise ValidationError("pixels contain non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def shape(self):
        return self.pixels.shape


def _read_image(path: Path, background) -> np.ndarray:
    img = Image.open(path)
    if img.mode in ("RGBA", "LA", "PA"):
        arr = np.asarray(img.convert("RGBA"), dtype=np.float32) / 255.0
        rgb, alpha = arr[..., :3], arr[..., 3:4]
        bg = np.asarray(background, dtype=np.float32)
        return rgb * alpha + bg * (1.0 - alpha)
    return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def load_dataset(path, split: str = "train", background=(1.0, 1.0, 1.0)):
    """Load a Blender-layout dataset directory.

    Expects transforms.json (train) or transforms_test.json (test) with
    camera_angle_x and frames[] carrying file_path + transform_matrix. An
    optional bounds field overrides the default scene cube. Alpha images are
    composited over the given background color.

    Returns (images, bounds) where images is a list of PosedImage tagged LR
    and bounds is a (2, 3) array of the scene axis-aligned box.
    """
    root = Path(path)
    name = "transforms.json" if split == "train" else f"transforms_{split}.json"
    meta_path = root / name
    if not meta_path.is_file():
        raise FileNotFoundError(f"no such metadata file: {meta_path}")
    meta = json.loads(meta_path.read_text())
    fov_x = float(meta["camera_angle_x"])
    if "bounds" in meta:
        bounds = np.array([meta["bounds"]["min"], meta["bounds"]["max"]], dtype=np.float64)
    else:
        bounds = DEFAULT_BOUNDS.copy()

    images = []
    for frame in meta["frames"]:
        fp = frame["file_path"]
        img_path = root / fp
        if not img_path.suffix:
            img_path = img_path.with_suffix(".png")
        if not img_path.is_file():
            raise FileNotFoundError(f"no such image file: {img_path}")
        pixels = _read_image(img_path, background)
        pose = CameraPose(
            np.array(frame["transform_matrix"], dtype=np.float64),
            fov_x,
            pixels.shape[1],
            pixels.shape[0],
        )
        images.append(PosedImage(np.clip(pixels, 0.0, 1.0), pose, "LR"))
    return images, bounds


def load_refs(path, scale: int, split: str = "test", background=(1.0, 1.0, 1.0)):
    """High-resolution reference images for a split, scaled poses included."""
    root = Path(path)
    name = "transforms.json" if split == "train" else f"transforms_{split}.json"
    meta_path = root / name
    if not meta_path.is_file():
        raise FileNotFoundError(f"no such metadata file: {meta_path}")
    meta = json.loads(meta_path.read_text())
    fov_x = float(meta["camera_angle_x"])
    refs = []
    for frame in meta["frames"]:
        base = Path(frame["file_path"]).name
        img_path = root / f"refs_x{scale}" / base
        if not img_path.is_file():
            raise FileNotFoundError(f"no such reference image: {img_path}")
        pixels = _read_image(img_path, background)
        pose = CameraPose(
            np.array(frame["transform_matrix"], dtype=np.float64),
            fov_x,
            pixels.shape[1],
            pixels.shape[0],
        )
        refs.append(PosedImage(np.clip(pixels, 0.0, 1.0), pose, "HR"))
    return refs


def box_downsample(arr: np.ndarray, s: int) -> np.ndarray:
    """Exact s x s box average of an (H, W) or (H, W, C) array.

    Both image dimensions must be divisible by s; no implicit cropping.
    """
    if s < 1 or int(s) != s:
        raise ShapeError(f"scale must be a positive integer, got {s}")
    s = int(s)
    if arr.ndim not in (2, 3):
        raise ShapeError(f"expected (H, W) or (H, W, C), got shape {arr.shape}")
    h, w = arr.shape[:2]
    if h % s or w % s:
        raise ShapeError(f"image size {h}x{w} not divisible by scale {s}")
    if s == 1:
        return arr.copy()
    shape = (h // s, s, w // s, s) + arr.shape[2:]
    return arr.reshape(shape).mean(axis=(1, 3))


# Assumed sensor-plus-optics blur any image carries at its own scale, in its
# own pixels. An s times smaller capture of the same scene therefore carries
# s times this blur when measured in the larger image's pixels.
AA_SIGMA = 0.7


def _blur_axis(arr: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    r = (len(taps) - 1) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    padded = np.pad(arr, pad, mode="edge")
    out = np.zeros(arr.shape, dtype=np.float64)
    index = [slice(None)] * arr.ndim
    for k, w in enumerate(taps):
        index[axis] = slice(k, k + arr.shape[axis])
        out += w * padded[tuple(index)]
    return out


def antialiased_downsample(arr: np.ndarray, s: int, sigma: float = AA_SIGMA) -> np.ndarray:
    """Downsample by s the way a native lower-resolution capture would look.

    A plain s x s average of an image that already carries sigma pixels of
    capture blur comes out sharper than an image captured directly at the
    lower resolution, which carries sigma of ITS OWN (larger) pixels. This
    routine adds the missing blur with a separable Gaussian (edge padding)
    before averaging, so the result matches the self-similar capture model
    rather than the naive pyramid. Shape contract as box_downsample.
    """
    if s < 1 or int(s) != s:
        raise ShapeError(f"scale must be a positive integer, got {s}")
    s = int(s)
    if arr.ndim not in (2, 3):
        raise ShapeError(f"expected (H, W) or (H, W, C), got shape {arr.shape}")
    h, w = arr.shape[:2]
    if h % s or w % s:
        raise ShapeError(f"image size {h}x{w} not divisible by scale {s}")
    if s == 1:
        return arr.copy()
    # variance bookkeeping in input pixels: target blur (sigma * s)^2, the
    # input contributes sigma^2 and the s x s window (s^2 - 1) / 12
    var = (sigma * s) ** 2 - sigma**2 - (s * s - 1) / 12.0
    if var <= 0.0:
        return box_downsample(arr, s)
    sig = float(np.sqrt(var))
    radius = int(np.ceil(3.0 * sig))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (xs / sig) ** 2)
    taps /= taps.sum()
    blurred = _blur_axis(_blur_axis(arr.astype(np.float64), taps, 0), taps, 1)
    return box_downsample(blurred, s).astype(arr.dtype)


def downsample_gt(img: PosedImage, s: int) -> PosedImage:
    """Downsample a captured posed image by s, retagging it LLR.

    Uses the antialiased construction so the result looks like a native
    capture at the lower resolution; this is what the degradation mapping
    trains against.
    """
    pixels = np.clip(antialiased_downsample(img.pixels, s), 0.0, 1.0).astype(np.float32)
    pose = CameraPose(img.pose.cam_to_world, img.pose.fov_x,
                      img.pose.width // s, img.pose.height // s)
    return PosedImage(pixels, pose, "LLR")
