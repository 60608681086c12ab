"""Patch bundles: ground-truth patches paired with super-sampled rays."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, ShapeError, ValidationError
from .cameras import rays_for_patch

TAU_MASK = 0.01
KEEP_BG = 0.2
MAX_DRAW_FACTOR = 50


@dataclass
class PatchBundle:
    """A p x p ground-truth patch plus the (s*p)^2 rays that super-sample it.

    pixel_coords is the patch anchor (u, v) on the native pixel grid, u along
    x/columns and v along y/rows. Ray (k, l) inside pixel (u, v) passes
    through image-plane point (u + (k + 0.5)/s, v + (l + 0.5)/s).
    """

    gt_patch: np.ndarray
    origins: np.ndarray
    dirs: np.ndarray
    pixel_coords: tuple
    scale_factor: int
    view_index: int = 0

    def __post_init__(self):
        p = self.gt_patch.shape[0]
        if self.gt_patch.shape != (p, p, 3):
            raise ShapeError(f"gt_patch must be (p, p, 3), got {self.gt_patch.shape}")
        sp = p * self.scale_factor
        if self.origins.shape != (sp, sp, 3) or self.dirs.shape != (sp, sp, 3):
            raise ShapeError(
                f"rays must be ({sp}, {sp}, 3) for p={p}, s={self.scale_factor}; "
                f"got origins {self.origins.shape}, dirs {self.dirs.shape}"
            )
        norms = np.linalg.norm(self.dirs, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValidationError("ray directions must be unit length")

    @property
    def patch_size(self) -> int:
        return self.gt_patch.shape[0]

    @property
    def n_rays(self) -> int:
        return self.origins.shape[0] * self.origins.shape[1]


def _patch_max_opacity(field, bundle, n_samples=64):
    """Max rendered opacity over a bundle's rays, used for masking."""
    import torch

    from ..renderer import render_rays

    with torch.no_grad():
        out = render_rays(
            field,
            torch.from_numpy(bundle.origins.reshape(-1, 3)),
            torch.from_numpy(bundle.dirs.reshape(-1, 3)),
            n_samples=n_samples,
        )
    return float(out.opacity.max())


def sample_patch_bundles(images, coarse_field, p: int, s: int, batch: int,
                         rng: np.random.Generator, tau_mask: float = TAU_MASK,
                         keep_bg: float = KEEP_BG, opacity_maps=None,
                         mask_samples: int = 64):
    """Draw patch bundles whose anchors live on the native pixel grid.

    A candidate patch is kept when its maximum rendered opacity under the
    coarse field reaches tau_mask, or with probability keep_bg otherwise, so
    mostly-background regions still contribute occasionally. Candidate draws
    are bounded by MAX_DRAW_FACTOR * batch; if the quota cannot be filled a
    warning is emitted and the short list is returned.

    opacity_maps, when given, is one (H, W) opacity array per view rendered
    from the coarse field; masking then uses the stored map instead of
    rendering patch rays on the fly. Passing coarse_field=None and no maps
    disables masking entirely.
    """
    if p < 1 or batch < 1:
        raise ConfigurationError(f"p and batch must be positive, got p={p}, batch={batch}")
    if s < 1 or int(s) != s:
        raise ConfigurationError(f"scale factor must be a positive integer, got {s}")
    for img in images:
        if img.pose.width < p or img.pose.height < p:
            raise ConfigurationError(
                f"patch size {p} exceeds image {img.pose.width}x{img.pose.height}"
            )

    bundles = []
    draws = 0
    limit = MAX_DRAW_FACTOR * batch
    while len(bundles) < batch and draws < limit:
        draws += 1
        vi = int(rng.integers(0, len(images)))
        img = images[vi]
        u = int(rng.integers(0, img.pose.width - p + 1))
        v = int(rng.integers(0, img.pose.height - p + 1))

        keep = True
        if opacity_maps is not None:
            patch_op = float(opacity_maps[vi][v : v + p, u : u + p].max())
            keep = patch_op >= tau_mask or rng.uniform() < keep_bg
        elif coarse_field is not None:
            origins, dirs = rays_for_patch(img.pose, u, v, p, s)
            bundle = PatchBundle(
                gt_patch=img.pixels[v : v + p, u : u + p].copy(),
                origins=origins,
                dirs=dirs,
                pixel_coords=(u, v),
                scale_factor=int(s),
                view_index=vi,
            )
            if _patch_max_opacity(coarse_field, bundle, mask_samples) >= tau_mask \
                    or rng.uniform() < keep_bg:
                bundles.append(bundle)
            continue
        if keep:
            origins, dirs = rays_for_patch(img.pose, u, v, p, s)
            bundles.append(
                PatchBundle(
                    gt_patch=img.pixels[v : v + p, u : u + p].copy(),
                    origins=origins,
                    dirs=dirs,
                    pixel_coords=(u, v),
                    scale_factor=int(s),
                    view_index=vi,
                )
            )
    if len(bundles) < batch:
        warnings.warn(
            f"patch sampling exhausted {limit} draws with {len(bundles)}/{batch} kept",
            RuntimeWarning,
            stacklevel=2,
        )
    return bundles
