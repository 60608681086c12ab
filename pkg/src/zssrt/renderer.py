"""Differentiable volume rendering over fields and ensembles.

The compositing weights follow the usual emission-absorption model: with
optical step sigma_i * delta_i, transmittance is the exponential of the
negative exclusive prefix sum and each sample contributes
w_i = T_i * (1 - exp(-sigma_i * delta_i)). Rays terminate on an explicit
background color so a fully transparent field reproduces the background
bit-for-bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, ShapeError
from .scenekit.cameras import CameraPose, gen_rays

DEFAULT_SAMPLES_COARSE = 128
DEFAULT_SAMPLES_FINE = 192
DEPTH_EPS = 1e-8
WHITE = (1.0, 1.0, 1.0)

# Ray batches are padded to a multiple of this before compositing. CPU
# elementwise kernels (exp here, softplus/sigmoid in the field) finish the
# last few elements of a buffer on a scalar path that can differ from the
# vectorized body by one ulp, so outputs would otherwise depend on batch
# length. Keeping every batch a multiple of a generous lane width means the
# scalar tail never runs and chunked rendering is bit-identical.
RAY_BLOCK = 64


@dataclass
class SamplePack:
    """Per-ray sample positions along with their spacings."""

    ts: torch.Tensor         # (R, K)
    deltas: torch.Tensor     # (R, K)
    positions: torch.Tensor  # (R, K, 3)


@dataclass
class RenderedRays:
    rgb: torch.Tensor      # (R, 3)
    opacity: torch.Tensor  # (R,)
    depth: torch.Tensor    # (R,)


@dataclass
class RenderedPatch:
    rgb: torch.Tensor      # (sp, sp, 3)
    opacity: torch.Tensor  # (sp, sp)
    depth: torch.Tensor    # (sp, sp)


@dataclass
class RenderedImage:
    rgb: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    pose: CameraPose
    scale: int


def _as_pair(value, n_rays, dtype):
    t = torch.as_tensor(value, dtype=dtype)
    if t.ndim == 0:
        t = t.expand(n_rays)
    if t.shape != (n_rays,):
        raise ShapeError(f"near/far must be scalar or ({n_rays},), got {tuple(t.shape)}")
    return t


def stratified_samples(origins: torch.Tensor, dirs: torch.Tensor, near, far,
                       n_samples: int, rng: torch.Generator | None = None) -> SamplePack:
    """Sample n_samples points per ray on [near, far].

    With rng, each of the n_samples equal bins gets one uniform sample
    (stratified). Without rng the bin midpoints are used, so evaluation
    renders are deterministic. Spacings are forward differences; the last
    spacing is the bin width (far - near) / n_samples.
    """
    if n_samples < 2:
        raise ConfigurationError(f"need at least 2 samples per ray, got {n_samples}")
    if origins.ndim != 2 or origins.shape[-1] != 3 or origins.shape != dirs.shape:
        raise ShapeError(f"expected matching (R, 3) rays, got {origins.shape} and {dirs.shape}")
    r = origins.shape[0]
    dtype = origins.dtype
    near_t = _as_pair(near, r, dtype)
    far_t = _as_pair(far, r, dtype)
    if not (near_t < far_t).all():
        raise ConfigurationError("need near < far on every ray")
    span = (far_t - near_t)[:, None]
    h = span / n_samples
    if rng is None:
        offs = torch.full((r, n_samples), 0.5, dtype=dtype)
    else:
        offs = torch.rand(r, n_samples, generator=rng, dtype=dtype)
    idx = torch.arange(n_samples, dtype=dtype)[None, :]
    ts = near_t[:, None] + (idx + offs) * h
    deltas = torch.cat([ts[:, 1:] - ts[:, :-1], h.expand(r, 1)], dim=-1)
    positions = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    return SamplePack(ts=ts, deltas=deltas, positions=positions)


def composite(sigmas: torch.Tensor, colors: torch.Tensor, deltas: torch.Tensor,
              background=WHITE, ts: torch.Tensor | None = None):
    """Alpha-composite per-ray samples onto a background.

    sigmas, deltas: (R, K); colors: (R, K, 3). Returns RenderedRays with
    rgb = sum_i w_i c_i + (1 - sum_i w_i) * background and
    depth = sum_i w_i t_i / max(opacity, 1e-8). The first sample always sees
    full transmittance. Zero density everywhere returns the background
    exactly.
    """
    if sigmas.ndim != 2 or sigmas.shape != deltas.shape:
        raise ShapeError(f"sigmas {tuple(sigmas.shape)} and deltas {tuple(deltas.shape)} differ")
    if colors.shape != sigmas.shape + (3,):
        raise ShapeError(f"colors must be {tuple(sigmas.shape) + (3,)}, got {tuple(colors.shape)}")
    if not torch.isfinite(sigmas).all() or not torch.isfinite(colors).all():
        raise ValueError("non-finite density or color")
    if (sigmas < 0).any():
        raise ValueError("negative density")
    if (deltas <= 0).any():
        raise ValueError("sample spacings must be positive")

    optical = sigmas * deltas
    acc = torch.cumsum(optical, dim=-1)
    trans = torch.exp(-(acc - optical))  # exclusive prefix: first sample sees 1
    alpha = 1.0 - torch.exp(-optical)
    weights = trans * alpha
    opacity = weights.sum(dim=-1)
    bg = torch.as_tensor(background, dtype=colors.dtype, device=colors.device)
    rgb = (weights[..., None] * colors).sum(dim=-2) + (1.0 - opacity)[..., None] * bg
    if ts is None:
        ts = torch.cumsum(deltas, dim=-1) - 0.5 * deltas
    depth = (weights * ts).sum(dim=-1) / torch.clamp(opacity, min=DEPTH_EPS)
    return RenderedRays(rgb=rgb, opacity=opacity, depth=depth)


def ray_aabb_span(origins: torch.Tensor, dirs: torch.Tensor, bounds, near: float, far: float):
    """Per-ray [near, far] clipped to the bounding box.

    Rays that miss the box get a degenerate but valid segment near the global
    near plane; their samples fall outside the box, query zero density and
    composite to the background.
    """
    lo = torch.as_tensor(bounds[0], dtype=origins.dtype)
    hi = torch.as_tensor(bounds[1], dtype=origins.dtype)
    inv = torch.where(dirs.abs() > 1e-9, 1.0 / dirs, torch.full_like(dirs, 1e10))
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    tlo = torch.minimum(t0, t1).amax(dim=-1)
    thi = torch.maximum(t0, t1).amin(dim=-1)
    near_r = torch.clamp(tlo, min=near)
    far_r = torch.clamp(thi, max=far)
    bad = far_r <= near_r
    near_r = torch.where(bad, torch.full_like(near_r, near), near_r)
    far_r = torch.where(bad, torch.full_like(far_r, near + 1e-3 * (far - near)), far_r)
    return near_r, far_r


def render_rays(field, origins: torch.Tensor, dirs: torch.Tensor,
                n_samples: int = DEFAULT_SAMPLES_COARSE, rng: torch.Generator | None = None,
                background=WHITE, clip_to_bounds: bool = True) -> RenderedRays:
    """Render a flat batch of rays against a field or ensemble."""
    dtype = getattr(field, "dtype", torch.float32)
    origins = origins.to(dtype)
    dirs = dirs.to(dtype)
    n_real = origins.shape[0]
    n_pad = -n_real % RAY_BLOCK
    if n_pad:
        # Dummy rays sit far outside the bounds, miss every sample and
        # composite to the background; they are sliced off below.
        hi = float(torch.as_tensor(field.bounds[1], dtype=dtype).max())
        o_pad = torch.full((n_pad, 3), hi + 1e3, dtype=dtype)
        d_pad = torch.zeros(n_pad, 3, dtype=dtype)
        d_pad[:, 2] = 1.0
        origins = torch.cat([origins, o_pad], dim=0)
        dirs = torch.cat([dirs, d_pad], dim=0)
    if clip_to_bounds:
        near, far = ray_aabb_span(origins, dirs, field.bounds, field.near, field.far)
    else:
        near, far = field.near, field.far
    pack = stratified_samples(origins, dirs, near, far, n_samples, rng=rng)
    r, k = pack.ts.shape
    flat_pos = pack.positions.reshape(-1, 3)
    flat_dir = dirs[:, None, :].expand(r, k, 3).reshape(-1, 3)
    sigma, color = field.query(flat_pos, flat_dir)
    out = composite(
        sigma.reshape(r, k), color.reshape(r, k, 3), pack.deltas,
        background=background, ts=pack.ts,
    )
    if n_pad:
        out = RenderedRays(
            rgb=out.rgb[:n_real], opacity=out.opacity[:n_real], depth=out.depth[:n_real]
        )
    return out


def render_patch(field, bundle, n_samples: int = DEFAULT_SAMPLES_FINE,
                 rng: torch.Generator | None = None, background=WHITE) -> RenderedPatch:
    """Render every super-sampling ray of a patch bundle.

    Output is (s*p, s*p, 3) and differentiable with respect to the field."""
    sp = bundle.origins.shape[0]
    out = render_rays(
        field,
        torch.from_numpy(bundle.origins.reshape(-1, 3)),
        torch.from_numpy(bundle.dirs.reshape(-1, 3)),
        n_samples=n_samples,
        rng=rng,
        background=background,
    )
    return RenderedPatch(
        rgb=out.rgb.reshape(sp, sp, 3),
        opacity=out.opacity.reshape(sp, sp),
        depth=out.depth.reshape(sp, sp),
    )


def render_image(field, pose: CameraPose, s: int = 1,
                 n_samples: int = DEFAULT_SAMPLES_COARSE, chunk: int = 8192,
                 rng: torch.Generator | None = None, background=WHITE) -> RenderedImage:
    """Render a full view at scale s in ray chunks.

    Chunking is a memory knob only: the output is byte-identical for any
    chunk size (the per-chunk math never mixes rays).
    """
    if chunk < 1:
        raise ConfigurationError(f"chunk must be positive, got {chunk}")
    o_np, d_np = gen_rays(pose, s)
    h, w = o_np.shape[:2]
    origins = torch.from_numpy(o_np.reshape(-1, 3))
    dirs = torch.from_numpy(d_np.reshape(-1, 3))
    rgb, opacity, depth = [], [], []
    with torch.no_grad():
        for i in range(0, origins.shape[0], chunk):
            out = render_rays(
                field, origins[i : i + chunk], dirs[i : i + chunk],
                n_samples=n_samples, rng=rng, background=background,
            )
            rgb.append(out.rgb)
            opacity.append(out.opacity)
            depth.append(out.depth)
    return RenderedImage(
        rgb=torch.cat(rgb).reshape(h, w, 3).to(torch.float32).numpy(),
        depth=torch.cat(depth).reshape(h, w).to(torch.float32).numpy(),
        opacity=torch.cat(opacity).reshape(h, w).to(torch.float32).numpy(),
        pose=pose,
        scale=int(s),
    )
