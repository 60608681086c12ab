"""Scene-specific degradation mapping learned by internal supervision.

The mapping takes a rendered image and predicts its own downsampled version,
conditioned on an edge-strength guidance signal, so that it can absorb
whatever blur/aliasing relates the captured low-resolution images to the
scene. It is trained only on the scene at hand: inputs are renders of the
coarse field, targets are antialiased downsamples of the captures, standing
in for captures taken at the lower resolution. Once trained it is frozen
and used as the forward operator when supervising a super-sampled field.

The core block is a pixel-adaptive convolution: a strided conv whose taps
are additionally weighted by a Gaussian affinity between guidance features
at the window center and at each tap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DivergenceError, ShapeError
from .renderer import WHITE, render_rays
from .scenekit.cameras import rays_for_patch
from .scenekit.dataset import antialiased_downsample

LUMA = (0.299, 0.587, 0.114)
PAC_KERNEL = 5
PAC_STRIDE = 2
_LOG2 = math.log(2.0)
SUPPORTED_SCALES = (2, 4)


def _to_nchw(img):
    """Accept (H, W, C), (H, W) or (B, C, H, W); return (tensor, restore_fn)."""
    if isinstance(img, np.ndarray):
        img = torch.from_numpy(img)
    if img.ndim == 2:
        t = img[None, None]
        return t, lambda y: y[0, 0] if y.shape[1] == 1 else y[0].permute(1, 2, 0)
    if img.ndim == 3:
        t = img.permute(2, 0, 1)[None]
        return t, lambda y: y[0].permute(1, 2, 0)
    if img.ndim == 4:
        return img, lambda y: y
    raise ShapeError(f"expected (H, W[, C]) or (B, C, H, W), got {tuple(img.shape)}")


def _luminance(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, 1, H, W); 3-channel input uses Rec.601 weights."""
    if x.shape[1] == 1:
        return x
    if x.shape[1] != 3:
        raise ShapeError(f"expected 1 or 3 channels, got {x.shape[1]}")
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    return LUMA[0] * r + LUMA[1] * g + LUMA[2] * b


def _sobel_responses(lum: torch.Tensor):
    """Horizontal/vertical Sobel cross-correlations with replicate padding.

    Evaluated as paired differences so that flat regions cancel exactly:
    a constant image produces bitwise-zero responses.
    """
    p = F.pad(lum, (1, 1, 1, 1), mode="replicate")
    tl, tc, tr = p[..., :-2, :-2], p[..., :-2, 1:-1], p[..., :-2, 2:]
    ml, mr = p[..., 1:-1, :-2], p[..., 1:-1, 2:]
    bl, bc, br = p[..., 2:, :-2], p[..., 2:, 1:-1], p[..., 2:, 2:]
    du = (tr - tl) + 2.0 * (mr - ml) + (br - bl)
    dv = (bl - tl) + 2.0 * (bc - tc) + (br - tr)
    return du, dv


def _grad_magnitude(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, 1, H, W) Sobel gradient magnitude of the luminance.

    Exactly zero on constant inputs, with a well-defined (zero) gradient
    there: the square root is only evaluated where the squared magnitude is
    positive.
    """
    if x.shape[-2] < 3 or x.shape[-1] < 3:
        raise ShapeError(f"image must be at least 3x3, got {tuple(x.shape[-2:])}")
    du, dv = _sobel_responses(_luminance(x))
    sq = du * du + dv * dv
    return torch.where(sq > 0, torch.sqrt(torch.clamp(sq, min=1e-24)), torch.zeros_like(sq))


@dataclass
class GradientView:
    """Edge-strength guidance extracted from an image."""

    magnitude: torch.Tensor  # (H, W)
    du: torch.Tensor
    dv: torch.Tensor


def gradient_view(img) -> GradientView:
    """Sobel gradient magnitude of an (H, W, 3) or (H, W) image.

    Contract: constant images map to a bitwise-zero magnitude; a single
    channel ramp with unit step per column has interior magnitude exactly 8
    (boundary columns see replicate padding and differ).
    """
    t, _ = _to_nchw(img)
    if t.shape[-2] < 3 or t.shape[-1] < 3:
        raise ShapeError(f"image must be at least 3x3, got {tuple(t.shape[-2:])}")
    du, dv = _sobel_responses(_luminance(t))
    sq = du * du + dv * dv
    mag = torch.where(sq > 0, torch.sqrt(torch.clamp(sq, min=1e-24)), torch.zeros_like(sq))
    return GradientView(magnitude=mag[0, 0], du=du[0, 0], dv=dv[0, 0])


class PacStage(nn.Module):
    """Stride-2 pixel-adaptive convolution.

    Output v'_i = sum_j K(f_i, f_j) * W[p_i - p_j] * v_j + b over the k x k
    window Omega(i), with K(f_i, f_j) = exp(-beta * ||f_i - f_j||^2 / 2)
    computed from the guidance f. Replicate padding; spatial dims halve
    (rounding up).
    """

    def __init__(self, in_ch: int, out_ch: int, guide_ch: int = 1,
                 kernel: int = PAC_KERNEL, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(int(seed))
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.guide_ch = guide_ch
        self.kernel = kernel
        self.weight = nn.Parameter(
            0.05 * torch.randn(out_ch, in_ch, kernel, kernel, generator=g)
        )
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.beta = nn.Parameter(torch.ones(()))

    def forward(self, x: torch.Tensor, guide: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or guide.ndim != 4:
            raise ShapeError("PAC expects (B, C, H, W) input and guidance")
        if x.shape[-2:] != guide.shape[-2:] or x.shape[0] != guide.shape[0]:
            raise ShapeError(
                f"guidance {tuple(guide.shape)} misaligned with input {tuple(x.shape)}"
            )
        if x.shape[1] != self.in_ch or guide.shape[1] != self.guide_ch:
            raise ShapeError(
                f"expected {self.in_ch} input / {self.guide_ch} guidance channels, "
                f"got {x.shape[1]} / {guide.shape[1]}"
            )
        b, _, h, w = x.shape
        k = self.kernel
        pad = k // 2
        ho, wo = (h + 1) // 2, (w + 1) // 2
        xp = F.pad(x, (pad, pad, pad, pad), mode="replicate")
        gp = F.pad(guide, (pad, pad, pad, pad), mode="replicate")
        xu = F.unfold(xp, k, stride=PAC_STRIDE).view(b, self.in_ch, k * k, -1)
        gu = F.unfold(gp, k, stride=PAC_STRIDE).view(b, self.guide_ch, k * k, -1)
        center = gu[:, :, (k * k) // 2 : (k * k) // 2 + 1, :]
        dist = ((gu - center) ** 2).sum(dim=1)  # (B, k*k, L)
        aff = torch.exp(-0.5 * self.beta * dist)
        weighted = (xu * aff[:, None]).reshape(b, self.in_ch * k * k, -1)
        out = torch.matmul(self.weight.view(self.out_ch, -1), weighted)
        out = out + self.bias.view(1, -1, 1)
        return out.view(b, self.out_ch, ho, wo)


def pac_apply(input_img, guidance, stage: PacStage):
    """Apply one PAC stage to an (H, W, c) image with (H, W, g) guidance."""
    x, _ = _to_nchw(input_img)
    g, _ = _to_nchw(guidance)
    if g.ndim != 4:
        raise ShapeError("guidance must be (H, W, g) or (H, W)")
    out = stage(x.float() if not torch.is_floating_point(x) else x, g)
    return out[0].permute(1, 2, 0)


def _smooth(x: torch.Tensor) -> torch.Tensor:
    # zero-preserving softplus so stacking stages keeps a clean zero point
    return F.softplus(x) - _LOG2


class SdmNetwork(nn.Module):
    """Maps a rendered image to its predicted s-times-downsampled version.

    log2(s) PAC stages halve the resolution while widening channels, a 1x1
    head projects back to RGB, and the result is added to the plain box
    downsample of the input (residual form). Zeroing the head weights
    therefore turns the network into an exact box downsample; training
    shapes the residual around that baseline. Guidance is the Sobel
    magnitude of the input, box-averaged once per stage so its resolution
    tracks the features. Outputs are clamped to [0, 1] in eval mode only.
    """

    def __init__(self, scale: int, seed: int = 0, base_ch: int = 16, residual: bool = True):
        super().__init__()
        if scale not in SUPPORTED_SCALES:
            raise ConfigurationError(f"scale must be one of {SUPPORTED_SCALES}, got {scale}")
        self.scale = int(scale)
        self.residual = residual
        n_stages = int(math.log2(scale))
        stages = []
        for i in range(n_stages):
            stages.append(
                PacStage(3 if i == 0 else base_ch, base_ch, seed=seed * 7919 + i)
            )
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(base_ch, 3, kernel_size=1)
        g = torch.Generator().manual_seed(seed * 7919 + 97)
        with torch.no_grad():
            # Kaiming-uniform magnitude for fan-in base_ch, drawn from our own
            # generator so the init does not depend on global RNG state.
            bound = 1.0 / math.sqrt(base_ch)
            self.head.weight.copy_(
                bound * (2.0 * torch.rand(self.head.weight.shape, generator=g) - 1.0)
            )
            self.head.bias.zero_()

    def forward(self, img, clamp: bool | None = None):
        x, restore = _to_nchw(img)
        if x.shape[1] != 3:
            raise ShapeError(f"expected RGB input, got {x.shape[1]} channels")
        if x.shape[-2] % self.scale or x.shape[-1] % self.scale:
            raise ShapeError(
                f"spatial dims {tuple(x.shape[-2:])} not divisible by scale {self.scale}"
            )
        guide = _grad_magnitude(x)
        h = x
        for stage in self.stages:
            h = _smooth(stage(h, guide))
            guide = F.avg_pool2d(guide, 2)
        h = self.head(h)
        if self.residual:
            h = h + F.avg_pool2d(x, self.scale)
        if clamp is None:
            clamp = not self.training
        if clamp:
            h = h.clamp(0.0, 1.0)
        return restore(h)


def sdm_forward(net: SdmNetwork, img):
    """Functional forward pass; accepts (H, W, 3) numpy or torch."""
    return net(img)


def train_sdm(coarse_field, images, scale: int, steps: int = 1000,
              patch: int = 16, batch: int = 8, lr: float = 3e-3, seed: int = 0,
              n_samples: int = 96, background=WHITE):
    """Fit the degradation mapping by internal learning.

    Each step renders a fresh batch of (s*p, s*p) patches from the frozen
    coarse field with stratified ray sampling, so the inputs carry the same
    render noise the refinement stage later produces, and the mapping learns
    to absorb it. Targets are the aligned (p, p) crops of the captures
    downsampled with the antialiased operator, i.e. what a camera would have
    recorded at 1/s resolution; the patch MSE is minimized with Adam.
    Returns the trained network in eval mode plus the loss curve as a list
    of (step, mse).
    """
    if scale not in SUPPORTED_SCALES:
        raise ConfigurationError(f"scale must be one of {SUPPORTED_SCALES}, got {scale}")
    if not images:
        raise ConfigurationError("need at least one training view")
    if steps < 1:
        raise ConfigurationError(f"steps must be positive, got {steps}")
    for img in images:
        if img.pose.width % scale or img.pose.height % scale:
            raise ShapeError(
                f"image {img.pose.width}x{img.pose.height} not divisible by scale {scale}"
            )
    wll = images[0].pose.width // scale
    hll = images[0].pose.height // scale
    if patch > min(wll, hll):
        raise ConfigurationError(
            f"patch {patch} exceeds downsampled size {wll}x{hll}"
        )

    targets = [
        torch.from_numpy(antialiased_downsample(img.pixels, scale).astype(np.float32))
        for img in images
    ]

    net = SdmNetwork(scale, seed=seed)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=lr, betas=(0.9, 0.99))
    g = torch.Generator().manual_seed(int(seed) + 17)
    sp = scale * patch
    curve = []
    for step in range(steps):
        for group in opt.param_groups:
            group["lr"] = lr * (0.1 ** (step / max(steps - 1, 1)))
        vi = torch.randint(0, len(images), (batch,), generator=g)
        us = torch.randint(0, wll - patch + 1, (batch,), generator=g)
        vs = torch.randint(0, hll - patch + 1, (batch,), generator=g)
        origins, dirs, tgts = [], [], []
        for b in range(batch):
            i, u, v = int(vi[b]), int(us[b]), int(vs[b])
            o, d = rays_for_patch(images[i].pose, scale * u, scale * v, sp, 1)
            origins.append(o.reshape(-1, 3))
            dirs.append(d.reshape(-1, 3))
            tgts.append(targets[i][v : v + patch, u : u + patch])
        with torch.no_grad():
            out = render_rays(
                coarse_field,
                torch.from_numpy(np.concatenate(origins)),
                torch.from_numpy(np.concatenate(dirs)),
                n_samples=n_samples, rng=g, background=background,
            )
        x = out.rgb.reshape(batch, sp, sp, 3).permute(0, 3, 1, 2)
        y = torch.stack(tgts).permute(0, 3, 1, 2)
        pred = net(x)
        loss = F.mse_loss(pred, y)
        if not torch.isfinite(loss):
            raise DivergenceError(f"degradation-mapping loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append((step, float(loss.detach())))
    net.eval()
    return net, curve
