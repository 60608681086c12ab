"""Training loops: coarse field on rays, fine field on degradation-mapped patches."""
from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TrainConfig
from .errors import ConfigurationError, DivergenceError, ShapeError
from .field import EnsembleField, TensorialField, snapshot
from .renderer import render_image, render_rays
from .scenekit.cameras import gen_rays
from .scenekit.patches import sample_patch_bundles
from .sdm import SdmNetwork, _smooth


def _stage_seed(seed: int, k: int) -> int:
    return int(seed) * 1000 + k


def _decay(optimizer, bases, step: int, total: int):
    # exponential schedule ending at a tenth of the starting rate
    f = 0.1 ** (step / max(total - 1, 1))
    for group, base in zip(optimizer.param_groups, bases):
        group["lr"] = base * f


class FeatureExtractor(nn.Module):
    """Fixed random conv pyramid used as a perceptual feature map.

    Three stride-2 convolutions widen 3 -> 8 -> 16 -> 32 channels; calling
    it returns the activation after each stage. Weights are seeded and
    frozen, so the features define a stable metric rather than a learned
    one. Any callable with the same signature can stand in for it.
    """

    CHANNELS = (8, 16, 32)

    def __init__(self, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(int(seed))
        chans = (3,) + self.CHANNELS
        convs = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(0.3 * torch.randn(conv.weight.shape, generator=g))
                conv.bias.zero_()
            convs.append(conv)
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor):
        feats = []
        h = x
        for conv in self.convs:
            h = _smooth(conv(h))
            feats.append(h)
        return feats


def default_extractor(seed: int = 0) -> FeatureExtractor:
    return FeatureExtractor(seed=seed)


def train_coarse(field: TensorialField, images, cfg: TrainConfig, log_every: int = 0):
    """Fit the field to the captured views by random-ray MSE.

    Returns (field, curve); curve rows are (stage, step, total, mse, perc).
    """
    cfg.validate()
    if not images:
        raise ConfigurationError("need at least one training view")
    origins, dirs, colors = [], [], []
    for img in images:
        o, d = gen_rays(img.pose, 1)
        origins.append(o.reshape(-1, 3))
        dirs.append(d.reshape(-1, 3))
        colors.append(img.pixels.reshape(-1, 3))
    origins = torch.from_numpy(np.concatenate(origins)).float()
    dirs = torch.from_numpy(np.concatenate(dirs)).float()
    colors = torch.from_numpy(np.concatenate(colors)).float()

    g = torch.Generator().manual_seed(_stage_seed(cfg.seed, 1))
    opt = torch.optim.Adam(
        field.param_groups(cfg.lr_grid, cfg.lr_decoder), betas=(0.9, 0.99)
    )
    bases = [cfg.lr_grid, cfg.lr_decoder]
    bg = cfg.background_rgb
    curve = []
    n = origins.shape[0]
    for step in range(cfg.steps_coarse):
        _decay(opt, bases, step, cfg.steps_coarse)
        idx = torch.randint(0, n, (cfg.batch_rays,), generator=g)
        try:
            out = render_rays(
                field, origins[idx], dirs[idx],
                n_samples=cfg.samples_coarse, rng=g, background=bg,
            )
        except ValueError as e:
            # inputs are fixed, so a render-time value error means the field
            # itself went non-finite
            raise DivergenceError(f"coarse field diverged at step {step}: {e}") from e
        loss = F.mse_loss(out.rgb, colors[idx])
        if not torch.isfinite(loss):
            raise DivergenceError(f"coarse loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(("coarse", step, float(loss.detach()), float(loss.detach()), 0.0))
        if log_every and step % log_every == 0:
            print(f"[coarse {step:6d}] mse {curve[-1][2]:.5f}")
    return field, curve


def _render_bundles(field, bundles, n_samples, rng, background):
    sp = bundles[0].origins.shape[0]
    o = np.stack([b.origins.reshape(-1, 3) for b in bundles]).reshape(-1, 3)
    d = np.stack([b.dirs.reshape(-1, 3) for b in bundles]).reshape(-1, 3)
    out = render_rays(
        field, torch.from_numpy(o), torch.from_numpy(d),
        n_samples=n_samples, rng=rng, background=background,
    )
    return out.rgb.reshape(len(bundles), sp, sp, 3)


def fine_loss(bundles, field, sdm_net, extractor, lambda_perc: float = 0.03,
              n_samples: int = 192, rng: torch.Generator | None = None,
              background=(1.0, 1.0, 1.0), supervision: str = "sdm"):
    """Patch loss for the super-sampled field.

    Renders each bundle's rays into an (s*p, s*p) patch, pushes it through
    the frozen degradation mapping (or a plain box average when
    supervision="box"), and compares against the ground-truth patch with
    MSE plus lambda_perc times an extractor-feature MSE. Gradients flow
    through the mapping into the field; the mapping's own parameters stay
    fixed.

    Returns (total_loss, parts) with parts = {"total", "mse", "perc"}.
    """
    if supervision not in ("sdm", "box"):
        raise ConfigurationError(f"supervision must be sdm or box, got {supervision!r}")
    if not bundles:
        raise ConfigurationError("need at least one patch bundle")
    s = bundles[0].scale_factor
    p = bundles[0].patch_size
    for b in bundles:
        if b.scale_factor != s or b.patch_size != p:
            raise ShapeError("bundles in a batch must share patch size and scale")
    if supervision == "sdm":
        if sdm_net is None:
            raise ConfigurationError("sdm supervision requires a trained mapping")
        if sdm_net.scale != s:
            raise ConfigurationError(
                f"mapping trained for scale {sdm_net.scale}, bundles have scale {s}"
            )

    hr = _render_bundles(field, bundles, n_samples, rng, background)  # (B, sp, sp, 3)
    hr_nchw = hr.permute(0, 3, 1, 2)
    if supervision == "sdm":
        pred = sdm_net(hr_nchw, clamp=False)
    else:
        pred = F.avg_pool2d(hr_nchw, s)
    gt = torch.from_numpy(np.stack([b.gt_patch for b in bundles])).to(pred.dtype)
    gt = gt.permute(0, 3, 1, 2)
    if pred.shape != gt.shape:
        raise ShapeError(
            f"mapped patch {tuple(pred.shape)} does not match ground truth {tuple(gt.shape)}"
        )
    mse = F.mse_loss(pred, gt)
    if lambda_perc > 0.0:
        pf = extractor(pred)
        gf = extractor(gt)
        perc = sum(F.mse_loss(a, b) for a, b in zip(pf, gf)) / len(pf)
    else:
        perc = torch.zeros(())
    total = mse + lambda_perc * perc
    return total, {"total": float(total.detach()), "mse": float(mse.detach()),
                   "perc": float(perc.detach())}


def train_fine(coarse_field: TensorialField, sdm_net, images, cfg: TrainConfig,
               supervision: str = "sdm", extractor=None, log_every: int = 0):
    """Super-sampled refinement stage.

    Starts from a copy of the coarse field, samples patch bundles whose
    anchors prefer regions the coarse field considers occupied, and descends
    fine_loss. Snapshots of the field are taken at the tail of the schedule
    (snapshot_count of them, snapshot_every steps apart, the last at the
    final step) and returned as an ensemble.

    Returns (fine_field, ensemble, curve).
    """
    cfg.validate()
    if not images:
        raise ConfigurationError("need at least one training view")
    if supervision == "sdm" and sdm_net is not None and sdm_net.scale != cfg.scale:
        raise ConfigurationError(
            f"mapping trained for scale {sdm_net.scale}, config wants {cfg.scale}"
        )
    fine = copy.deepcopy(coarse_field)
    if sdm_net is not None:
        sdm_net.requires_grad_(False)
        sdm_net.eval()
    if extractor is None:
        extractor = default_extractor(_stage_seed(cfg.seed, 4))

    bg = cfg.background_rgb
    opacity_maps = []
    with torch.no_grad():
        for img in images:
            out = render_image(coarse_field, img.pose, s=1,
                               n_samples=cfg.samples_coarse, background=bg)
            opacity_maps.append(out.opacity)

    np_rng = np.random.default_rng(_stage_seed(cfg.seed, 3))
    g = torch.Generator().manual_seed(_stage_seed(cfg.seed, 5))
    opt = torch.optim.Adam(fine.param_groups(cfg.lr_grid, cfg.lr_decoder), betas=(0.9, 0.99))
    bases = [cfg.lr_grid, cfg.lr_decoder]
    snap_steps = set(cfg.snapshot_steps())
    snaps = []
    curve = []
    for step in range(cfg.steps_fine):
        _decay(opt, bases, step, cfg.steps_fine)
        bundles = sample_patch_bundles(
            images, None, cfg.patch_p, cfg.scale, cfg.batch_patches,
            np_rng, opacity_maps=opacity_maps,
        )
        try:
            total, parts = fine_loss(
                bundles, fine, sdm_net, extractor, lambda_perc=cfg.lambda_perc,
                n_samples=cfg.samples_fine, rng=g, background=bg, supervision=supervision,
            )
        except ValueError as e:
            raise DivergenceError(f"fine field diverged at step {step}: {e}") from e
        if not torch.isfinite(total):
            raise DivergenceError(f"fine loss became non-finite at step {step}")
        opt.zero_grad()
        total.backward()
        opt.step()
        curve.append(("fine", step, parts["total"], parts["mse"], parts["perc"]))
        if (step + 1) in snap_steps:
            snaps.append(snapshot(fine, step + 1))
        if log_every and step % log_every == 0:
            print(f"[fine {step:6d}] total {parts['total']:.5f} mse {parts['mse']:.5f}")
    ensemble = EnsembleField(snaps)
    return fine, ensemble, curve
