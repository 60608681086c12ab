"""Image metrics, multi-view consistency probing and report emission."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA = (0.299, 0.587, 0.114)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; inf when equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    xs = np.arange(size) - half
    w1 = np.exp(-(xs**2) / (2.0 * sigma**2))
    w2 = np.outer(w1, w1)
    return w2 / w2.sum()


def _luminance(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return LUMA[0] * img[..., 0] + LUMA[1] * img[..., 1] + LUMA[2] * img[..., 2]
    raise ShapeError(f"expected (H, W) or (H, W, 3), got {img.shape}")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity on luminance with an 11x11 Gaussian window.

    Valid-region average (no padding); images must be at least the window
    size on each side and share shapes. Dynamic range is 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    la, lb = _luminance(a), _luminance(b)
    h, w = la.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ConfigurationError(
            f"images must be at least {SSIM_WINDOW}px per side for ssim, got {h}x{w}"
        )
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    def filt(x):
        v = np.lib.stride_tricks.sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
        return np.einsum("ijkl,kl->ij", v, win)

    mu_a = filt(la)
    mu_b = filt(lb)
    var_a = filt(la * la) - mu_a**2
    var_b = filt(lb * lb) - mu_b**2
    cov = filt(la * lb) - mu_a * mu_b
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def consistency_probe(field, poses, probe_points: np.ndarray, n_samples: int = 64,
                      opacity_thresh: float = 0.5, depth_rtol: float = 0.05,
                      background=(1.0, 1.0, 1.0)) -> dict:
    """Cross-view color variance at fixed 3D points.

    Each probe point is projected into every pose; the pixel it lands in is
    rendered (deterministic midpoint sampling) and counts as a sighting when
    the ray is opaque enough and terminates at the point's distance (within
    depth_rtol, which filters occlusions). Points seen from fewer than two
    views are skipped. Returns per-point across-view channel-mean variances
    plus bookkeeping counts.
    """
    import torch

    from .renderer import render_rays

    if len(poses) < 2:
        raise ConfigurationError(f"need at least 2 poses, got {len(poses)}")
    pts = np.asarray(probe_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"probe points must be (N, 3), got {pts.shape}")

    sightings = [[] for _ in range(len(pts))]
    for pose in poses:
        r = pose.rotation
        cam = (pts - pose.origin) @ r  # world -> camera
        z = cam[:, 2]
        vis = z < -1e-6  # camera looks down -z
        f = pose.focal
        u = 0.5 * pose.width + f * (cam[:, 0] / -z)
        v = 0.5 * pose.height - f * (cam[:, 1] / -z)
        inside = vis & (u >= 0) & (u < pose.width) & (v >= 0) & (v < pose.height)
        if not inside.any():
            continue
        idx = np.flatnonzero(inside)
        px = np.floor(u[idx]) + 0.5
        py = np.floor(v[idx]) + 0.5
        dx = (px - 0.5 * pose.width) / f
        dy = -(py - 0.5 * pose.height) / f
        d = np.stack([dx, dy, -np.ones_like(dx)], axis=-1) @ r.T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(pose.origin, d.shape)
        with torch.no_grad():
            out = render_rays(
                field, torch.from_numpy(o.copy()), torch.from_numpy(d),
                n_samples=n_samples, background=background,
            )
        dist = np.linalg.norm(pts[idx] - pose.origin, axis=-1)
        depth = out.depth.numpy().astype(np.float64)
        opac = out.opacity.numpy().astype(np.float64)
        ok = (opac >= opacity_thresh) & (np.abs(depth - dist) <= depth_rtol * dist)
        rgb = out.rgb.numpy().astype(np.float64)
        for j, point_i in enumerate(idx):
            if ok[j]:
                sightings[point_i].append(rgb[j])

    variances = []
    used = 0
    skipped = 0
    for views in sightings:
        if len(views) < 2:
            skipped += 1
            continue
        stack = np.stack(views)
        variances.append(float(stack.var(axis=0).mean()))
        used += 1
    return {
        "variances": np.array(variances),
        "mean_variance": float(np.mean(variances)) if variances else math.nan,
        "points_used": used,
        "points_skipped": skipped,
    }


@dataclass
class MetricReport:
    view_ids: list
    psnr_db: list
    ssim: list
    runtime_s: float = 0.0
    config_digest: str = ""
    notes: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.view_ids) == len(self.psnr_db) == len(self.ssim)):
            raise ShapeError("view_ids, psnr_db and ssim must have equal lengths")

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))


def compare_views(renders, refs, view_ids=None, config_digest: str = "") -> MetricReport:
    """PSNR/SSIM of rendered images against references, one row per view."""
    if len(renders) != len(refs) or not renders:
        raise ConfigurationError(
            f"need equal non-empty render/reference lists, got {len(renders)}/{len(refs)}"
        )
    t0 = time.perf_counter()
    ids = list(view_ids) if view_ids is not None else list(range(len(renders)))
    ps, ss = [], []
    for r, ref in zip(renders, refs):
        ps.append(psnr(r, ref))
        ss.append(ssim(r, ref))
    return MetricReport(
        view_ids=ids, psnr_db=ps, ssim=ss,
        runtime_s=time.perf_counter() - t0, config_digest=config_digest,
    )


def emit_report(report: MetricReport, out_dir, loss_rows=None, consistency=None):
    """Write metrics.csv, summary.json and plotted figures into out_dir.

    The CSV bytes are a pure function of the report contents (fixed header,
    fixed float formatting, LF endings). Figures are rendered with the Agg
    backend: a per-view metric chart, plus training curves when loss_rows
    (stage, step, total, mse, perc) are provided. Raises if the report is
    empty. Returns the list of written paths.
    """
    if not report.view_ids:
        raise ConfigurationError("cannot emit a report with no views")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["view_id", "psnr_db", "ssim"])
        for vid, p, s in zip(report.view_ids, report.psnr_db, report.ssim):
            writer.writerow([vid, f"{p:.6f}", f"{s:.6f}"])
    written.append(csv_path)

    summary = {
        "mean_psnr_db": report.mean_psnr,
        "mean_ssim": report.mean_ssim,
        "n_views": len(report.view_ids),
        "runtime_s": report.runtime_s,
        "config_digest": report.config_digest,
        "lpips": "omitted: needs a pretrained perceptual network, out of scope here",
    }
    if consistency is not None:
        summary["consistency_mean_variance"] = consistency.get("mean_variance")
        summary["consistency_points_used"] = consistency.get("points_used")
        summary["consistency_points_skipped"] = consistency.get("points_skipped")
    summary.update(report.notes)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    written.append(out / "summary.json")

    import matplotlib
    matplotlib.use("Agg", force=True)
    from matplotlib.figure import Figure

    fig = Figure(figsize=(8, 3.6), dpi=110)
    ax1, ax2 = fig.subplots(1, 2)
    xs = np.arange(len(report.view_ids))
    finite_psnr = [p if math.isfinite(p) else 99.0 for p in report.psnr_db]
    ax1.bar(xs, finite_psnr, color="#4878cf")
    ax1.axhline(report.mean_psnr if math.isfinite(report.mean_psnr) else 99.0,
                color="k", ls="--", lw=1, label="mean")
    ax1.set_xticks(xs, [str(v) for v in report.view_ids])
    ax1.set_xlabel("view")
    ax1.set_ylabel("psnr (dB)")
    ax1.legend(fontsize=8)
    ax2.bar(xs, report.ssim, color="#6acc65")
    ax2.set_xticks(xs, [str(v) for v in report.view_ids])
    ax2.set_xlabel("view")
    ax2.set_ylabel("ssim")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig_path = out / "metrics.png"
    fig.savefig(fig_path)
    written.append(fig_path)

    if loss_rows:
        fig = Figure(figsize=(7, 3.2), dpi=110)
        ax = fig.subplots()
        stages = sorted({row[0] for row in loss_rows})
        for stage in stages:
            steps = [row[1] for row in loss_rows if row[0] == stage]
            totals = [row[2] for row in loss_rows if row[0] == stage]
            ax.plot(steps, totals, lw=0.9, label=stage)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
        fig.tight_layout()
        loss_path = out / "losses.png"
        fig.savefig(loss_path)
        written.append(loss_path)
    return written
