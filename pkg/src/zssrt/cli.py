"""Command-line pipeline: generate, train stages, render, evaluate.

Run-directory layout (created under --out or $ZSSRT_RUN_DIR):

    config.json            resolved training configuration
    manifest.json          stage completion records
    losses.csv             stage, step, total, mse, perc
    coarse.ckpt            coarse field
    sdm.ckpt               degradation mapping
    fine.ckpt              fine field (last step)
    ensemble/snap_*.ckpt   fine-field snapshots for ensembling
    renders/               rendered views + depth sidecars
    report/                metrics.csv, summary.json, figures

Exit codes: 0 success, 2 usage error, 3 missing input or artifact,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import runs
from .config import PROFILES, TrainConfig, profile
from .errors import (
    ConfigurationError,
    DivergenceError,
    MissingArtifactError,
    ShapeError,
    ValidationError,
)
from .evaluation import compare_views, consistency_probe, emit_report
from .field import init_field
from .renderer import render_image
from .scenekit.dataset import load_dataset, load_refs
from .scenekit.synthetic import CAPTURE_NOISE, generate_synthetic_scene
from .sdm import train_sdm
from .trainer import train_coarse, train_fine


def _resolve_config(args, run_dir: Path | None) -> TrainConfig:
    """defaults < run config.json < --config file < explicit flags."""
    cfg = profile(args.profile, args.scale if args.scale else 2)
    base = cfg.to_dict()
    if run_dir is not None and (run_dir / "config.json").is_file():
        base = _merge(base, json.loads((run_dir / "config.json").read_text()))
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise MissingArtifactError(f"no such config file: {path}")
        base = _merge(base, json.loads(path.read_text()))
    cfg = TrainConfig.from_dict(base)
    if args.scale:
        cfg.scale = args.scale
        ref = profile(args.profile, args.scale)
        cfg.patch_p = ref.patch_p
        cfg.batch_patches = ref.batch_patches
        cfg.sdm_patch = ref.sdm_patch
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _load_images(args, cfg: TrainConfig, split: str = "train"):
    data_dir = Path(args.dataset)
    if not data_dir.is_dir():
        raise MissingArtifactError(f"no such dataset directory: {data_dir}")
    images, bounds = load_dataset(data_dir, split=split, background=cfg.background_rgb)
    cfg.field.bounds_min = tuple(float(x) for x in bounds[0])
    cfg.field.bounds_max = tuple(float(x) for x in bounds[1])
    return images


def _write_config(run_dir: Path, cfg: TrainConfig):
    (run_dir / "config.json").write_text(cfg.to_json())


def _save_depth(path_base: Path, depth: np.ndarray):
    raw = depth.astype("<f4")
    path_base.with_suffix(".depth.bin").write_bytes(raw.tobytes(order="C"))
    header = {
        "dtype": "float32",
        "byteorder": "little",
        "order": "C",
        "shape": list(raw.shape),
    }
    path_base.with_suffix(".depth.json").write_text(json.dumps(header, indent=2))


def _save_render(path_base: Path, out):
    from PIL import Image

    arr = np.clip(np.round(out.rgb * 255.0), 0, 255).astype(np.uint8)
    path_base.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path_base.with_suffix(".png"))
    _save_depth(path_base, out.depth)


def _skip_if_done(run_dir: Path, artifact: str, force: bool) -> bool:
    if (run_dir / artifact).exists() and not force:
        print(f"{artifact} already present in {run_dir}; use --force to redo")
        return True
    return False


def cmd_generate(args) -> int:
    out = Path(args.out) if args.out else runs.resolve_run_dir(None)
    info = generate_synthetic_scene(
        out, seed=args.seed if args.seed is not None else 0,
        n_views=args.views, res=args.res, n_test=args.tests, noise=args.noise,
    )
    print(f"wrote synthetic scene to {out} ({info['n_views']} train views, "
          f"{info['n_test']} test views at {info['res']}px)")
    return 0


def cmd_train_coarse(args) -> int:
    run_dir = runs.resolve_run_dir(args.out)
    cfg = _resolve_config(args, run_dir)
    images = _load_images(args, cfg)
    with runs.run_lock(run_dir):
        if _skip_if_done(run_dir, runs.ARTIFACTS["coarse"], args.force):
            return 0
        _write_config(run_dir, cfg)
        t0 = time.perf_counter()
        field = init_field(cfg.field, seed=cfg.seed * 1000)
        field, curve = train_coarse(field, images, cfg, log_every=args.log_every)
        path = ckpt.save_field(field, run_dir / runs.ARTIFACTS["coarse"],
                               step=cfg.steps_coarse, extra_meta={"stage": "coarse"})
        runs.append_losses(run_dir, curve)
        manifest = runs.RunManifest.load_or_create(run_dir)
        manifest.mark_stage("coarse", time.perf_counter() - t0, [path.name])
        print(f"coarse field trained ({cfg.steps_coarse} steps) -> {path}")
    return 0


def cmd_train_sdm(args) -> int:
    run_dir = runs.resolve_run_dir(args.out)
    cfg = _resolve_config(args, run_dir)
    images = _load_images(args, cfg)
    with runs.run_lock(run_dir):
        if _skip_if_done(run_dir, runs.ARTIFACTS["sdm"], args.force):
            return 0
        coarse_path = runs.require_artifact(run_dir, runs.ARTIFACTS["coarse"], "train-coarse")
        field, _ = ckpt.load_field(coarse_path)
        _write_config(run_dir, cfg)
        t0 = time.perf_counter()
        net, curve = train_sdm(
            field, images, cfg.scale, steps=cfg.steps_sdm, patch=cfg.sdm_patch,
            batch=cfg.sdm_batch, lr=cfg.lr_sdm, seed=cfg.seed * 1000 + 2,
            n_samples=cfg.sdm_samples or cfg.samples_coarse,
            background=cfg.background_rgb,
        )
        path = ckpt.save_sdm(net, run_dir / runs.ARTIFACTS["sdm"], step=cfg.steps_sdm)
        runs.append_losses(run_dir, [("sdm", s, v, v, 0.0) for s, v in curve])
        manifest = runs.RunManifest.load_or_create(run_dir)
        manifest.mark_stage("sdm", time.perf_counter() - t0, [path.name])
        print(f"degradation mapping trained ({cfg.steps_sdm} steps) -> {path}")
    return 0


def cmd_train_fine(args) -> int:
    run_dir = runs.resolve_run_dir(args.out)
    cfg = _resolve_config(args, run_dir)
    images = _load_images(args, cfg)
    with runs.run_lock(run_dir):
        if _skip_if_done(run_dir, runs.ARTIFACTS["fine"], args.force):
            return 0
        coarse_path = runs.require_artifact(run_dir, runs.ARTIFACTS["coarse"], "train-coarse")
        field, _ = ckpt.load_field(coarse_path)
        net = None
        if args.supervision == "sdm":
            sdm_path = runs.require_artifact(run_dir, runs.ARTIFACTS["sdm"], "train-sdm")
            net, _ = ckpt.load_sdm(sdm_path)
        _write_config(run_dir, cfg)
        t0 = time.perf_counter()
        fine, ensemble, curve = train_fine(
            field, net, images, cfg, supervision=args.supervision,
            log_every=args.log_every,
        )
        path = ckpt.save_field(fine, run_dir / runs.ARTIFACTS["fine"],
                               step=cfg.steps_fine,
                               extra_meta={"stage": "fine", "supervision": args.supervision})
        snap_paths = ckpt.save_ensemble(ensemble, run_dir / "ensemble")
        runs.append_losses(run_dir, curve)
        manifest = runs.RunManifest.load_or_create(run_dir)
        manifest.mark_stage(
            "fine", time.perf_counter() - t0,
            [path.name] + [f"ensemble/{p.name}" for p in snap_paths],
        )
        print(f"fine field trained ({cfg.steps_fine} steps, {args.supervision} "
              f"supervision) -> {path} + {len(snap_paths)} snapshots")
    return 0


def _load_render_model(run_dir: Path, use_ensemble: bool):
    if use_ensemble:
        ens_dir = run_dir / "ensemble"
        if not ens_dir.is_dir():
            raise MissingArtifactError(
                f"missing artifact {ens_dir} (run the train-fine stage first)"
            )
        return ckpt.load_ensemble(ens_dir)
    path = runs.require_artifact(run_dir, runs.ARTIFACTS["fine"], "train-fine")
    field, _ = ckpt.load_field(path)
    field.eval()
    field.requires_grad_(False)
    return field


def cmd_render(args) -> int:
    run_dir = runs.resolve_run_dir(args.out)
    cfg = _resolve_config(args, run_dir)
    images = _load_images(args, cfg, split=args.split)
    model = _load_render_model(run_dir, args.ensemble)
    tag = "ensemble" if args.ensemble else "fine"
    out_dir = run_dir / "renders" / f"{args.split}_{tag}_x{cfg.scale}"
    for i, img in enumerate(images):
        out = render_image(model, img.pose, s=cfg.scale,
                           n_samples=cfg.samples_fine, background=cfg.background_rgb)
        _save_render(out_dir / f"r_{i:03d}", out)
    print(f"rendered {len(images)} {args.split} views at x{cfg.scale} -> {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    run_dir = runs.resolve_run_dir(args.out)
    cfg = _resolve_config(args, run_dir)
    images = _load_images(args, cfg, split=args.split)
    model = _load_render_model(run_dir, args.ensemble)
    refs = load_refs(args.dataset, cfg.scale, split=args.split,
                     background=cfg.background_rgb)
    t0 = time.perf_counter()
    renders = []
    for img in images:
        out = render_image(model, img.pose, s=cfg.scale,
                           n_samples=cfg.samples_fine, background=cfg.background_rgb)
        renders.append(out.rgb)
    report = compare_views(
        renders, [r.pixels for r in refs], config_digest=cfg.digest()
    )
    report.runtime_s = time.perf_counter() - t0
    consistency = None
    probe_path = Path(args.dataset) / "probe_points.json"
    if probe_path.is_file():
        pts = np.array(json.loads(probe_path.read_text())["points"])
        consistency = consistency_probe(
            model, [img.pose for img in images], pts,
            n_samples=cfg.samples_fine, background=cfg.background_rgb,
        )
    loss_rows = runs.read_losses(run_dir)
    written = emit_report(report, run_dir / "report", loss_rows=loss_rows,
                          consistency=consistency)
    manifest = runs.RunManifest.load_or_create(run_dir)
    if manifest.completed("fine"):
        manifest.mark_stage("eval", report.runtime_s,
                            [str(p.relative_to(run_dir)) for p in written])
    print(f"mean psnr {report.mean_psnr:.3f} dB, mean ssim {report.mean_ssim:.4f} "
          f"over {len(report.view_ids)} views -> {run_dir / 'report'}")
    return 0


def cmd_pipeline(args) -> int:
    for fn in (cmd_train_coarse, cmd_train_sdm, cmd_train_fine, cmd_render, cmd_evaluate):
        rc = fn(args)
        if rc != 0:
            return rc
    return 0


def _add_common(sp, dataset_required: bool = True):
    sp.add_argument("--dataset", required=dataset_required, help="dataset directory")
    sp.add_argument("--out", default=None,
                    help="run directory (falls back to $ZSSRT_RUN_DIR)")
    sp.add_argument("--config", default=None, help="JSON config overriding the profile")
    sp.add_argument("--profile", default="desk", choices=PROFILES)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--scale", type=int, default=None, choices=(2, 4))
    sp.add_argument("--force", action="store_true",
                    help="redo the stage even if its artifact exists")
    sp.add_argument("--log-every", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="zssrt",
        description="Train a super-resolved radiance field from low-resolution "
                    "posed images only.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic posed dataset")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--views", type=int, default=8)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--tests", type=int, default=3)
    g.add_argument("--noise", type=float, default=CAPTURE_NOISE,
                   help="sensor noise sigma on captured views")
    g.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("train-coarse", help="fit the coarse field to the captures")
    _add_common(sp)
    sp.set_defaults(fn=cmd_train_coarse)

    sp = sub.add_parser("train-sdm", help="learn the scene's degradation mapping")
    _add_common(sp)
    sp.set_defaults(fn=cmd_train_sdm)

    sp = sub.add_parser("train-fine", help="super-sampled refinement stage")
    _add_common(sp)
    sp.add_argument("--supervision", choices=("sdm", "box"), default="sdm")
    sp.set_defaults(fn=cmd_train_fine)

    sp = sub.add_parser("render", help="render views from the trained model")
    _add_common(sp)
    sp.add_argument("--split", default="test")
    ens = sp.add_mutually_exclusive_group()
    ens.add_argument("--ensemble", dest="ensemble", action="store_true", default=True)
    ens.add_argument("--no-ensemble", dest="ensemble", action="store_false")
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("evaluate", help="metrics against reference images")
    _add_common(sp)
    sp.add_argument("--split", default="test")
    ens = sp.add_mutually_exclusive_group()
    ens.add_argument("--ensemble", dest="ensemble", action="store_true", default=True)
    ens.add_argument("--no-ensemble", dest="ensemble", action="store_false")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("pipeline", help="run every stage in order")
    _add_common(sp)
    sp.add_argument("--supervision", choices=("sdm", "box"), default="sdm")
    sp.add_argument("--split", default="test")
    ens = sp.add_mutually_exclusive_group()
    ens.add_argument("--ensemble", dest="ensemble", action="store_true", default=True)
    ens.add_argument("--no-ensemble", dest="ensemble", action="store_false")
    sp.set_defaults(fn=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (ConfigurationError, ValidationError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
