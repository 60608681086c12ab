"""Checkpoint container: a zip of named float arrays plus a JSON meta block.

Entries are stored uncompressed with pinned timestamps and sorted names, so
saving the same arrays twice yields byte-identical files. The format tag in
the meta block gates loading.
"""
from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np

from .errors import ValidationError

FORMAT_TAG = "zssrt-ckpt-v1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    """Write arrays + meta to path atomically.

    arrays maps names to numpy arrays; meta is JSON-serializable. The
    meta block always carries the container format tag.
    """
    path = Path(path)
    meta = dict(meta or {})
    meta["format"] = FORMAT_TAG
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, indent=2, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Read (arrays, meta) back; rejects containers with a foreign format tag."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    arrays = {}
    with zipfile.ZipFile(path, "r") as zf:
        names = zf.namelist()
        if "meta.json" not in names:
            raise ValidationError(f"{path} has no meta.json; not a checkpoint container")
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT_TAG:
            raise ValidationError(
                f"{path} has format {meta.get('format')!r}, expected {FORMAT_TAG!r}"
            )
        for name in names:
            if name.startswith("arrays/") and name.endswith(".npy"):
                arrays[name[len("arrays/") : -len(".npy")]] = np.load(
                    io.BytesIO(zf.read(name))
                )
    return arrays, meta


def save_field(field, path, step: int = 0, extra_meta: dict | None = None):
    from dataclasses import asdict

    meta = {"model": "field", "step": int(step), "config": asdict(field.config)}
    meta.update(extra_meta or {})
    return save_checkpoint(path, field.arrays(), meta)


def load_field(path):
    from .field import FieldConfig, TensorialField

    arrays, meta = load_checkpoint(path)
    if meta.get("model") != "field":
        raise ValidationError(f"{path} holds a {meta.get('model')!r} model, expected field")
    cfg_dict = dict(meta["config"])
    for key in ("bounds_min", "bounds_max"):
        cfg_dict[key] = tuple(cfg_dict[key])
    field = TensorialField(FieldConfig(**cfg_dict), seed=0)
    field.load_arrays(arrays)
    return field, meta


def save_sdm(net, path, step: int = 0, extra_meta: dict | None = None):
    meta = {
        "model": "sdm",
        "step": int(step),
        "scale": net.scale,
        "residual": net.residual,
        "base_ch": net.stages[0].out_ch,
    }
    meta.update(extra_meta or {})
    arrays = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    return save_checkpoint(path, arrays, meta)


def load_sdm(path):
    import torch

    from .sdm import SdmNetwork

    arrays, meta = load_checkpoint(path)
    if meta.get("model") != "sdm":
        raise ValidationError(f"{path} holds a {meta.get('model')!r} model, expected sdm")
    net = SdmNetwork(int(meta["scale"]), seed=0, base_ch=int(meta.get("base_ch", 16)),
                     residual=bool(meta.get("residual", True)))
    sd = {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()}
    net.load_state_dict(sd)
    net.eval()
    return net, meta


def save_ensemble(ensemble, dir_path, extra_meta: dict | None = None):
    """One field checkpoint per snapshot: dir/snap_000.ckpt, snap_001.ckpt, ..."""
    dir_path = Path(dir_path)
    paths = []
    for i, snap in enumerate(ensemble.snapshots):
        meta = {"snapshot_index": i, "snapshot_count": len(ensemble.snapshots)}
        meta.update(extra_meta or {})
        paths.append(save_field(snap.field, dir_path / f"snap_{i:03d}.ckpt",
                                step=snap.step, extra_meta=meta))
    return paths


def load_ensemble(dir_path):
    from .field import EnsembleField, FieldSnapshot

    dir_path = Path(dir_path)
    files = sorted(dir_path.glob("snap_*.ckpt"))
    if not files:
        raise FileNotFoundError(f"no snapshot checkpoints under {dir_path}")
    snaps = []
    for f in files:
        field, meta = load_field(f)
        field.requires_grad_(False)
        field.eval()
        snaps.append(FieldSnapshot(step=int(meta.get("step", 0)), field=field))
    return EnsembleField(snaps)
