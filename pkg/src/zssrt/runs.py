"""Run directories: artifact layout, manifest and a simple lock."""
from __future__ import annotations

import csv
import json
import os
import time
from contextlib import contextmanager
from pathlib import Path

from .errors import MissingArtifactError, ValidationError

STAGES = ("scene", "coarse", "sdm", "fine", "eval")

# sdm is not a prerequisite of fine: box-supervised refinement skips it
PREREQS = {"scene": (), "coarse": (), "sdm": ("coarse",), "fine": ("coarse",), "eval": ()}

ARTIFACTS = {
    "coarse": "coarse.ckpt",
    "sdm": "sdm.ckpt",
    "fine": "fine.ckpt",
}


def resolve_run_dir(flag_value) -> Path:
    """--out beats the ZSSRT_RUN_DIR environment variable."""
    if flag_value:
        return Path(flag_value)
    env = os.environ.get("ZSSRT_RUN_DIR")
    if env:
        return Path(env)
    raise ValidationError("no run directory: pass --out or set ZSSRT_RUN_DIR")


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive lock file; refuses to start when another run holds it."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValidationError(
            f"run directory {run_dir} is locked by another process "
            f"(remove {lock} if that run is dead)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        try:
            lock.unlink()
        except FileNotFoundError:
            pass


class RunManifest:
    """manifest.json bookkeeping: which stages completed, with what artifacts."""

    def __init__(self, run_dir, data: dict | None = None):
        self.run_dir = Path(run_dir)
        self.data = data or {"created_at": time.strftime("%Y-%m-%dT%H:%M:%S"), "stages": {}}

    @property
    def path(self) -> Path:
        return self.run_dir / "manifest.json"

    @classmethod
    def load_or_create(cls, run_dir) -> "RunManifest":
        path = Path(run_dir) / "manifest.json"
        if path.is_file():
            return cls(run_dir, json.loads(path.read_text()))
        return cls(run_dir)

    def save(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True))
        os.replace(tmp, self.path)

    def mark_stage(self, stage: str, wall_s: float, artifacts: list):
        if stage not in STAGES:
            raise ValidationError(f"unknown stage {stage!r}")
        for prior in PREREQS[stage]:
            if prior not in self.data["stages"]:
                raise ValidationError(
                    f"stage {stage!r} cannot complete before {prior!r}"
                )
        self.data["stages"][stage] = {
            "completed": True,
            "wall_s": round(float(wall_s), 3),
            "artifacts": [str(a) for a in artifacts],
        }
        self.save()

    def completed(self, stage: str) -> bool:
        return self.data["stages"].get(stage, {}).get("completed", False)


def require_artifact(run_dir, name: str, stage_hint: str) -> Path:
    path = Path(run_dir) / name
    if not path.exists():
        raise MissingArtifactError(
            f"missing artifact {path} (run the {stage_hint} stage first)"
        )
    return path


def append_losses(run_dir, rows):
    """Append (stage, step, total, mse, perc) rows to losses.csv."""
    path = Path(run_dir) / "losses.csv"
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(["stage", "step", "total", "mse", "perc"])
        for stage, step, total, mse, perc in rows:
            writer.writerow([stage, step, f"{total:.8f}", f"{mse:.8f}", f"{perc:.8f}"])
    return path


def read_losses(run_dir):
    path = Path(run_dir) / "losses.csv"
    if not path.is_file():
        return []
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                (row["stage"], int(row["step"]), float(row["total"]),
                 float(row["mse"]), float(row["perc"]))
            )
    return rows
