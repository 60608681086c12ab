"""Training configuration and named profiles.

Profile precedence at the CLI is defaults < config file < explicit flags.
The blender/llff profiles carry the full-scale settings; desk is a small
configuration sized so the whole pipeline runs on one CPU core in minutes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigurationError
from .field import FieldConfig

PROFILES = ("blender", "llff", "desk")


@dataclass
class TrainConfig:
    scale: int = 2
    steps_coarse: int = 5000
    steps_fine: int = 25000
    steps_sdm: int = 10000
    lambda_perc: float = 0.03
    lr_grid: float = 0.02
    lr_decoder: float = 0.001
    lr_sdm: float = 3e-3
    patch_p: int = 16
    batch_patches: int = 32
    batch_rays: int = 4096
    samples_coarse: int = 128
    samples_fine: int = 192
    snapshot_every: int = 1000
    snapshot_count: int = 3
    sdm_patch: int = 16
    sdm_batch: int = 8
    sdm_samples: int = 0  # render samples for the mapping stage; 0 = samples_coarse
    seed: int = 0
    background: str = "white"
    field: FieldConfig = field(default_factory=FieldConfig)

    def validate(self):
        if self.scale not in (2, 4):
            raise ConfigurationError(f"scale must be 2 or 4, got {self.scale}")
        for name in ("steps_coarse", "steps_fine", "steps_sdm", "patch_p",
                     "batch_patches", "batch_rays", "snapshot_every", "snapshot_count"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.snapshot_every * (self.snapshot_count - 1) >= self.steps_fine:
            raise ConfigurationError(
                "snapshot schedule does not fit: need snapshot_every * (count - 1) "
                f"< steps_fine, got {self.snapshot_every} * {self.snapshot_count - 1} "
                f">= {self.steps_fine}"
            )
        if self.sdm_samples < 0:
            raise ConfigurationError(
                f"sdm_samples must be >= 0, got {self.sdm_samples}"
            )
        if self.background not in ("white", "black"):
            raise ConfigurationError(f"background must be white or black, got {self.background}")
        self.field.validate()

    @property
    def background_rgb(self):
        return (1.0, 1.0, 1.0) if self.background == "white" else (0.0, 0.0, 0.0)

    def snapshot_steps(self):
        """Fine-stage steps (1-based) at which ensemble snapshots are taken."""
        return [
            self.steps_fine - self.snapshot_every * (self.snapshot_count - 1 - i)
            for i in range(self.snapshot_count)
        ]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        fc = data.pop("field", {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        fc_unknown = set(fc) - set(FieldConfig.__dataclass_fields__)
        if fc_unknown:
            raise ConfigurationError(f"unknown field config keys: {sorted(fc_unknown)}")
        fc = FieldConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in fc.items()})
        return cls(field=fc, **data)


def profile(name: str, scale: int = 2) -> TrainConfig:
    """Named starting configurations."""
    if scale not in (2, 4):
        raise ConfigurationError(f"scale must be 2 or 4, got {scale}")
    patch_p = 16 if scale == 2 else 32
    batch_patches = 32 if scale == 2 else 8
    if name == "blender":
        return TrainConfig(scale=scale, patch_p=patch_p, batch_patches=batch_patches,
                           sdm_patch=patch_p)
    if name == "llff":
        return TrainConfig(
            scale=scale,
            steps_coarse=10000,
            steps_fine=20000,
            batch_rays=8192,
            patch_p=patch_p,
            batch_patches=batch_patches,
            sdm_patch=patch_p,
            background="black",
        )
    if name == "desk":
        return TrainConfig(
            scale=scale,
            steps_coarse=2000,
            steps_fine=4000,
            steps_sdm=2000,
            lr_sdm=0.01,
            patch_p=8,
            batch_patches=2,
            batch_rays=512,
            samples_coarse=40,
            samples_fine=48,
            snapshot_every=500,
            snapshot_count=3,
            sdm_patch=8,
            sdm_batch=8,
            field=FieldConfig(
                resolution=96,
                density_rank=4,
                appearance_rank=16,
                hidden_dim=64,
                near=0.8,
                far=6.5,
            ),
        )
    raise ConfigurationError(f"unknown profile {name!r}, expected one of {PROFILES}")
