"""Tensorial radiance field: VM-factorized grids with a small MLP decoder.

Density and appearance are each stored as three plane/line factor pairs
(one per axis pairing). Appearance factors are projected through a linear
dictionary into a fixed-width feature that a two-layer MLP decodes to RGB
together with a frequency encoding of the view direction. Everything is
torch so the whole query is differentiable with respect to the factors,
the dictionary and the decoder.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError

MAT_MODE = ((0, 1), (0, 2), (1, 2))
VEC_MODE = (2, 1, 0)

# Two CPU kernels here are not bit-stable across batch sizes: gemm switches
# strategy below ~1k rows, and vectorized transcendentals (softplus, sigmoid,
# exp) fall back to a scalar tail for the last N mod lane-width elements,
# which can differ from the SIMD path by one ulp. Padding every variable-size
# batch up to a multiple of this block keeps renders byte-identical for any
# chunking: no scalar tails, and gemm always sees the same regime.
STABLE_ROWS = 1024


@dataclass
class FieldConfig:
    resolution: int = 128
    density_rank: int = 8
    appearance_rank: int = 24
    appearance_dim: int = 27
    hidden_dim: int = 128
    hidden_layers: int = 2
    dir_octaves: int = 2
    density_shift: float = -5.0
    init_scale: float = 0.1
    bounds_min: tuple = (-1.5, -1.5, -1.5)
    bounds_max: tuple = (1.5, 1.5, 1.5)
    near: float = 2.0
    far: float = 6.0

    def validate(self):
        if self.resolution < 16:
            raise ConfigurationError(f"grid resolution must be >= 16, got {self.resolution}")
        if self.density_rank < 1 or self.appearance_rank < 1:
            raise ConfigurationError(
                f"factor ranks must be >= 1, got density {self.density_rank}, "
                f"appearance {self.appearance_rank}"
            )
        if not (self.near < self.far):
            raise ConfigurationError(f"need near < far, got [{self.near}, {self.far}]")
        lo, hi = np.asarray(self.bounds_min), np.asarray(self.bounds_max)
        if not (lo < hi).all():
            raise ConfigurationError(f"degenerate bounds {self.bounds_min}..{self.bounds_max}")


def _uniform_(t: torch.Tensor, bound: float, g: torch.Generator):
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=g, dtype=t.dtype) * 2.0 - 1.0) * bound)
    return t


def _seeded_linear(n_in: int, n_out: int, g: torch.Generator, bias: bool = True) -> nn.Linear:
    lin = nn.Linear(n_in, n_out, bias=bias)
    bound = 1.0 / math.sqrt(n_in)
    _uniform_(lin.weight, bound, g)
    if bias:
        _uniform_(lin.bias, bound, g)
    return lin


def _pad_rows(x: torch.Tensor, block: int = STABLE_ROWS) -> torch.Tensor:
    n = x.shape[0]
    n_pad = ((n + block - 1) // block) * block
    if n_pad == n:
        return x
    pad = torch.zeros((n_pad - n,) + tuple(x.shape[1:]), dtype=x.dtype, device=x.device)
    return torch.cat([x, pad], dim=0)


def encode_dirs(d: torch.Tensor, octaves: int) -> torch.Tensor:
    """Raw direction plus sin/cos at power-of-two frequencies."""
    feats = [d]
    for j in range(octaves):
        feats.append(torch.sin((2.0**j) * d))
        feats.append(torch.cos((2.0**j) * d))
    return torch.cat(feats, dim=-1)


class TensorialField(nn.Module):
    def __init__(self, config: FieldConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        g = torch.Generator().manual_seed(int(seed))
        res = config.resolution

        def factor_set(rank):
            planes, lines = nn.ParameterList(), nn.ParameterList()
            for k in range(3):
                planes.append(
                    nn.Parameter(config.init_scale * torch.randn(1, rank, res, res, generator=g))
                )
                lines.append(
                    nn.Parameter(config.init_scale * torch.randn(1, rank, res, 1, generator=g))
                )
            return planes, lines

        self.density_plane, self.density_line = factor_set(config.density_rank)
        self.app_plane, self.app_line = factor_set(config.appearance_rank)
        self.basis_mat = _seeded_linear(
            3 * config.appearance_rank, config.appearance_dim, g, bias=False
        )
        enc_dim = 3 * (1 + 2 * config.dir_octaves)
        dims = [config.appearance_dim + enc_dim]
        dims += [config.hidden_dim] * config.hidden_layers
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers.append(_seeded_linear(a, b, g))
        layers.append(_seeded_linear(dims[-1], 3, g))
        self.decoder = nn.ModuleList(layers)
        self.register_buffer(
            "aabb",
            torch.tensor([config.bounds_min, config.bounds_max], dtype=torch.float32),
        )

    @property
    def bounds(self) -> np.ndarray:
        return self.aabb.detach().cpu().numpy()

    @property
    def near(self) -> float:
        return self.config.near

    @property
    def far(self) -> float:
        return self.config.far

    @property
    def dtype(self) -> torch.dtype:
        return self.basis_mat.weight.dtype

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        lo, hi = self.aabb[0], self.aabb[1]
        return (x - lo) / (hi - lo) * 2.0 - 1.0

    def _sample_factors(self, planes, lines, xn: torch.Tensor):
        """Stack of plane*line factor values, shape (3*rank, N)."""
        n = xn.shape[0]
        outs = []
        for k in range(3):
            a, b = MAT_MODE[k]
            pc = torch.stack([xn[:, a], xn[:, b]], dim=-1).view(1, n, 1, 2)
            lc = torch.stack([torch.zeros_like(xn[:, 0]), xn[:, VEC_MODE[k]]], dim=-1)
            lc = lc.view(1, n, 1, 2)
            pv = F.grid_sample(planes[k], pc, align_corners=True, mode="bilinear").view(-1, n)
            lv = F.grid_sample(lines[k], lc, align_corners=True, mode="bilinear").view(-1, n)
            outs.append(pv * lv)
        return torch.cat(outs, dim=0)

    def density(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        xn = _pad_rows(self.normalize(x.to(self.dtype)))
        feat = self._sample_factors(self.density_plane, self.density_line, xn).sum(dim=0)
        return F.softplus(feat + self.config.density_shift)[:n]

    def _decode(self, app_feat: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        enc = encode_dirs(d, self.config.dir_octaves)
        n = app_feat.shape[0]
        h = torch.cat([self.basis_mat(_pad_rows(app_feat)), _pad_rows(enc)], dim=-1)
        for layer in self.decoder[:-1]:
            h = F.relu(layer(h))
        h = self.decoder[-1](h)
        return torch.sigmoid(h)[:n]

    def query(self, x: torch.Tensor, d: torch.Tensor):
        """Density and color at points x viewed along directions d.

        x, d: (N, 3). Points outside the bounding box return exactly zero
        density and exactly zero color. Returns (sigma (N,), rgb (N, 3)).
        """
        if x.ndim != 2 or x.shape[-1] != 3 or x.shape != d.shape:
            raise ValidationError(f"expected matching (N, 3) inputs, got {x.shape} and {d.shape}")
        x = x.to(self.dtype)
        d = d.to(self.dtype)
        xn = self.normalize(x)
        inb = (xn.abs() <= 1.0).all(dim=-1)
        sigma = torch.zeros(x.shape[0], dtype=self.dtype, device=x.device)
        rgb = torch.zeros_like(x)
        if inb.any():
            idx = inb.nonzero(as_tuple=True)[0]
            m = idx.numel()
            xs, ds = _pad_rows(xn[idx]), _pad_rows(d[idx])
            dfeat = self._sample_factors(self.density_plane, self.density_line, xs).sum(dim=0)
            sig = F.softplus(dfeat + self.config.density_shift)[:m]
            afeat = self._sample_factors(self.app_plane, self.app_line, xs).t()
            col = self._decode(afeat, ds)[:m]
            sigma = sigma.index_put((idx,), sig)
            rgb = rgb.index_put((idx.unsqueeze(-1), torch.arange(3, device=x.device)), col)
        return sigma, rgb

    def param_groups(self, lr_grid: float, lr_net: float):
        grids = list(self.density_plane) + list(self.density_line)
        grids += list(self.app_plane) + list(self.app_line)
        nets = list(self.basis_mat.parameters())
        for layer in self.decoder:
            nets += list(layer.parameters())
        return [{"params": grids, "lr": lr_grid}, {"params": nets, "lr": lr_net}]

    def arrays(self) -> dict:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def load_arrays(self, arrays: dict):
        sd = {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()}
        self.load_state_dict(sd)


def init_field(config: FieldConfig, seed: int = 0) -> TensorialField:
    """Fresh field from a seed; initial opacity along any ray stays below 0.5.

    The density shift puts softplus near zero for zero-mean factor products,
    so a freshly initialized field is almost transparent everywhere.
    """
    return TensorialField(config, seed=seed)


def query_field(field, x, d):
    """Functional query accepting numpy or torch inputs."""
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    if isinstance(d, np.ndarray):
        d = torch.from_numpy(d)
    return field.query(x, d)


@dataclass(frozen=True)
class FieldSnapshot:
    """An immutable copy of a field taken at a training step."""

    step: int
    field: TensorialField

    def query(self, x, d):
        return self.field.query(x, d)


def snapshot(field: TensorialField, step: int) -> FieldSnapshot:
    frozen = copy.deepcopy(field)
    frozen.requires_grad_(False)
    frozen.eval()
    return FieldSnapshot(step=int(step), field=frozen)


class EnsembleField:
    """Averages raw (sigma, color) across snapshots before compositing.

    The mean is computed as x0 + mean(xi - x0), which returns the first
    snapshot's outputs bit-for-bit when the ensemble has one member or when
    all members are identical.
    """

    def __init__(self, snapshots):
        snapshots = list(snapshots)
        if not snapshots:
            raise ConfigurationError("ensemble needs at least one snapshot")
        ref = snapshots[0].field.state_dict()
        for snap in snapshots[1:]:
            sd = snap.field.state_dict()
            if sd.keys() != ref.keys() or any(sd[k].shape != ref[k].shape for k in ref):
                raise ValidationError("ensemble snapshots have mismatched parameter shapes")
        self.snapshots = snapshots

    @property
    def steps(self):
        return [s.step for s in self.snapshots]

    @property
    def bounds(self):
        return self.snapshots[0].field.bounds

    @property
    def near(self):
        return self.snapshots[0].field.near

    @property
    def far(self):
        return self.snapshots[0].field.far

    @property
    def dtype(self):
        return self.snapshots[0].field.dtype

    def query(self, x, d):
        s0, c0 = self.snapshots[0].query(x, d)
        if len(self.snapshots) == 1:
            return s0, c0
        ds = torch.zeros_like(s0)
        dc = torch.zeros_like(c0)
        for snap in self.snapshots[1:]:
            si, ci = snap.query(x, d)
            ds = ds + (si - s0)
            dc = dc + (ci - c0)
        n = float(len(self.snapshots))
        return s0 + ds / n, c0 + dc / n


def ensemble_query(ensemble: EnsembleField, x, d):
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    if isinstance(d, np.ndarray):
        d = torch.from_numpy(d)
    return ensemble.query(x, d)
