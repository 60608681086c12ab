"""Training-loop tests: feature pyramid, patch loss, coarse/fine stages, config."""
import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from types import SimpleNamespace

from zssrt.config import PROFILES, TrainConfig, profile
from zssrt.errors import ConfigurationError, DivergenceError, ShapeError
from zssrt.field import FieldConfig, init_field
from zssrt.renderer import render_image, render_rays
from zssrt.scenekit.cameras import rays_for_patch
from zssrt.scenekit.dataset import load_dataset
from zssrt.scenekit.patches import PatchBundle
from zssrt.sdm import SdmNetwork
from zssrt.trainer import (
    FeatureExtractor,
    default_extractor,
    fine_loss,
    train_coarse,
    train_fine,
)


def tiny_cfg(**over):
    """A config small enough that full stages run in seconds."""
    cfg = TrainConfig(
        scale=2,
        steps_coarse=40,
        steps_fine=6,
        steps_sdm=10,
        patch_p=4,
        batch_patches=1,
        batch_rays=64,
        samples_coarse=8,
        samples_fine=8,
        snapshot_every=2,
        snapshot_count=3,
        sdm_patch=4,
        sdm_batch=2,
        seed=0,
        field=FieldConfig(
            resolution=16, density_rank=2, appearance_rank=3,
            hidden_dim=24, near=0.5, far=5.0,
        ),
    )
    for k, v in over.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


def _bundle(img, u, v, p, s, view_index=0):
    origins, dirs = rays_for_patch(img.pose, u, v, p, s)
    return PatchBundle(
        gt_patch=img.pixels[v : v + p, u : u + p].copy(),
        origins=origins,
        dirs=dirs,
        pixel_coords=(u, v),
        scale_factor=int(s),
        view_index=view_index,
    )


@pytest.fixture(scope="module")
def views(tiny_scene_dir):
    imgs, _ = load_dataset(tiny_scene_dir)
    return imgs


@pytest.fixture(scope="module")
def coarse_field(views):
    field = init_field(tiny_cfg().field, seed=0)
    field, _ = train_coarse(field, views, tiny_cfg())
    return field


class TestFeatureExtractor:
    def test_pyramid_shapes(self):
        ex = FeatureExtractor(seed=0)
        feats = ex(torch.rand(2, 3, 32, 32))
        shapes = [tuple(f.shape) for f in feats]
        assert shapes == [(2, 8, 16, 16), (2, 16, 8, 8), (2, 32, 4, 4)]

    def test_seed_determinism(self):
        a, b = FeatureExtractor(seed=5), FeatureExtractor(seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        c = FeatureExtractor(seed=6)
        assert any(
            not torch.equal(pa, pc)
            for pa, pc in zip(a.parameters(), c.parameters())
        )

    def test_frozen(self):
        ex = default_extractor(3)
        assert not ex.training
        assert all(not p.requires_grad for p in ex.parameters())

    def test_finite_outputs(self):
        ex = FeatureExtractor(seed=1)
        g = torch.Generator().manual_seed(2)
        feats = ex(torch.rand(1, 3, 16, 16, generator=g))
        assert all(torch.isfinite(f).all() for f in feats)


class TestFineLoss:
    def test_box_lambda_zero_matches_manual_mse(self, views, coarse_field):
        b = _bundle(views[0], 3, 5, 4, 2)
        total, parts = fine_loss(
            [b], coarse_field, None, default_extractor(0),
            lambda_perc=0.0, n_samples=8, rng=None, supervision="box",
        )
        out = render_rays(
            coarse_field,
            torch.from_numpy(b.origins.reshape(-1, 3)),
            torch.from_numpy(b.dirs.reshape(-1, 3)),
            n_samples=8, rng=None,
        )
        hr = out.rgb.reshape(1, 8, 8, 3).permute(0, 3, 1, 2)
        want = F.mse_loss(
            F.avg_pool2d(hr, 2),
            torch.from_numpy(b.gt_patch).unsqueeze(0).permute(0, 3, 1, 2),
        )
        assert abs(float(total.detach()) - float(want.detach())) < 1e-12
        assert parts["perc"] == 0.0

    def test_perfect_fit_gives_zero_loss(self, views, coarse_field):
        img = views[0]
        origins, dirs = rays_for_patch(img.pose, 2, 2, 4, 2)
        with torch.no_grad():
            out = render_rays(
                coarse_field,
                torch.from_numpy(origins.reshape(-1, 3)),
                torch.from_numpy(dirs.reshape(-1, 3)),
                n_samples=8, rng=None,
            )
            hr = out.rgb.reshape(1, 8, 8, 3).permute(0, 3, 1, 2)
            gt = F.avg_pool2d(hr, 2)[0].permute(1, 2, 0).numpy()
        b = PatchBundle(
            gt_patch=np.clip(gt, 0.0, 1.0),
            origins=origins, dirs=dirs,
            pixel_coords=(2, 2), scale_factor=2, view_index=0,
        )
        total, parts = fine_loss(
            [b], coarse_field, None, default_extractor(0),
            lambda_perc=0.03, n_samples=8, rng=None, supervision="box",
        )
        assert parts["mse"] == 0.0
        assert float(total.detach()) == 0.0

    def test_total_decomposes_into_mse_and_perceptual(self, views, coarse_field):
        b = _bundle(views[1], 1, 4, 4, 2, view_index=1)
        net = SdmNetwork(scale=2, seed=9)
        net.requires_grad_(False).eval()
        total, parts = fine_loss(
            [b], coarse_field, net, default_extractor(0),
            lambda_perc=0.03, n_samples=8, rng=None, supervision="sdm",
        )
        assert parts["perc"] > 0.0
        assert abs(parts["total"] - (parts["mse"] + 0.03 * parts["perc"])) < 1e-9
        assert abs(float(total.detach()) - parts["total"]) < 1e-9

    def test_gradients_reach_field_but_not_mapping(self, views, coarse_field):
        import copy

        field = copy.deepcopy(coarse_field)
        net = SdmNetwork(scale=2, seed=4)
        net.requires_grad_(False).eval()
        total, _ = fine_loss(
            [_bundle(views[0], 4, 4, 4, 2)], field, net, default_extractor(0),
            lambda_perc=0.03, n_samples=8, rng=None, supervision="sdm",
        )
        total.backward()
        grads = [p.grad for p in field.parameters()]
        assert any(g is not None and g.abs().sum() > 0 for g in grads)
        assert all(p.grad is None for p in net.parameters())

    def test_supervision_validation(self, views, coarse_field):
        b = _bundle(views[0], 0, 0, 4, 2)
        ex = default_extractor(0)
        with pytest.raises(ConfigurationError):
            fine_loss([b], coarse_field, None, ex, supervision="nearest")
        with pytest.raises(ConfigurationError):
            fine_loss([b], coarse_field, None, ex, n_samples=8, supervision="sdm")
        net4 = SdmNetwork(scale=4, seed=0)
        with pytest.raises(ConfigurationError):
            fine_loss([b], coarse_field, net4, ex, n_samples=8, supervision="sdm")
        with pytest.raises(ConfigurationError):
            fine_loss([], coarse_field, None, ex, supervision="box")

    def test_mixed_bundle_sizes_rejected(self, views, coarse_field):
        a = _bundle(views[0], 0, 0, 4, 2)
        b = _bundle(views[0], 0, 0, 5, 2)
        with pytest.raises(ShapeError):
            fine_loss([a, b], coarse_field, None, default_extractor(0),
                      n_samples=8, supervision="box")

    def test_ground_truth_shape_mismatch_rejected(self, views, coarse_field):
        origins, dirs = rays_for_patch(views[0].pose, 0, 0, 4, 2)
        fake = SimpleNamespace(
            gt_patch=np.zeros((5, 5, 3), dtype=np.float32),
            origins=origins, dirs=dirs,
            scale_factor=2, patch_size=4,
        )
        with pytest.raises(ShapeError):
            fine_loss([fake], coarse_field, None, default_extractor(0),
                      lambda_perc=0.0, n_samples=8, supervision="box")


class TestTrainCoarse:
    def test_loss_decreases_with_valid_curve(self, views):
        cfg = tiny_cfg()
        field = init_field(cfg.field, seed=0)
        out, curve = train_coarse(field, views, cfg)
        assert out is field
        assert len(curve) == cfg.steps_coarse
        assert all(len(row) == 5 for row in curve)
        assert all(row[0] == "coarse" for row in curve)
        assert [row[1] for row in curve] == list(range(cfg.steps_coarse))
        early = np.mean([row[3] for row in curve[:8]])
        late = np.mean([row[3] for row in curve[-8:]])
        assert late < early

    def test_seed_reproducibility(self, views):
        cfg = tiny_cfg(steps_coarse=15)
        _, c1 = train_coarse(init_field(cfg.field, seed=0), views, cfg)
        _, c2 = train_coarse(init_field(cfg.field, seed=0), views, cfg)
        assert c1 == c2

    def test_divergence_raises(self, views):
        cfg = tiny_cfg(steps_coarse=60, lr_grid=1e30, lr_decoder=1e30)
        with pytest.raises(DivergenceError):
            train_coarse(init_field(cfg.field, seed=0), views, cfg)

    def test_empty_views_rejected(self):
        cfg = tiny_cfg()
        with pytest.raises(ConfigurationError):
            train_coarse(init_field(cfg.field, seed=0), [], cfg)


class TestTrainFine:
    def test_mapping_stays_frozen(self, views, coarse_field):
        cfg = tiny_cfg()
        net = SdmNetwork(scale=2, seed=2)
        before = [p.detach().clone() for p in net.parameters()]
        train_fine(coarse_field, net, views, cfg, supervision="sdm")
        for p, b in zip(net.parameters(), before):
            assert torch.equal(p, b)

    def test_snapshot_schedule(self, views, coarse_field):
        cfg = tiny_cfg()
        fine, ensemble, curve = train_fine(
            coarse_field, None, views, cfg, supervision="box"
        )
        assert ensemble.steps == [2, 4, 6]
        assert len(ensemble.snapshots) == 3
        for snap in ensemble.snapshots:
            assert all(not p.requires_grad for p in snap.field.parameters())
        assert len(curve) == cfg.steps_fine
        assert all(row[0] == "fine" for row in curve)

    def test_zero_lr_preserves_coarse_field(self, views, coarse_field):
        cfg = tiny_cfg(lr_grid=0.0, lr_decoder=0.0)
        fine, ensemble, _ = train_fine(
            coarse_field, None, views, cfg, supervision="box"
        )
        with torch.no_grad():
            want = render_image(coarse_field, views[0].pose, s=1, n_samples=8)
            got = render_image(fine, views[0].pose, s=1, n_samples=8)
            ens = render_image(ensemble, views[0].pose, s=1, n_samples=8)
        assert np.array_equal(np.asarray(got.rgb), np.asarray(want.rgb))
        assert np.array_equal(np.asarray(ens.rgb), np.asarray(want.rgb))

    def test_seed_reproducibility(self, views, coarse_field):
        cfg = tiny_cfg()
        net = SdmNetwork(scale=2, seed=2)
        fine1, _, c1 = train_fine(coarse_field, net, views, cfg, supervision="sdm")
        fine2, _, c2 = train_fine(coarse_field, net, views, cfg, supervision="sdm")
        assert c1 == c2
        for a, b in zip(fine1.parameters(), fine2.parameters()):
            assert torch.equal(a, b)

    def test_scale_mismatch_rejected(self, views, coarse_field):
        cfg = tiny_cfg()
        with pytest.raises(ConfigurationError):
            train_fine(coarse_field, SdmNetwork(scale=4, seed=0), views, cfg)

    def test_empty_views_rejected(self, coarse_field):
        with pytest.raises(ConfigurationError):
            train_fine(coarse_field, None, [], tiny_cfg(), supervision="box")


class TestTrainConfig:
    def test_rejects_bad_scale(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(scale=3).validate()

    def test_rejects_nonpositive_counts(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(steps_coarse=0).validate()
        with pytest.raises(ConfigurationError):
            TrainConfig(batch_rays=-1).validate()

    def test_rejects_overflowing_snapshot_schedule(self):
        cfg = TrainConfig(steps_fine=10, snapshot_every=5, snapshot_count=3)
        with pytest.raises(ConfigurationError):
            cfg.validate()

    def test_rejects_unknown_background(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(background="blue").validate()

    def test_snapshot_steps(self):
        cfg = TrainConfig(steps_fine=6, snapshot_every=2, snapshot_count=3)
        assert cfg.snapshot_steps() == [2, 4, 6]
        assert TrainConfig().snapshot_steps() == [23000, 24000, 25000]

    def test_dict_roundtrip(self):
        cfg = tiny_cfg(seed=7)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_json_roundtrip(self):
        cfg = tiny_cfg(background="black")
        assert TrainConfig.from_dict(json.loads(cfg.to_json())) == cfg

    def test_digest_tracks_content(self):
        a, b = tiny_cfg(), tiny_cfg()
        assert a.digest() == b.digest()
        assert a.digest() != tiny_cfg(seed=1).digest()

    def test_unknown_keys_rejected(self):
        data = TrainConfig().to_dict()
        data["warmup"] = 10
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict(data)
        data = TrainConfig().to_dict()
        data["field"]["grid"] = 64
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict(data)

    def test_profiles(self):
        for name in PROFILES:
            profile(name, 2).validate()
            profile(name, 4).validate()
        with pytest.raises(ConfigurationError):
            profile("gpu")
        with pytest.raises(ConfigurationError):
            profile("desk", 3)
