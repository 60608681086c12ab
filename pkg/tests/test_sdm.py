"""Degradation-mapping tests.

The pixel-adaptive convolution is checked against a literal double-loop
evaluation of its defining sum, run in float64 so the 1e-7 tolerance measures
the implementation and not float32 roundoff.
"""
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from zssrt.errors import ConfigurationError, DivergenceError, ShapeError
from zssrt.scenekit.dataset import box_downsample, load_dataset
from zssrt.scenekit.synthetic import AnalyticField, build_scene
from zssrt.sdm import (
    PAC_KERNEL,
    GradientView,
    PacStage,
    SdmNetwork,
    gradient_view,
    pac_apply,
    sdm_forward,
    train_sdm,
)


def sobel_oracle(img):
    """Double-loop Sobel magnitude with replicate padding, float64."""
    lum = img if img.ndim == 2 else img @ np.array([0.299, 0.587, 0.114])
    h, w = lum.shape
    ku = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
    kv = ku.T
    du = np.zeros((h, w))
    dv = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            for a in range(-1, 2):
                for b in range(-1, 2):
                    v = lum[min(max(i + a, 0), h - 1), min(max(j + b, 0), w - 1)]
                    du[i, j] += ku[a + 1, b + 1] * v
                    dv[i, j] += kv[a + 1, b + 1] * v
    return np.sqrt(du**2 + dv**2)


def pac_oracle(x, g, weight, bias, beta, stride=2):
    """Literal evaluation of the adaptive convolution sum, float64."""
    cin, h, w = x.shape
    cout = weight.shape[0]
    k = weight.shape[-1]
    pad = k // 2
    ho, wo = (h + 1) // 2, (w + 1) // 2
    out = np.zeros((cout, ho, wo))

    def at(arr, i, j):
        return arr[:, min(max(i, 0), h - 1), min(max(j, 0), w - 1)]

    for oi in range(ho):
        for oj in range(wo):
            ci, cj = oi * stride, oj * stride
            fc = at(g, ci, cj)
            acc = np.zeros(cout)
            for a in range(k):
                for b in range(k):
                    fj = at(g, ci + a - pad, cj + b - pad)
                    aff = math.exp(-0.5 * beta * float(((fc - fj) ** 2).sum()))
                    vj = at(x, ci + a - pad, cj + b - pad)
                    acc += aff * (weight[:, :, a, b] @ vj)
            out[:, oi, oj] = acc + bias
    return out


class TestGradientView:
    def test_constant_image_is_bitwise_zero(self):
        for c in (0.0, 0.5, 1.0, 1 / 3):
            img = torch.full((7, 9, 3), c)
            gv = gradient_view(img)
            assert torch.equal(gv.magnitude, torch.zeros(7, 9))
            assert torch.equal(gv.du, torch.zeros(7, 9))

    def test_unit_ramp_interior_is_exactly_eight(self):
        img = torch.arange(8, dtype=torch.float32)[None, :].expand(6, 8).contiguous()
        gv = gradient_view(img)
        assert torch.equal(gv.magnitude[1:-1, 1:-1], torch.full((4, 6), 8.0))
        # replicate padding halves the response on the boundary columns
        assert torch.equal(gv.magnitude[:, 0], torch.full((6,), 4.0))

    def test_rgb_ramp_interior_close_to_eight(self):
        img = torch.arange(8, dtype=torch.float32)[None, :, None].expand(6, 8, 3) / 8.0
        gv = gradient_view(img)
        assert torch.allclose(gv.magnitude[1:-1, 1:-1], torch.full((4, 6), 1.0), atol=1e-5)

    def test_transpose_symmetry(self):
        rng = np.random.default_rng(0)
        img = rng.random((6, 11, 3)).astype(np.float32)
        a = gradient_view(img).magnitude
        b = gradient_view(np.swapaxes(img, 0, 1)).magnitude
        assert torch.allclose(a, b.T, atol=1e-6)

    def test_constant_offset_invariance(self):
        rng = np.random.default_rng(1)
        img = (0.5 * rng.random((9, 9, 3))).astype(np.float32)
        a = gradient_view(img).magnitude
        b = gradient_view(img + 0.25).magnitude
        assert torch.allclose(a, b, atol=1e-5)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        img = rng.random((10, 13, 3))
        got = gradient_view(img.astype(np.float32)).magnitude.numpy()
        want = sobel_oracle(img)
        np.testing.assert_allclose(got, want, atol=2e-5)

    def test_grayscale_oracle(self):
        rng = np.random.default_rng(3)
        img = rng.random((8, 8))
        got = gradient_view(img.astype(np.float32)).magnitude.numpy()
        np.testing.assert_allclose(got, sobel_oracle(img), atol=2e-5)

    def test_too_small_rejected(self):
        with pytest.raises(ShapeError):
            gradient_view(torch.zeros(2, 5, 3))
        with pytest.raises(ShapeError):
            gradient_view(torch.zeros(5, 2))

    def test_magnitude_nonnegative_finite(self):
        rng = np.random.default_rng(4)
        gv = gradient_view(rng.random((12, 12, 3)).astype(np.float32))
        assert isinstance(gv, GradientView)
        assert (gv.magnitude >= 0).all()
        assert torch.isfinite(gv.magnitude).all()


class TestPac:
    def test_constant_guidance_equals_plain_conv(self):
        stage = PacStage(3, 4, seed=1)
        x = torch.rand(1, 3, 10, 12, generator=torch.Generator().manual_seed(0))
        g = torch.full((1, 1, 10, 12), 0.7)
        got = stage(x, g)
        pad = PAC_KERNEL // 2
        xp = F.pad(x, (pad, pad, pad, pad), mode="replicate")
        want = F.conv2d(xp, stage.weight, stage.bias, stride=2)
        assert got.shape == want.shape
        assert torch.allclose(got, want, atol=1e-6)

    def test_beta_zero_ignores_guidance(self):
        stage = PacStage(2, 2, seed=2)
        with torch.no_grad():
            stage.beta.zero_()
        x = torch.rand(1, 2, 9, 9, generator=torch.Generator().manual_seed(1))
        g1 = torch.rand(1, 1, 9, 9, generator=torch.Generator().manual_seed(2))
        g2 = torch.full((1, 1, 9, 9), 0.123)
        assert torch.equal(stage(x, g1), stage(x, g2))

    def test_guidance_changes_output_when_beta_positive(self):
        stage = PacStage(2, 2, seed=3)
        x = torch.rand(1, 2, 9, 9, generator=torch.Generator().manual_seed(1))
        g1 = torch.rand(1, 1, 9, 9, generator=torch.Generator().manual_seed(2))
        g2 = torch.full((1, 1, 9, 9), 0.123)
        assert not torch.equal(stage(x, g1), stage(x, g2))

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(5)
        stage = PacStage(1, 1, seed=4).double()
        with torch.no_grad():
            stage.beta.fill_(1.7)
        x = rng.random((1, 5, 5))
        g = rng.random((1, 5, 5))
        got = stage(torch.tensor(x)[None], torch.tensor(g)[None])[0].detach().numpy()
        want = pac_oracle(x, g, stage.weight.detach().numpy(),
                          stage.bias.detach().numpy(), float(stage.beta.detach()))
        np.testing.assert_allclose(got, want, atol=1e-7)

    def test_multichannel_oracle(self):
        rng = np.random.default_rng(6)
        stage = PacStage(3, 2, seed=5).double()
        x = rng.random((3, 6, 7))
        g = rng.random((1, 6, 7))
        got = stage(torch.tensor(x)[None], torch.tensor(g)[None])[0].detach().numpy()
        want = pac_oracle(x, g, stage.weight.detach().numpy(),
                          stage.bias.detach().numpy(), float(stage.beta.detach()))
        np.testing.assert_allclose(got, want, atol=1e-7)

    def test_hwc_wrapper(self):
        stage = PacStage(3, 4, seed=6)
        img = torch.rand(8, 8, 3, generator=torch.Generator().manual_seed(0))
        guide = torch.rand(8, 8, generator=torch.Generator().manual_seed(1))
        out = pac_apply(img, guide, stage)
        assert out.shape == (4, 4, 4)

    def test_misaligned_guidance_rejected(self):
        stage = PacStage(3, 4)
        with pytest.raises(ShapeError):
            stage(torch.rand(1, 3, 8, 8), torch.rand(1, 1, 8, 6))
        with pytest.raises(ShapeError):
            stage(torch.rand(1, 3, 8, 8), torch.rand(1, 2, 8, 8))
        with pytest.raises(ShapeError):
            stage(torch.rand(1, 4, 8, 8), torch.rand(1, 1, 8, 8))

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        stage = PacStage(1, 1, seed=7).double()
        x = torch.rand(1, 1, 5, 5, dtype=torch.float64, requires_grad=True)
        g = torch.rand(1, 1, 5, 5, dtype=torch.float64, requires_grad=True)
        loss = (stage(x, g) ** 2).sum()
        loss.backward()
        eps = 1e-6

        def loss_at(**over):
            w = over.get("weight", stage.weight.detach())
            bt = over.get("beta", stage.beta.detach())
            xx = over.get("x", x.detach())
            gg = over.get("g", g.detach())
            fresh = PacStage(1, 1).double()
            with torch.no_grad():
                fresh.weight.copy_(w)
                fresh.bias.copy_(stage.bias.detach())
                fresh.beta.copy_(bt)
                return float((fresh(xx, gg) ** 2).sum())

        checks = [
            ("weight", stage.weight, (0, 0, 2, 2)),
            ("beta", stage.beta, ()),
            ("x", x, (0, 0, 2, 3)),
            ("g", g, (0, 0, 1, 1)),
        ]
        for name, tensor, idx in checks:
            plus = tensor.detach().clone()
            minus = tensor.detach().clone()
            plus[idx] += eps
            minus[idx] -= eps
            fd = (loss_at(**{name: plus}) - loss_at(**{name: minus})) / (2 * eps)
            got = float(tensor.grad[idx].detach())
            assert abs(fd - got) <= 1e-3 * max(abs(fd), 1e-8), name


class TestSdmNetwork:
    def test_zeroed_stages_reduce_to_box_downsample(self):
        for scale in (2, 4):
            net = SdmNetwork(scale, seed=3)
            with torch.no_grad():
                for st in net.stages:
                    st.weight.zero_()
                    st.bias.zero_()
            x = torch.rand(scale * 8, scale * 8, 3,
                           generator=torch.Generator().manual_seed(0))
            out = net(x)
            want = F.avg_pool2d(x.permute(2, 0, 1)[None], scale)[0].permute(1, 2, 0)
            assert torch.equal(out, want)
            np.testing.assert_allclose(
                out.detach().numpy(), box_downsample(x.numpy(), scale), atol=1e-7
            )

    def test_stage_count_is_log2_scale(self):
        assert len(SdmNetwork(2).stages) == 1
        assert len(SdmNetwork(4).stages) == 2
        with pytest.raises(ConfigurationError):
            SdmNetwork(3)
        with pytest.raises(ConfigurationError):
            SdmNetwork(8)

    def test_output_shape_contract(self):
        net = SdmNetwork(4, seed=0)
        out = net(torch.rand(64, 64, 3))
        assert out.shape == (16, 16, 3)
        out = sdm_forward(SdmNetwork(2, seed=0), torch.rand(20, 28, 3))
        assert out.shape == (10, 14, 3)

    def test_scale_transfer_by_shape(self):
        # fully convolutional: a net used at 16x16 input applies at 32x32
        net = SdmNetwork(2, seed=1)
        assert net(torch.rand(16, 16, 3)).shape == (8, 8, 3)
        assert net(torch.rand(32, 32, 3)).shape == (16, 16, 3)

    def test_indivisible_dims_rejected(self):
        net = SdmNetwork(2)
        with pytest.raises(ShapeError):
            net(torch.rand(9, 8, 3))
        with pytest.raises(ShapeError):
            SdmNetwork(4)(torch.rand(10, 10, 3))

    def test_clamp_eval_only(self):
        net = SdmNetwork(2, seed=2)
        with torch.no_grad():
            net.head.bias.fill_(3.0)
        x = torch.rand(8, 8, 3, generator=torch.Generator().manual_seed(0))
        net.train()
        with torch.no_grad():
            assert float(net(x).max()) > 1.0
        net.eval()
        out = net(x)
        assert float(out.max()) <= 1.0 and float(out.min()) >= 0.0
        # explicit override: the fine stage trains through an eval-mode net
        assert float(net(x, clamp=False).max()) > 1.0
        net.train()
        assert float(net(x, clamp=True).max()) <= 1.0

    def test_seeded_init_is_deterministic(self):
        a = SdmNetwork(2, seed=9).state_dict()
        b = SdmNetwork(2, seed=9).state_dict()
        c = SdmNetwork(2, seed=10).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
        assert any(not torch.equal(a[k], c[k]) for k in a)


@pytest.fixture(scope="module")
def analytic_coarse():
    return AnalyticField(build_scene(11))


class TestTrainSdm:
    def test_bad_scale_rejected(self, analytic_coarse):
        with pytest.raises(ConfigurationError):
            train_sdm(analytic_coarse, [object()], 3)

    def test_patch_too_large_rejected(self, analytic_coarse, tiny_scene_dir):
        images, _ = load_dataset(tiny_scene_dir)
        with pytest.raises(ConfigurationError):
            train_sdm(analytic_coarse, images, 2, steps=2, patch=64)

    def test_loss_decreases_and_curve_format(self, analytic_coarse, tiny_scene_dir):
        images, _ = load_dataset(tiny_scene_dir)
        net, curve = train_sdm(analytic_coarse, images, 2, steps=60, patch=8,
                               batch=4, seed=0, n_samples=48)
        assert len(curve) == 60
        assert all(isinstance(s, int) and isinstance(v, float) for s, v in curve)
        first = np.mean([v for _, v in curve[:6]])
        last = np.mean([v for _, v in curve[-6:]])
        assert last < first
        assert not net.training  # returned frozen for inference

    def test_seed_determinism(self, analytic_coarse, tiny_scene_dir):
        images, _ = load_dataset(tiny_scene_dir)
        kw = dict(steps=12, patch=8, batch=2, n_samples=32)
        net_a, curve_a = train_sdm(analytic_coarse, images, 2, seed=5, **kw)
        net_b, curve_b = train_sdm(analytic_coarse, images, 2, seed=5, **kw)
        net_c, _ = train_sdm(analytic_coarse, images, 2, seed=6, **kw)
        sa, sb, sc = net_a.state_dict(), net_b.state_dict(), net_c.state_dict()
        assert all(torch.equal(sa[k], sb[k]) for k in sa)
        assert curve_a == curve_b
        assert any(not torch.equal(sa[k], sc[k]) for k in sa)

    def test_trained_beats_untrained_on_held_out_view(self, analytic_coarse, tiny_scene_dir):
        from zssrt.renderer import render_image

        images, _ = load_dataset(tiny_scene_dir)
        train_views, held_out = images[:-1], images[-1]
        net, _ = train_sdm(analytic_coarse, train_views, 2, steps=150, patch=8,
                           batch=4, seed=0, n_samples=48)
        render = render_image(analytic_coarse, held_out.pose, s=1, n_samples=48)
        x = torch.from_numpy(render.rgb)
        target = torch.from_numpy(box_downsample(held_out.pixels, 2).astype(np.float32))
        untrained = SdmNetwork(2, seed=0)
        untrained.eval()
        with torch.no_grad():
            mse_trained = float(F.mse_loss(net(x), target))
            mse_untrained = float(F.mse_loss(untrained(x), target))
        assert mse_trained < mse_untrained

    def test_divergence_guard(self, analytic_coarse, tiny_scene_dir):
        images, _ = load_dataset(tiny_scene_dir)
        with pytest.raises(DivergenceError):
            train_sdm(analytic_coarse, images, 2, steps=8, patch=8, batch=2,
                      lr=1e32, n_samples=16)
