import numpy as np
import pytest
import torch

from voxstudio.cameras import CameraPose, Intrinsics, ViewSet, make_view_ring
from voxstudio.config import ControlStrength
from voxstudio.errors import DegenerateInputError, ShapeError
from voxstudio.proxy import Box, OccupancyGrid
from voxstudio import volumes as vol


def tiny_adapter(res=8, ch=8, ray_samples=8):
    torch.manual_seed(0)
    return vol.ControlAdapter(
        resolution=res, channels=ch, widths=(8, 12, 16), ray_samples=ray_samples
    )


def grid_with(res, cells_on):
    cells = np.zeros((res,) * 3, dtype=np.uint8)
    for c in cells_on:
        cells[c] = 1
    return OccupancyGrid(res, Box.unit(), cells)


def numpy_trilinear(values, points):
    """Independent trilinear oracle over cell centers of [-1,1]^3."""
    c, v = values.shape[0], values.shape[1]
    out = np.zeros((len(points), c))
    for n, p in enumerate(points):
        idx = np.clip((p + 1.0) * 0.5 * v - 0.5, 0.0, v - 1.0)
        i0 = np.clip(np.floor(idx).astype(int), 0, v - 2)
        f = idx - i0
        acc = np.zeros(c)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (
                        (f[0] if dx else 1 - f[0])
                        * (f[1] if dy else 1 - f[1])
                        * (f[2] if dz else 1 - f[2])
                    )
                    acc += w * values[:, i0[0] + dx, i0[1] + dy, i0[2] + dz]
        out[n] = acc
    return out


class TestProxyVolume:
    def test_default_paper_shape(self):
        torch.manual_seed(0)
        adapter = vol.ControlAdapter(resolution=32, channels=64, widths=(8, 12, 16))
        grid = grid_with(32, [(16, 16, 16)])
        out = adapter.build_proxy_volume(grid)
        assert out.values.shape == (64, 32, 32, 32)

    def test_zero_grid_zero_bias_gives_zero(self):
        adapter = tiny_adapter()
        with torch.no_grad():
            adapter.lift.conv1.bias.zero_()
            adapter.lift.conv2.bias.zero_()
        out = adapter.build_proxy_volume(grid_with(8, []))
        assert torch.all(out.values == 0)

    def test_single_voxel_receptive_field(self):
        adapter = tiny_adapter()
        with torch.no_grad():
            base = adapter.build_proxy_volume(grid_with(8, [])).values
            lit = adapter.build_proxy_volume(grid_with(8, [(4, 4, 4)])).values
        diff = (lit - base).abs().sum(dim=0).numpy()
        support = np.argwhere(diff > 0)
        # two 3x3x3 convolutions: Chebyshev radius 2 around the voxel
        assert support.size > 0
        assert np.all(np.abs(support - np.array([4, 4, 4])) <= 2)

    def test_resolution_mismatch(self):
        adapter = tiny_adapter(res=8)
        with pytest.raises(ShapeError):
            adapter.build_proxy_volume(grid_with(16, []))


class TestMultiviewVolume:
    def _ring(self, n, size=16):
        return make_view_ring(n, intrinsics=Intrinsics.square(size))

    def test_constant_latents_constant_fusion(self):
        adapter = tiny_adapter()
        ring = self._ring(3)
        latents = torch.full((3, 3, 16, 16), 0.75)
        fused, count = adapter.fuse_view_features(latents, ring)
        visible = count.numpy() > 0
        values = fused.reshape(3, -1).numpy()[:, visible]
        np.testing.assert_allclose(values, 0.75, atol=1e-6)

    def test_single_view_mean_is_identity(self):
        adapter = tiny_adapter()
        ring = self._ring(1)
        gen = torch.Generator().manual_seed(1)
        latents = torch.randn((1, 3, 16, 16), generator=gen)
        fused, count = adapter.fuse_view_features(latents, ring)
        from voxstudio.cameras import gather_view_features

        feats, valid = gather_view_features(adapter._cell_centers, latents, ring)
        direct = feats[:, 0, :].transpose(0, 1).reshape(3, 8, 8, 8)
        mask = (count > 0).reshape(8, 8, 8)
        assert torch.allclose(fused[:, mask], direct[:, mask], atol=1e-7)

    def test_two_views_average(self):
        adapter = tiny_adapter()
        ring = self._ring(2)
        a = torch.full((1, 3, 16, 16), 2.0)
        b = torch.full((1, 3, 16, 16), 4.0)
        fused, count = adapter.fuse_view_features(torch.cat([a, b]), ring)
        both = (count == 2).reshape(8, 8, 8)
        assert both.any()
        np.testing.assert_allclose(fused[:, both].numpy(), 3.0, atol=1e-6)

    def test_no_visible_vertex_errors(self):
        adapter = tiny_adapter()
        pose = CameraPose(0.0, 0.0, 2.5, Intrinsics.square(16), look_at=np.array([500.0, 0.0, 0.0]))
        with pytest.raises(DegenerateInputError):
            adapter.fuse_view_features(torch.ones((1, 3, 16, 16)), ViewSet((pose,)))

    def test_shape_checks(self):
        adapter = tiny_adapter()
        with pytest.raises(ShapeError):
            adapter.fuse_view_features(torch.ones((2, 3, 16, 16)), self._ring(3))


class TestAdapterForward:
    def _volumes(self, adapter, seed=0):
        gen = torch.Generator().manual_seed(seed)
        f_v = vol.FeatureVolume(torch.randn((8, 8, 8, 8), generator=gen))
        f_i = vol.FeatureVolume(torch.randn((8, 8, 8, 8), generator=gen))
        return f_v, f_i

    def test_zero_init_injections_are_transparent(self):
        adapter = tiny_adapter()
        f_v, f_i = self._volumes(adapter)
        strength = ControlStrength(lam=1.0, s_end=1.0)
        with torch.no_grad():
            with_proxy = adapter.forward_control(f_v, f_i, strength, t=90, total_steps=100)
            without = adapter.forward_control(None, f_i, strength, t=90, total_steps=100)
        assert float((with_proxy.values - without.values).abs().max()) == 0.0

    def test_lambda_zero_matches_fusion_only(self):
        adapter = tiny_adapter()
        self._randomize_injections(adapter)
        f_v, f_i = self._volumes(adapter)
        with torch.no_grad():
            out = adapter.forward_control(f_v, f_i, ControlStrength(lam=0.0), 90, 100)
            base = adapter.forward_control(None, f_i, ControlStrength(lam=0.0), 90, 100)
        assert float((out.values - base.values).abs().max()) == 0.0

    def test_s_end_gates_late_steps(self):
        adapter = tiny_adapter()
        self._randomize_injections(adapter)
        f_v, f_i = self._volumes(adapter)
        strength = ControlStrength(lam=1.0, s_end=0.5)
        with torch.no_grad():
            # t=40 of 100: progress 0.6 past the midpoint -> injection off
            late = adapter.forward_control(f_v, f_i, strength, t=40, total_steps=100)
            base = adapter.forward_control(None, f_i, strength, t=40, total_steps=100)
            early = adapter.forward_control(f_v, f_i, strength, t=90, total_steps=100)
        assert float((late.values - base.values).abs().max()) == 0.0
        assert float((early.values - base.values).abs().max()) > 0.0

    def test_deterministic(self):
        adapter = tiny_adapter()
        self._randomize_injections(adapter)
        f_v, f_i = self._volumes(adapter)
        with torch.no_grad():
            a = adapter.forward_control(f_v, f_i, ControlStrength(), 90, 100)
            b = adapter.forward_control(f_v, f_i, ControlStrength(), 90, 100)
        assert torch.equal(a.values, b.values)

    def test_injection_linear_in_lambda_at_site(self):
        adapter = tiny_adapter()
        self._randomize_injections(adapter)
        f_v, f_i = self._volumes(adapter)
        with torch.no_grad():
            _, taps = adapter.proxy_unet(f_v.values[None])
            inj0 = adapter.injections[0](taps[0])
            # the injected term itself is exactly linear
            assert torch.equal(2.0 * (0.25 * inj0), 0.5 * inj0)
            # and the first tap of the fusion net shifts by exactly that term
            _, taps_a = adapter.fusion_unet(f_i.values[None], injections=[adapter.injections[i](taps[i]) for i in range(6)], lam=0.25)
            _, taps_b = adapter.fusion_unet(f_i.values[None], injections=[adapter.injections[i](taps[i]) for i in range(6)], lam=0.5)
            delta = taps_b[0] - taps_a[0]
            assert torch.allclose(delta, 0.25 * inj0, atol=1e-6)

    def test_channel_mismatch(self):
        adapter = tiny_adapter()
        f_v = vol.FeatureVolume(torch.zeros((4, 8, 8, 8)))
        f_i = vol.FeatureVolume(torch.zeros((8, 8, 8, 8)))
        with pytest.raises(ShapeError):
            adapter.forward_control(f_v, f_i, ControlStrength(), 90, 100)

    @staticmethod
    def _randomize_injections(adapter):
        gen = torch.Generator().manual_seed(123)
        with torch.no_grad():
            for conv in adapter.injections:
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.1)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.01)


class TestProjectControl:
    def test_constant_volume_gives_constant(self):
        adapter = tiny_adapter()
        volume = vol.FeatureVolume(torch.full((8, 8, 8, 8), 1.5))
        pose = CameraPose(30.0, -30.0, 2.5, Intrinsics.square(16))
        fmap, vmap = adapter.project_control(volume, pose, 16, 16)
        assert vmap.any()
        sel = fmap[:, vmap]
        np.testing.assert_allclose(sel.detach().numpy(), 1.5, atol=1e-5)

    def test_rays_outside_volume_zero(self):
        adapter = tiny_adapter()
        volume = vol.FeatureVolume(torch.full((8, 8, 8, 8), 1.5))
        pose = CameraPose(0.0, 0.0, 10.0, Intrinsics.square(16))
        fmap, vmap = adapter.project_control(volume, pose, 16, 16)
        assert (~vmap).any()
        assert torch.all(fmap[:, ~vmap] == 0.0)

    def test_uniform_attention_matches_trilinear_oracle(self):
        adapter = tiny_adapter(ray_samples=4)
        with torch.no_grad():
            adapter.projector.score.weight.zero_()
            adapter.projector.score.bias.zero_()
        gen = torch.Generator().manual_seed(5)
        values = torch.randn((8, 8, 8, 8), generator=gen)
        volume = vol.FeatureVolume(values)
        pose = CameraPose(45.0, -20.0, 2.5, Intrinsics.square(8))
        fmap, vmap = adapter.project_control(volume, pose, 8, 8)

        from voxstudio.cameras import pixel_rays

        origins, dirs = pixel_rays(pose, 8, 8)
        expected = np.zeros((64, 8))
        for i in range(64):
            o, d = origins[i], dirs[i]
            with np.errstate(divide="ignore"):
                t1 = (-1.0 - o) / d
                t2 = (1.0 - o) / d
            near = max(np.minimum(t1, t2).max(), 1e-4)
            far = np.maximum(t1, t2).min()
            if far <= near:
                continue
            steps = (np.arange(4) + 0.5) / 4
            z = near + (far - near) * steps
            pts = o[None] + z[:, None] * d[None]
            expected[i] = numpy_trilinear(values.numpy(), pts).mean(axis=0)
        got = fmap.reshape(8, -1).transpose(0, 1).detach().numpy()
        np.testing.assert_allclose(got, expected, atol=1e-5)

    def test_attention_weights_convex(self):
        adapter = tiny_adapter()
        gen = torch.Generator().manual_seed(9)
        with torch.no_grad():
            adapter.projector.score.weight.copy_(torch.randn((1, 8), generator=gen))
        volume = vol.FeatureVolume(torch.randn((8, 8, 8, 8), generator=gen))
        pose = CameraPose(10.0, -30.0, 2.5, Intrinsics.square(8))
        # convex-combination check: adding a constant channel must map to 1
        shifted = vol.FeatureVolume(torch.cat([volume.values[:7], torch.ones((1, 8, 8, 8))]))
        fmap, vmap = adapter.project_control(shifted, pose, 8, 8)
        ones = fmap[7][vmap]
        np.testing.assert_allclose(ones.detach().numpy(), 1.0, atol=1e-5)


def test_feature_volume_validation():
    with pytest.raises(ShapeError):
        vol.FeatureVolume(torch.zeros((8, 8, 8)))
    with pytest.raises(ShapeError):
        vol.FeatureVolume(torch.full((1, 2, 2, 2), float("nan")))


def test_trilinear_exact_at_centers():
    gen = torch.Generator().manual_seed(2)
    values = torch.randn((3, 6, 6, 6), generator=gen)
    centers = vol.grid_cell_centers(6)
    out = vol.trilinear_sample(values, torch.from_numpy(centers).float())
    expected = values.reshape(3, -1).transpose(0, 1)
    assert torch.allclose(out, expected, atol=1e-6)


def test_injection_convs_start_at_exact_zero():
    adapter = tiny_adapter()
    for conv in adapter.injections:
        assert torch.all(conv.weight == 0.0)
        assert torch.all(conv.bias == 0.0)
