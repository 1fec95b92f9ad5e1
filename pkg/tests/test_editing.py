import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from voxstudio import editing as ed
from voxstudio.cache import VolumeCache
from voxstudio.cameras import CameraPose, Intrinsics
from voxstudio.config import TINY, ControlStrength
from voxstudio.diffusion import CandidateImage
from voxstudio.errors import CacheMissError, InvalidInputError, InvalidPartError, ShapeError
from voxstudio.model import StudioModel
from voxstudio.proxy import Box, Primitive, ProxyShape, VolumeMask, normalize, render_silhouette
from voxstudio.volumes import FeatureVolume

IDENT = np.array([1.0, 0.0, 0.0, 0.0])


def two_part_proxy():
    return normalize(
        ProxyShape(
            (
                Primitive("sphere", np.array([0.0, -0.25, 0.0]), np.full(3, 0.45), IDENT, 0),
                Primitive("sphere", np.array([0.0, 0.4, 0.0]), np.full(3, 0.3), IDENT, 1),
            )
        )
    )


def vol_of(value, c=2, v=4, tag=None):
    return FeatureVolume(torch.full((c, v, v, v), float(value)), timestep_tag=tag)


class TestFuseVolumes:
    def test_mask_zero_keeps_cached(self):
        mask = torch.zeros((4, 4, 4))
        out = ed.fuse_volumes(vol_of(2.0), vol_of(4.0), mask)
        assert torch.equal(out.values, vol_of(2.0).values)

    def test_mask_one_takes_fresh(self):
        mask = torch.ones((4, 4, 4))
        out = ed.fuse_volumes(vol_of(2.0), vol_of(4.0), mask)
        assert torch.equal(out.values, vol_of(4.0).values)

    def test_half_blend(self):
        mask = torch.full((4, 4, 4), 0.5)
        out = ed.fuse_volumes(vol_of(2.0), vol_of(4.0), mask)
        assert torch.allclose(out.values, torch.full((2, 4, 4, 4), 3.0))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ed.fuse_volumes(vol_of(1.0, v=4), vol_of(1.0, v=8), torch.zeros((4, 4, 4)))
        with pytest.raises(ShapeError):
            ed.fuse_volumes(vol_of(1.0), vol_of(1.0), torch.zeros((8, 8, 8)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_idempotent_for_any_mask(self, seed):
        gen = torch.Generator().manual_seed(seed)
        x = FeatureVolume(torch.randn((2, 4, 4, 4), generator=gen))
        mask = torch.rand((4, 4, 4), generator=gen)
        out = ed.fuse_volumes(x, x, mask)
        assert torch.allclose(out.values, x.values, atol=1e-6)

    def test_binary_mask_unmasked_bit_identical(self):
        gen = torch.Generator().manual_seed(0)
        cached = FeatureVolume(torch.randn((3, 6, 6, 6), generator=gen))
        fresh = FeatureVolume(torch.randn((3, 6, 6, 6), generator=gen))
        mask = (torch.rand((6, 6, 6), generator=gen) < 0.3).float()
        out = ed.fuse_volumes(cached, fresh, mask)
        outside = mask == 0
        assert torch.equal(out.values[:, outside], cached.values[:, outside])
        assert torch.equal(out.values[:, ~outside], fresh.values[:, ~outside])


class TestProjectPartMask:
    def test_empty_mask_empty_image(self):
        mask = VolumeMask(8, np.zeros((8, 8, 8), np.float32))
        pose = CameraPose(0.0, -30.0, 2.5, Intrinsics.square(32))
        out = ed.project_part_mask(mask, pose, 32, 32)
        assert out.sum() == 0

    def test_full_volume_matches_bounds_silhouette(self):
        mask = VolumeMask(16, np.ones((16, 16, 16), np.float32))
        pose = CameraPose(25.0, -30.0, 2.5, Intrinsics.square(64))
        out = ed.project_part_mask(mask, pose, 64, 64).astype(bool)
        cube = ProxyShape(
            (Primitive("cuboid", np.zeros(3), np.ones(3), IDENT, 0),),
            Box(np.full(3, -2.0), np.full(3, 2.0)),
        )
        sil = render_silhouette(cube, pose, 64, 64).pixels.astype(bool)
        from scipy import ndimage

        grown = ndimage.binary_dilation(sil, np.ones((5, 5), bool))
        # projected footprint covers the analytic silhouette (mask is
        # 1px-dilated) and stays within a small band around it
        assert np.all(out[sil])
        assert np.all(grown[out])

    def test_single_axis_voxel_contains_principal_point(self):
        v = 16
        values = np.zeros((v, v, v), np.float32)
        # the cell containing the origin lies on the optical axis
        values[8, 8, 8] = 1.0
        mask = VolumeMask(v, values)
        pose = CameraPose(0.0, 0.0, 2.5, Intrinsics.square(64))
        out = ed.project_part_mask(mask, pose, 64, 64)
        assert out[32, 32] == 1
        assert 0 < out.sum() < 0.1 * 64 * 64  # compact blob


class TestInpaint:
    def _model(self):
        torch.manual_seed(0)
        return StudioModel(TINY)

    def _candidate(self, size=16):
        rng = np.random.default_rng(3)
        return CandidateImage(rng.uniform(0, 1, (3, size, size)).astype(np.float32))

    def test_empty_mask_no_op(self):
        model = self._model()
        cand = self._candidate()
        res = ed.inpaint_candidate(cand, np.zeros((16, 16)), "generic", 0, model)
        assert res.no_op
        assert np.array_equal(res.image.pixels, cand.pixels)

    def test_unmasked_preserved_masked_resampled(self):
        model = self._model()
        cand = self._candidate()
        mask = np.zeros((16, 16))
        mask[4:10, 4:10] = 1
        res = ed.inpaint_candidate(cand, mask, "generic", 7, model, steps=4)
        assert not res.no_op
        out, orig = res.image.pixels, cand.pixels
        un = mask == 0
        assert np.abs(out[:, un] - orig[:, un]).max() <= 1.0 / 255.0
        assert np.abs(out[:, ~un] - orig[:, ~un]).mean() > 0

    def test_preserved_for_every_seed(self):
        model = self._model()
        cand = self._candidate()
        mask = np.zeros((16, 16))
        mask[2:7, 9:14] = 1
        for seed in range(4):
            res = ed.inpaint_candidate(cand, mask, "generic", seed, model, steps=3)
            un = mask == 0
            assert np.abs(res.image.pixels[:, un] - cand.pixels[:, un]).max() <= 1.0 / 255.0


class TestMixedConditions:
    def _views(self, azimuths):
        intr = Intrinsics.square(16)
        from voxstudio.cameras import ViewSet

        return ViewSet(tuple(CameraPose(a, -30.0, 2.5, intr) for a in azimuths))

    def test_single_condition_unit_weight(self):
        views = self._views([0, 90, 180])
        w = ed.condition_weights([(None, 0.0)], views)
        assert torch.allclose(w, torch.ones((3, 1)))

    def test_zero_temperature_picks_coincident(self):
        views = self._views([40.0])
        w = ed.condition_weights([(None, 40.0), (None, 200.0)], views, temperature=1e-12)
        assert w[0, 0] == pytest.approx(1.0)
        assert w[0, 1] == pytest.approx(0.0)

    def test_antipodal_anchors_split_evenly(self):
        views = self._views([90.0])
        w = ed.condition_weights([(None, 0.0), (None, 180.0)], views, temperature=10.0)
        assert w[0, 0] == pytest.approx(0.5)
        assert w[0, 1] == pytest.approx(0.5)

    def test_empty_conditions_error(self):
        with pytest.raises(InvalidInputError):
            ed.condition_weights([], self._views([0.0]))

    def test_embedding_blend(self):
        torch.manual_seed(0)
        model = StudioModel(TINY)
        views = self._views([0.0, 180.0])
        rng = np.random.default_rng(0)
        a = CandidateImage(rng.uniform(0, 1, (3, 16, 16)).astype(np.float32))
        b = CandidateImage(rng.uniform(0, 1, (3, 16, 16)).astype(np.float32))
        emb = ed.mixed_denoise_conditions([(a, 0.0), (b, 180.0)], views, model.encoder, temperature=1e-12)
        np.testing.assert_allclose(emb[0].numpy(), a.embed(model.encoder), atol=1e-6)
        np.testing.assert_allclose(emb[1].numpy(), b.embed(model.encoder), atol=1e-6)


@pytest.fixture(scope="module")
def edit_session():
    torch.manual_seed(0)
    model = StudioModel(TINY)
    model.trained = True
    proxy = two_part_proxy()
    ring = TINY.view_ring()
    rng = np.random.default_rng(1)
    cand = CandidateImage(rng.uniform(0, 1, (3, 16, 16)).astype(np.float32))
    strength = ControlStrength(n_samples=96)
    result = model.sample(proxy, cand, strength, ring, seed=3)
    cache = VolumeCache.from_trace("gen0", result.volume_trace, result.step_plan)
    return model, proxy, ring, cand, strength, result, cache


class TestEditPart:
    def test_requires_cache(self, edit_session):
        model, proxy, ring, cand, strength, _, _ = edit_session
        empty = VolumeCache("none")
        req = ed.EditRequest(part_ids={1}, seed=0)
        with pytest.raises(CacheMissError):
            ed.edit_part(model, proxy, req, empty, cand, strength, ring)

    def test_invalid_parts(self, edit_session):
        model, proxy, ring, cand, strength, _, cache = edit_session
        with pytest.raises(InvalidPartError):
            ed.edit_part(model, proxy, ed.EditRequest(part_ids=set(), seed=0), cache, cand, strength, ring)
        with pytest.raises(InvalidPartError):
            ed.edit_part(model, proxy, ed.EditRequest(part_ids={42}, seed=0), cache, cand, strength, ring)

    def test_unmasked_voxels_bit_identical_all_steps(self, edit_session):
        model, proxy, ring, cand, strength, _, cache = edit_session
        req = ed.EditRequest(part_ids={1}, seed=11, dilation_radius=1)
        res = ed.edit_part(model, proxy, req, cache, cand, strength, ring)
        outside = res.mask.values == 0
        assert outside.any() and (~outside).any()
        assert len(res.volume_trace) == len(cache)
        for vol in res.volume_trace:
            cached = cache.load(vol.timestep_tag)
            diff = (vol.values[:, outside] - cached.values[:, outside]).abs()
            assert float(diff.max()) == 0.0

    def test_masked_region_changes(self, edit_session):
        model, proxy, ring, cand, strength, _, cache = edit_session
        req = ed.EditRequest(part_ids={1}, seed=11, dilation_radius=1)
        res = ed.edit_part(model, proxy, req, cache, cand, strength, ring)
        inside = res.mask.values > 0
        t0 = res.volume_trace[0].timestep_tag
        diff = (res.volume_trace[0].values[:, inside] - cache.load(t0).values[:, inside]).abs()
        assert float(diff.max()) > 0.0

    def test_monotone_edit_scope(self, edit_session):
        model, proxy, ring, cand, strength, _, cache = edit_session
        small = ed.edit_part(model, proxy, ed.EditRequest(part_ids={1}, seed=2), cache, cand, strength, ring)
        big = ed.edit_part(model, proxy, ed.EditRequest(part_ids={0, 1}, seed=2), cache, cand, strength, ring)
        assert np.all(big.mask.support() >= small.mask.support())

    def test_edit_view_produces_inpainted_condition(self, edit_session):
        model, proxy, ring, cand, strength, _, cache = edit_session
        req = ed.EditRequest(part_ids={1}, seed=5, edit_view=ring[1])
        res = ed.edit_part(model, proxy, req, cache, cand, strength, ring)
        assert res.edited_candidate is not None
        assert res.mask2d is not None and res.mask2d.sum() > 0
        assert res.edited_candidate.anchor_azimuth == ring[1].azimuth
