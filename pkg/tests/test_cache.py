import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from voxstudio import cache as pc
from voxstudio.cameras import Intrinsics, make_view_ring
from voxstudio.config import TINY, ControlStrength
from voxstudio.diffusion import CandidateImage
from voxstudio.errors import CacheMissError, InvalidInputError
from voxstudio.model import StudioModel
from voxstudio.proxy import Primitive, ProxyShape, normalize
from voxstudio.volumes import FeatureVolume

IDENT = np.array([1.0, 0.0, 0.0, 0.0])


@pytest.fixture(scope="module")
def generation():
    torch.manual_seed(0)
    model = StudioModel(TINY)
    model.trained = True
    proxy = normalize(
        ProxyShape((Primitive("sphere", np.array([0.0, 0.0, 0.0]), np.full(3, 0.5), IDENT, 0),))
    )
    ring = TINY.view_ring()
    rng = np.random.default_rng(2)
    cand = CandidateImage(rng.uniform(0, 1, (3, 16, 16)).astype(np.float32))
    strength = ControlStrength(n_samples=96)
    seed = 21
    result = model.sample(proxy, cand, strength, ring, seed=seed)
    cache = pc.VolumeCache.from_trace("gen-a", result.volume_trace, result.step_plan)
    return model, ring, cand, seed, result, cache


def small_volume(value, tag=None):
    return FeatureVolume(torch.full((2, 4, 4, 4), float(value)), timestep_tag=tag)


class TestVolumeCacheBasics:
    def test_store_load_identity(self):
        cache = pc.VolumeCache("g")
        vol = small_volume(1.25)
        cache.store(40, vol)
        out = cache.load(40)
        assert torch.equal(out.values, vol.values)
        assert out.timestep_tag == 40

    def test_overwrite_latest_wins(self):
        cache = pc.VolumeCache("g")
        cache.store(7, small_volume(1.0))
        cache.store(7, small_volume(2.0))
        assert float(cache.load(7).values[0, 0, 0, 0]) == 2.0
        assert len(cache) == 1

    def test_missing_step_raises_with_timestep(self):
        cache = pc.VolumeCache("g")
        with pytest.raises(CacheMissError) as err:
            cache.load(13)
        assert err.value.missing == [13]

    def test_tag_mismatch_rejected(self):
        cache = pc.VolumeCache("g")
        with pytest.raises(InvalidInputError):
            cache.store(3, small_volume(1.0, tag=5))

    def test_full_trace_memory_arithmetic(self):
        # 50-step trace of 32^3 x 64ch float32 ~= 419 MB: large enough that
        # the half-precision storage policy is the default
        bytes_full = 50 * 32**3 * 64 * 4
        assert bytes_full == 419_430_400
        assert pc.VolumeCache("g").half_precision is True

    def test_nearest(self):
        cache = pc.VolumeCache("g")
        for t in (90, 50, 10):
            cache.store(t, small_volume(0.0))
        assert cache.nearest(83) == 90
        assert cache.nearest(55) == 50
        assert cache.nearest(0) == 10


class TestCacheCoherenceAndPersistence:
    def test_cache_matches_trace_bit_identical(self, generation):
        _, _, _, _, result, cache = generation
        for vol in result.volume_trace:
            assert torch.equal(cache.load(vol.timestep_tag).values, vol.values)

    def test_persist_reload_bit_identical(self, generation, tmp_path):
        *_, cache = generation
        cache.persist(tmp_path / "c")
        back = pc.VolumeCache.load_dir(tmp_path / "c")
        assert back.generation_id == cache.generation_id
        assert back.timesteps() == cache.timesteps()
        # sampled volumes are already half-rounded, so reload is exact
        assert back.content_hash() == cache.content_hash()
        assert back.step_plan == cache.step_plan


class TestPreview:
    def test_ring_pose_full_steps_reproduces_generation(self, generation):
        model, ring, cand, seed, result, cache = generation
        for view_idx in (0, 2):
            img = pc.preview(cache, ring[view_idx], model, cand, seed, preview_steps=None, ring=ring)
            assert np.array_equal(img, result.images[view_idx])

    def test_repeat_preview_bitwise_identical(self, generation):
        model, ring, cand, seed, _, cache = generation
        pose = pc.transfer_viewpoint(
            {"azimuth": 45.0, "elevation": -25.0, "distance": 2.5}, ring[0].intrinsics
        )
        a = pc.preview(cache, pose, model, cand, seed, preview_steps=TINY.preview_steps, ring=ring)
        b = pc.preview(cache, pose, model, cand, seed, preview_steps=TINY.preview_steps, ring=ring)
        assert np.array_equal(a, b)

    def test_preview_never_mutates_cache(self, generation):
        model, ring, cand, seed, _, cache = generation
        before = cache.content_hash()
        pose = pc.transfer_viewpoint(
            {"azimuth": 123.0, "elevation": -40.0, "distance": 2.5}, ring[0].intrinsics
        )
        pc.preview(cache, pose, model, cand, seed, preview_steps=2, ring=ring)
        assert cache.content_hash() == before

    def test_missing_steps_listed(self, generation):
        model, ring, cand, seed, result, cache = generation
        partial = pc.VolumeCache("partial", cache.step_plan)
        ts = cache.timesteps()
        for t in ts[:-2]:
            partial.store(t, cache.load(t))
        with pytest.raises(CacheMissError) as err:
            pc.preview(partial, ring[0], model, cand, seed, preview_steps=None, ring=ring)
        assert set(err.value.missing) == set(ts[-2:])

    def test_shortened_preview_runs(self, generation):
        model, ring, cand, seed, _, cache = generation
        img = pc.preview(cache, ring[1], model, cand, seed, preview_steps=2, ring=ring)
        assert img.shape == (3, 16, 16)
        assert np.isfinite(img).all()


class TestTransferViewpoint:
    def test_identity_orbit_is_ring_pose_zero(self):
        ring = make_view_ring(16, elevation=-30.0, radius=2.5, intrinsics=Intrinsics.square(64))
        pose = pc.transfer_viewpoint(
            {"azimuth": 0.0, "elevation": -30.0, "distance": 2.5}, ring[0].intrinsics
        )
        assert pose.azimuth == ring[0].azimuth
        assert pose.elevation == ring[0].elevation
        assert pose.radius == ring[0].radius

    def test_paper_spacing_matches_ring_pose_one(self):
        ring = make_view_ring(16, elevation=-30.0, radius=2.5, intrinsics=Intrinsics.square(64))
        pose = pc.transfer_viewpoint(
            {"azimuth": 22.5, "elevation": -30.0, "distance": 2.5}, ring[0].intrinsics
        )
        assert pose.azimuth == ring[1].azimuth
        assert pose.elevation == ring[1].elevation

    def test_non_positive_distance_rejected(self):
        with pytest.raises(InvalidInputError):
            pc.transfer_viewpoint({"azimuth": 0, "elevation": 0, "distance": 0.0}, Intrinsics.square(64))

    @settings(max_examples=40, deadline=None)
    @given(
        st.floats(0.0, 359.999999),
        st.floats(-89.0, 89.0),
        st.floats(0.5, 10.0),
    )
    def test_orbit_round_trip(self, az, el, dist):
        intr = Intrinsics.square(64)
        orbit = {"azimuth": az, "elevation": el, "distance": dist}
        pose = pc.transfer_viewpoint(orbit, intr)
        back = pc.viewpoint_to_orbit(pose)
        assert abs(back["azimuth"] - az) < 1e-9
        assert abs(back["elevation"] - el) < 1e-9
        assert abs(back["distance"] - dist) < 1e-9


@pytest.mark.slow
def test_first_preview_frame_subsecond_at_desk_scale():
    # interaction budget: the first decoded frame of a preview responds
    # within a second at the desk configuration
    import time

    from voxstudio.config import PipelineConfig

    cfg = PipelineConfig()
    torch.manual_seed(0)
    model = StudioModel(cfg)
    model.trained = True
    vol = FeatureVolume(torch.randn(cfg.volume_channels, 32, 32, 32), timestep_tag=999)
    cache = pc.VolumeCache("g", [(999, None)])
    cache.store(999, vol)
    cand = CandidateImage(np.random.default_rng(0).uniform(0, 1, (3, 64, 64)).astype(np.float32))
    ring = cfg.view_ring()
    pc.preview(cache, ring[0], model, cand, 0, preview_steps=1, ring=ring)  # warm
    t0 = time.time()
    pc.preview(cache, ring[0], model, cand, 0, preview_steps=1, ring=ring)
    assert time.time() - t0 < 1.0


def test_half_precision_preview_within_two_gray_levels():
    # eviction safety: storing volumes at half precision moves decoded
    # preview pixels by at most 2 gray levels vs full-precision storage
    from dataclasses import replace

    from voxstudio.proxy import Primitive, ProxyShape, normalize

    ident = np.array([1.0, 0, 0, 0])
    proxy = normalize(ProxyShape((Primitive("sphere", np.zeros(3), np.full(3, 0.5), ident, 0),)))
    cand = CandidateImage(np.random.default_rng(0).uniform(0, 1, (3, 16, 16)).astype(np.float32))
    outs = {}
    for half in (True, False):
        torch.manual_seed(0)
        model = StudioModel(replace(TINY, cache_half_precision=half))
        model.trained = True
        res = model.sample(proxy, cand, ControlStrength(n_samples=64), TINY.view_ring(), seed=3)
        cache = pc.VolumeCache.from_trace("g", res.volume_trace, res.step_plan, half_precision=half)
        img = pc.preview(cache, TINY.view_ring()[1], model, cand, 3, preview_steps=None, ring=TINY.view_ring())
        outs[half] = np.round(img * 255)
    assert np.abs(outs[True] - outs[False]).max() <= 2.0
