import numpy as np
import pytest

from voxstudio import datagen as dg
from voxstudio.cameras import Intrinsics, make_view_ring
from voxstudio.errors import InvalidInputError


class TestMakeObject:
    def test_deterministic_per_seed(self):
        a = dg.make_object(7)
        b = dg.make_object(7)
        assert a.category_tag == b.category_tag
        assert np.array_equal(a.detail_mesh.vertices, b.detail_mesh.vertices)
        assert np.array_equal(a.detail_mesh.colors, b.detail_mesh.colors)
        for pa, pb in zip(a.proxy.primitives, b.proxy.primitives):
            assert np.array_equal(pa.center, pb.center)

    def test_proxies_validate(self):
        for seed in range(24):
            obj = dg.make_object(seed)
            obj.proxy.validate()
            assert 1 <= len(obj.proxy.primitives) <= 6

    def test_category_coverage(self):
        # smaller sample than the full generator sweep, same ratios expected
        n = 400
        counts = {}
        for seed in range(n):
            obj = dg.make_object(seed)
            counts[obj.category_tag] = counts.get(obj.category_tag, 0) + 1
        assert set(counts) == set(dg.CATEGORIES)
        for cat, c in counts.items():
            assert c >= 0.1 * n, f"{cat} underrepresented: {c}/{n}"

    def test_detail_mesh_within_bounds_margin(self):
        for seed in range(12):
            obj = dg.make_object(seed)
            v = obj.detail_mesh.vertices
            assert np.abs(v).max() <= 1.25

    def test_proxy_coarseness(self):
        # the detail mesh must deviate from the proxy surface
        for seed in range(6):
            obj = dg.make_object(seed)
            assert dg.surface_distance(obj) > 0


class TestRenderViews:
    def _views(self, n=4, size=48):
        return make_view_ring(n, intrinsics=Intrinsics.square(size))

    def test_paper_preset_ring(self):
        ring = make_view_ring(16, elevation=-30.0)
        assert len(ring) == 16
        assert all(p.elevation == -30.0 for p in ring)

    def test_masks_nonempty_every_view(self):
        views = self._views()
        for seed in range(4):
            obj = dg.make_object(seed)
            _, masks, _ = dg.render_views(obj, views, 48)
            assert (masks.reshape(len(views), -1).sum(axis=1) > 0).all()

    def test_depth_range_at_mask(self):
        views = self._views()
        obj = dg.make_object(1)
        _, masks, depths = dg.render_views(obj, views, 48)
        d = depths[masks > 0]
        assert d.min() > views[0].radius - 1.25
        assert d.max() < views[0].radius + 1.25

    def test_deterministic(self):
        views = self._views(2)
        obj = dg.make_object(3)
        a = dg.render_views(obj, views, 32)
        b = dg.render_views(obj, views, 32)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestBuildDataset:
    def test_layout_checksums_and_refusal(self, tmp_path):
        views = make_view_ring(2, intrinsics=Intrinsics.square(32))
        out = tmp_path / "ds"
        manifest = dg.build_dataset(3, views, out, size=32)
        assert manifest["n_objects"] == 3
        assert (out / "manifest.json").exists()
        for i in range(3):
            d = out / f"obj_{i:05d}"
            assert (d / "proxy.json").exists()
            assert (d / "poses.json").exists()
            assert (d / "samples.bin").exists()
            for v in range(2):
                assert (d / f"view_{v:02d}.png").exists()
                assert (d / f"mask_{v:02d}.png").exists()
        assert dg.verify_manifest(out)
        with pytest.raises(InvalidInputError):
            dg.build_dataset(1, views, out, size=32)

    def test_sample_count_default(self, tmp_path):
        views = make_view_ring(1, intrinsics=Intrinsics.square(32))
        dg.build_dataset(1, views, tmp_path / "d", size=32)
        raw = (tmp_path / "d" / "obj_00000" / "samples.bin").read_bytes()
        assert len(raw) == 256 * 4 * 4  # 256 samples x (xyz + part) x f32

    def test_rebuild_identical_checksums(self, tmp_path):
        views = make_view_ring(2, intrinsics=Intrinsics.square(32))
        m1 = dg.build_dataset(2, views, tmp_path / "a", size=32)
        m2 = dg.build_dataset(2, views, tmp_path / "b", size=32)
        for e1, e2 in zip(m1["objects"], m2["objects"]):
            assert e1["checksums"] == e2["checksums"]

    def test_load_round_trip(self, tmp_path):
        views = make_view_ring(2, intrinsics=Intrinsics.square(32))
        dg.build_dataset(1, views, tmp_path / "d", size=32)
        proxy, images, masks, ring = dg.load_object_views(tmp_path / "d", 0)
        assert images.shape == (2, 3, 32, 32)
        assert masks.shape == (2, 32, 32)
        assert images.min() >= -1.0 and images.max() <= 1.0
        proxy.validate()


@pytest.mark.slow
def test_smoke_set_builds_under_a_minute(tmp_path):
    import time

    views = make_view_ring(8, intrinsics=Intrinsics.square(64))
    t0 = time.time()
    dg.build_dataset(16, views, tmp_path / "smoke", size=64)
    assert time.time() - t0 < 60.0
