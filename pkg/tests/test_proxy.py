import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxstudio import proxy as px
from voxstudio.cameras import CameraPose, Intrinsics
from voxstudio.errors import (
    InvalidInputError,
    InvalidPartError,
    OutOfBoundsError,
    ProxyValidationError,
)

IDENT = np.array([1.0, 0.0, 0.0, 0.0])


def sphere(radius, center=(0, 0, 0), part_id=0):
    return px.Primitive("sphere", np.asarray(center, float), np.full(3, radius), IDENT, part_id)


def single_sphere_proxy(radius=0.8):
    return px.ProxyShape((sphere(radius),))


def brute_force_cells(points, resolution, bounds):
    """Independent per-point rasterization: plain python loop."""
    occupied = set()
    for p in points:
        idx = []
        for a in range(3):
            rel = (p[a] - bounds.min[a]) / (bounds.max[a] - bounds.min[a])
            i = math.floor(rel * resolution)
            idx.append(min(max(i, 0), resolution - 1))
        occupied.add(tuple(idx))
    return occupied


class TestSampleSurface:
    def test_default_adapter_count(self):
        samples = px.sample_surface(single_sphere_proxy(), 256, seed=0)
        assert len(samples.points) == 256

    def test_unit_sphere_points_on_surface(self):
        prox = px.ProxyShape((sphere(1.0),), px.Box(np.full(3, -2.0), np.full(3, 2.0)))
        samples = px.sample_surface(prox, 1000, seed=3)
        r = np.linalg.norm(samples.points, axis=1)
        assert np.all(np.abs(r - 1.0) < 1e-5)

    def test_area_proportional_allocation(self):
        # areas A and 4A (radius 1 and 2): expect (1000, 4000) of 5000
        prox = px.ProxyShape(
            (sphere(1.0, (-4, 0, 0), part_id=0), sphere(2.0, (4, 0, 0), part_id=1)),
            px.Box(np.full(3, -8.0), np.full(3, 8.0)),
        )
        a0 = 4 * math.pi * 1.0**2
        a1 = 4 * math.pi * 2.0**2
        p0 = a0 / (a0 + a1)
        n = 5000
        samples = px.sample_surface(prox, n, seed=0)
        n0 = int((samples.source_part == 0).sum())
        sigma = math.sqrt(n * p0 * (1 - p0))
        assert abs(n0 - n * p0) <= 3 * sigma
        assert n0 + int((samples.source_part == 1).sum()) == n

    def test_deterministic_per_seed(self):
        prox = single_sphere_proxy()
        a = px.sample_surface(prox, 500, seed=42)
        b = px.sample_surface(prox, 500, seed=42)
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.source_part, b.source_part)
        c = px.sample_surface(prox, 500, seed=43)
        assert not np.array_equal(a.points, c.points)

    def test_empty_proxy_rejected(self):
        with pytest.raises((InvalidInputError, ProxyValidationError)):
            px.sample_surface(px.ProxyShape(()), 10, seed=0)

    @pytest.mark.parametrize("kind,he", [
        ("cuboid", (0.3, 0.5, 0.2)),
        ("cylinder", (0.3, 0.4, 0.3)),
        ("cone", (0.35, 0.45, 0.35)),
        ("sphere", (0.3, 0.5, 0.4)),
    ])
    def test_points_lie_on_surface(self, kind, he):
        prim = px.Primitive(kind, np.zeros(3), np.array(he), IDENT, 0)
        pts = prim.sample_surface(2000, np.random.default_rng(0))
        hx, hy, hz = he
        if kind == "cuboid":
            on = np.min(np.abs(np.abs(pts) - np.array(he)), axis=1)
            assert np.all(on < 1e-9)
            assert np.all(np.abs(pts) <= np.array(he) + 1e-9)
        elif kind == "sphere":
            val = (pts[:, 0] / hx) ** 2 + (pts[:, 1] / hy) ** 2 + (pts[:, 2] / hz) ** 2
            assert np.all(np.abs(val - 1.0) < 1e-9)
        elif kind == "cylinder":
            rad = np.hypot(pts[:, 0], pts[:, 2])
            lateral = np.abs(rad - hx) < 1e-9
            cap = (np.abs(np.abs(pts[:, 1]) - hy) < 1e-9) & (rad <= hx + 1e-9)
            assert np.all(lateral | cap)
        else:  # cone, apex at +hy
            rho = hx * (hy - pts[:, 1]) / (2 * hy)
            rad = np.hypot(pts[:, 0], pts[:, 2])
            lateral = np.abs(rad - rho) < 1e-9
            base = (np.abs(pts[:, 1] + hy) < 1e-9) & (rad <= hx + 1e-9)
            assert np.all(lateral | base)


class TestVoxelize:
    def test_single_point_center_cell(self):
        samples = px.PointSamples(np.array([[0.0, 0.0, 0.0]]), np.array([0]))
        grid = px.voxelize(samples, 32)
        occ = np.argwhere(grid.cells)
        assert occ.shape == (1, 3)
        assert tuple(occ[0]) == (16, 16, 16)

    def test_empty_needs_flag(self):
        empty = np.zeros((0, 3))
        with pytest.raises(InvalidInputError):
            px.voxelize(empty, 8)
        grid = px.voxelize(empty, 8, allow_empty=True)
        assert grid.cells.sum() == 0

    def test_sphere_matches_bruteforce_oracle(self):
        prox = single_sphere_proxy(0.8)
        samples = px.sample_surface(prox, 4096, seed=1)
        grid = px.voxelize(samples, 32)
        oracle = brute_force_cells(samples.points, 32, px.Box.unit())
        ours = {tuple(i) for i in np.argwhere(grid.cells)}
        assert ours == oracle

    def test_out_of_bounds_names_index(self):
        pts = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        with pytest.raises(OutOfBoundsError, match="sample 1"):
            px.voxelize(px.PointSamples(pts, np.zeros(2, int)), 8)

    def test_boundary_point_clamped(self):
        pts = np.array([[1.0, 1.0, 1.0]])  # exactly at max corner
        grid = px.voxelize(px.PointSamples(pts, np.zeros(1, int)), 8)
        assert grid.cells[7, 7, 7] == 1

    def test_idempotent_on_cell_centers(self):
        prox = single_sphere_proxy(0.7)
        samples = px.sample_surface(prox, 2048, seed=5)
        grid = px.voxelize(samples, 16)
        centers = grid.cell_centers()[grid.cells.ravel() > 0]
        again = px.voxelize(centers, 16)
        assert np.array_equal(again.cells, grid.cells)


class TestPartMask:
    def test_radius_zero_equals_raw_occupancy(self):
        prox = px.normalize(px.ProxyShape((sphere(0.5, (-0.3, 0, 0), 0), sphere(0.3, (0.5, 0, 0), 1))))
        mask = px.part_mask(prox, {0}, 16, dilation_radius=0, seed=7)
        samples = px.samples_by_density(prox, {0}, 16, px.MASK_SAMPLES_PER_CELL, seed=7)
        grid = px.voxelize(samples, 16, prox.bounds)
        assert np.array_equal(mask.values > 0, grid.cells > 0)

    def test_interior_cell_dilation_27(self):
        values = np.zeros((8, 8, 8))
        values[4, 4, 4] = 1
        out = px.dilate_mask(values, 1)
        assert out.sum() == 27

    def test_corner_cell_dilation_8(self):
        values = np.zeros((8, 8, 8))
        values[0, 0, 0] = 1
        out = px.dilate_mask(values, 1)
        assert out.sum() == 8

    def test_unknown_part_rejected(self):
        prox = single_sphere_proxy()
        with pytest.raises(InvalidPartError):
            px.part_mask(prox, {99}, 16)
        with pytest.raises(InvalidPartError):
            px.part_mask(prox, set(), 16)

    def test_dilation_monotone(self):
        prox = px.normalize(px.ProxyShape((sphere(0.4, (0, 0.2, 0), 0),)))
        prev = None
        for r in range(4):
            mask = px.part_mask(prox, {0}, 16, dilation_radius=r, seed=2)
            if prev is not None:
                assert np.all(mask.support() >= prev)
            prev = mask.support()

    def test_subset_of_full_proxy_occupancy(self):
        prox = px.normalize(
            px.ProxyShape((sphere(0.5, (-0.4, 0, 0), 0), sphere(0.4, (0.5, 0.1, 0), 1)))
        )
        mask = px.part_mask(prox, {1}, 16, dilation_radius=0, seed=9)
        full = px.samples_by_density(prox, prox.part_ids, 16, px.MASK_SAMPLES_PER_CELL, seed=9)
        grid = px.voxelize(full, 16, prox.bounds)
        assert np.all(grid.cells[mask.support()] == 1)

    def test_monotone_part_selection(self):
        prox = px.normalize(
            px.ProxyShape((sphere(0.5, (-0.4, 0, 0), 0), sphere(0.4, (0.5, 0.1, 0), 1)))
        )
        small = px.part_mask(prox, {0}, 16, 1, seed=3)
        big = px.part_mask(prox, {0, 1}, 16, 1, seed=3)
        assert np.all(big.support() >= small.support())


class TestSilhouette:
    def _pose(self, size=96, radius=2.5):
        return CameraPose(0.0, 0.0, radius, Intrinsics.square(size))

    def test_sphere_projected_disk_radius(self):
        r, d = 0.5, 2.5
        prox = px.ProxyShape((sphere(r),))
        pose = self._pose()
        sil = px.render_silhouette(prox, pose, 96, 96)
        assert not sil.empty
        # analytic contour radius of a sphere under a pinhole camera
        expected = pose.intrinsics.focal * r / math.sqrt(d * d - r * r)
        area = sil.pixels.sum()
        measured = math.sqrt(area / math.pi)
        assert abs(measured - expected) <= 1.0

    def test_empty_view_flagged(self):
        prox = px.ProxyShape((sphere(0.1, (0, 0, 0), 0),))
        pose = CameraPose(0.0, 0.0, 2.5, Intrinsics.square(64), look_at=np.array([100.0, 0, 0]))
        sil = px.render_silhouette(prox, pose, 64, 64)
        assert sil.empty
        assert sil.pixels.sum() == 0

    def test_cuboid_straight_on_rectangle(self):
        prim = px.Primitive("cuboid", np.zeros(3), np.array([0.5, 0.3, 0.4]), IDENT, 0)
        prox = px.ProxyShape((prim,))
        pose = self._pose(size=128)
        sil = px.render_silhouette(prox, pose, 128, 128)
        rows = np.flatnonzero(sil.pixels.any(axis=1))
        cols = np.flatnonzero(sil.pixels.any(axis=0))
        sub = sil.pixels[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
        # filled axis-aligned rectangle: full interior coverage
        assert sub.mean() > 0.99

    @pytest.mark.parametrize("kind,he", [
        ("cylinder", (0.4, 0.5, 0.4)),
        ("cone", (0.45, 0.5, 0.45)),
    ])
    def test_solids_cover_center(self, kind, he):
        prim = px.Primitive(kind, np.zeros(3), np.array(he), IDENT, 0)
        sil = px.render_silhouette(px.ProxyShape((prim,)), self._pose(), 96, 96)
        assert sil.pixels[48, 48] == 1
        assert 0.02 < sil.pixels.mean() < 0.6


class TestValidationAndIO:
    def test_negative_extent_names_field(self):
        doc = {
            "version": 1,
            "primitives": [
                {"kind": "sphere", "center": [0, 0, 0], "half_extents": [-0.5, 0.5, 0.5],
                 "rotation": [1, 0, 0, 0], "part_id": 0}
            ],
        }
        with pytest.raises(ProxyValidationError) as err:
            px.proxy_from_dict(doc)
        assert "primitives[0].half_extents" in str(err.value)

    def test_duplicate_part_ids_rejected(self):
        prox = px.ProxyShape((sphere(0.4, (-0.5, 0, 0), 1), sphere(0.4, (0.5, 0, 0), 1)))
        with pytest.raises(ProxyValidationError):
            prox.validate()

    def test_round_trip(self, tmp_path):
        prox = px.normalize(
            px.ProxyShape(
                (
                    sphere(0.5, (0, 0.2, 0), 0),
                    px.Primitive("cone", np.array([0.0, 0.9, 0.0]), np.array([0.3, 0.25, 0.3]), IDENT, 1, label="hat"),
                )
            )
        )
        path = tmp_path / "proxy.json"
        px.save_proxy(prox, path)
        back = px.load_proxy(path)
        for a, b in zip(prox.primitives, back.primitives):
            assert a.kind == b.kind
            np.testing.assert_allclose(a.center, b.center, atol=1e-12)
            np.testing.assert_allclose(a.half_extents, b.half_extents, atol=1e-12)
            assert a.part_id == b.part_id
            assert a.label == b.label

    def test_normalize_fits_margin(self):
        prox = px.ProxyShape(
            (sphere(3.0, (5, 5, 5), 0),),
            px.Box(np.full(3, -100.0), np.full(3, 100.0)),
        )
        norm = px.normalize(prox)
        lo, hi = norm.union_aabb()
        assert np.all(lo >= -0.9 - 1e-9) and np.all(hi <= 0.9 + 1e-9)
        norm.validate()


@settings(max_examples=25, deadline=None)
@given(
    st.integers(min_value=0, max_value=2),
    st.integers(min_value=0, max_value=3),
)
def test_dilation_never_shrinks(seed, radius):
    rng = np.random.default_rng(seed)
    values = (rng.uniform(size=(10, 10, 10)) < 0.1).astype(np.float32)
    out = px.dilate_mask(values, radius)
    assert np.all(out[values > 0] == 1.0)
    assert out.sum() >= (values > 0).sum()
