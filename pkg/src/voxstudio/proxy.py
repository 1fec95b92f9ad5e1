"""Coarse shape proxies assembled from basic primitives.

A proxy is an ordered list of posed primitives (cuboid / sphere / cylinder /
cone), each carrying a part id. This module covers the full proxy lifecycle:
validation and normalization, area-weighted surface sampling, voxelization
into binary occupancy grids, part masks with cube-element dilation, analytic
silhouette rendering, and the JSON interchange format.

Conventions: right-handed Y-up world, quaternions as (w, x, y, z). Proxies
are normalized so their union bounding box fits inside [-0.9, 0.9]^3 before
any downstream processing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    InvalidInputError,
    InvalidPartError,
    OutOfBoundsError,
    ProxyValidationError,
)

PRIMITIVE_KINDS = ("cuboid", "sphere", "cylinder", "cone")

PROXY_FORMAT_VERSION = 1

# Surface-sample density used for part masks: samples per grid cell footprint.
MASK_SAMPLES_PER_CELL = 16.0

DEFAULT_DILATION_RADIUS = 2


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix from a unit quaternion (w, x, y, z)."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by min/max corners."""

    min: np.ndarray
    max: np.ndarray

    @staticmethod
    def unit() -> "Box":
        return Box(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def contains(self, points: np.ndarray, atol: float = 1e-9) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.min - atol) & (p <= self.max + atol), axis=1)


@dataclass(frozen=True)
class Primitive:
    """One posed basic shape.

    half_extents is interpreted per kind: half sizes for cuboids, per-axis
    radii for spheres (ellipsoids allowed), (radius, half_height, radius)
    for cylinders and cones. Cones point their apex toward local +Y.
    """

    kind: str
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray
    part_id: int
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(
            self, "half_extents", np.asarray(self.half_extents, dtype=np.float64)
        )
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))

    def validate(self, path: str = "primitive"):
        if self.kind not in PRIMITIVE_KINDS:
            raise ProxyValidationError(f"{path}.kind", f"unknown kind {self.kind!r}")
        if self.center.shape != (3,) or not np.all(np.isfinite(self.center)):
            raise ProxyValidationError(f"{path}.center", "must be a finite 3-vector")
        if self.half_extents.shape != (3,) or not np.all(np.isfinite(self.half_extents)):
            raise ProxyValidationError(f"{path}.half_extents", "must be a finite 3-vector")
        if np.any(self.half_extents <= 0):
            raise ProxyValidationError(
                f"{path}.half_extents", "must be strictly positive"
            )
        if self.rotation.shape != (4,):
            raise ProxyValidationError(f"{path}.rotation", "must be a quaternion (w,x,y,z)")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ProxyValidationError(f"{path}.rotation", "quaternion must have unit norm")
        if not isinstance(self.part_id, (int, np.integer)) or self.part_id < 0:
            raise ProxyValidationError(f"{path}.part_id", "must be a non-negative integer")
        if self.kind in ("cylinder", "cone"):
            hx, _, hz = self.half_extents
            if abs(hx - hz) > 1e-9 * max(hx, hz):
                raise ProxyValidationError(
                    f"{path}.half_extents",
                    f"{self.kind} cross-section must be circular (x and z radii equal)",
                )

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def world_aabb(self) -> tuple[np.ndarray, np.ndarray]:
        """Conservative world-space AABB of the primitive."""
        rot = self.rotation_matrix
        if self.kind == "sphere":
            # ellipsoid: half extent along axis i is ||row_i(R diag(he))||
            m = rot * self.half_extents[None, :]
            half = np.sqrt((m**2).sum(axis=1))
        else:
            half = np.abs(rot) @ self.half_extents
        return self.center - half, self.center + half

    def surface_area(self) -> float:
        hx, hy, hz = self.half_extents
        if self.kind == "cuboid":
            return 8.0 * (hx * hy + hy * hz + hx * hz)
        if self.kind == "sphere":
            if abs(hx - hy) < 1e-12 and abs(hy - hz) < 1e-12:
                return 4.0 * math.pi * hx * hx
            return _ellipsoid_area(hx, hy, hz)
        if self.kind == "cylinder":
            r, h = hx, 2.0 * hy
            return 2.0 * math.pi * r * h + 2.0 * math.pi * r * r
        if self.kind == "cone":
            r, h = hx, 2.0 * hy
            return math.pi * r * math.hypot(r, h) + math.pi * r * r
        raise InvalidInputError(f"unknown primitive kind {self.kind!r}")

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n points uniform on the surface, in world coordinates."""
        local = _sample_primitive_local(self, n, rng)
        return local @ self.rotation_matrix.T + self.center


def _ellipsoid_area(a: float, b: float, c: float, n_dirs: int = 4096) -> float:
    # Quadrature of the area element |cof(diag(a,b,c)) u| over the unit sphere,
    # evaluated on a Fibonacci direction set (deterministic).
    u = _fibonacci_sphere(n_dirs)
    w = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
    return float(4.0 * math.pi * w.mean())


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64) + 0.5
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    y = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)


def _sample_primitive_local(prim: Primitive, n: int, rng: np.random.Generator) -> np.ndarray:
    if n == 0:
        return np.zeros((0, 3))
    hx, hy, hz = prim.half_extents
    if prim.kind == "cuboid":
        return _sample_cuboid(hx, hy, hz, n, rng)
    if prim.kind == "sphere":
        return _sample_ellipsoid(hx, hy, hz, n, rng)
    if prim.kind == "cylinder":
        return _sample_cylinder(hx, hy, n, rng)
    if prim.kind == "cone":
        return _sample_cone(hx, hy, n, rng)
    raise InvalidInputError(f"unknown primitive kind {prim.kind!r}")


def _sample_cuboid(hx, hy, hz, n, rng):
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=n)
    v = rng.uniform(-1.0, 1.0, size=n)
    pts = np.empty((n, 3))
    signs = np.where(face % 2 == 0, 1.0, -1.0)
    axis = face // 2  # 0:+-x, 1:+-y, 2:+-z
    for ax in range(3):
        m = axis == ax
        o1, o2 = [a for a in range(3) if a != ax]
        he = (hx, hy, hz)
        pts[m, ax] = signs[m] * he[ax]
        pts[m, o1] = u[m] * he[o1]
        pts[m, o2] = v[m] * he[o2]
    return pts


def _sample_ellipsoid(a, b, c, n, rng):
    # Rejection on the unit sphere with the exact area-element weight, so
    # samples are area-uniform even for anisotropic radii.
    w_max = max(b * c, a * c, a * b)
    out = []
    got = 0
    while got < n:
        m = max(64, 2 * (n - got))
        u = rng.normal(size=(m, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        w = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
        keep = rng.uniform(size=m) * w_max <= w
        sel = u[keep]
        out.append(sel)
        got += len(sel)
    u = np.concatenate(out, axis=0)[:n]
    return u * np.array([a, b, c])


def _sample_cylinder(r, hy, n, rng):
    h = 2.0 * hy
    a_lat = 2.0 * math.pi * r * h
    a_cap = math.pi * r * r
    total = a_lat + 2.0 * a_cap
    which = rng.uniform(size=n) * total
    pts = np.empty((n, 3))
    lat = which < a_lat
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    pts[lat, 0] = r * np.cos(theta[lat])
    pts[lat, 2] = r * np.sin(theta[lat])
    pts[lat, 1] = rng.uniform(-hy, hy, size=int(lat.sum()))
    cap = ~lat
    rad = r * np.sqrt(rng.uniform(size=n))
    pts[cap, 0] = rad[cap] * np.cos(theta[cap])
    pts[cap, 2] = rad[cap] * np.sin(theta[cap])
    top = cap & (which >= a_lat + a_cap)
    pts[cap, 1] = -hy
    pts[top, 1] = hy
    return pts


def _sample_cone(r, hy, n, rng):
    # Apex at +hy, base disk at -hy with radius r.
    h = 2.0 * hy
    a_lat = math.pi * r * math.hypot(r, h)
    a_base = math.pi * r * r
    lat = rng.uniform(size=n) * (a_lat + a_base) < a_lat
    pts = np.empty((n, 3))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    # lateral: distance from apex ~ sqrt(u) (area grows linearly with radius)
    d = h * np.sqrt(rng.uniform(size=n))
    rho = r * d / h
    pts[lat, 0] = rho[lat] * np.cos(theta[lat])
    pts[lat, 2] = rho[lat] * np.sin(theta[lat])
    pts[lat, 1] = hy - d[lat]
    base = ~lat
    rad = r * np.sqrt(rng.uniform(size=n))
    pts[base, 0] = rad[base] * np.cos(theta[base])
    pts[base, 2] = rad[base] * np.sin(theta[base])
    pts[base, 1] = -hy
    return pts


@dataclass(frozen=True)
class ProxyShape:
    """Ordered assembly of primitives inside an axis-aligned bound."""

    primitives: tuple
    bounds: Box = field(default_factory=Box.unit)

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def validate(self):
        if not self.primitives:
            raise ProxyValidationError("primitives", "proxy has no primitives")
        seen = set()
        for i, prim in enumerate(self.primitives):
            prim.validate(path=f"primitives[{i}]")
            if prim.part_id in seen:
                raise ProxyValidationError(
                    f"primitives[{i}].part_id", f"duplicate part_id {prim.part_id}"
                )
            seen.add(prim.part_id)
        for i, prim in enumerate(self.primitives):
            lo, hi = prim.world_aabb()
            if np.any(lo < self.bounds.min - 1e-9) or np.any(hi > self.bounds.max + 1e-9):
                raise ProxyValidationError(
                    f"primitives[{i}]",
                    "primitive extends outside proxy bounds; normalize first",
                )

    @property
    def part_ids(self) -> tuple:
        return tuple(p.part_id for p in self.primitives)

    def parts(self, part_ids) -> "ProxyShape":
        wanted = set(part_ids)
        unknown = wanted - set(self.part_ids)
        if unknown:
            raise InvalidPartError(f"unknown part ids {sorted(unknown)}")
        return ProxyShape(
            tuple(p for p in self.primitives if p.part_id in wanted), self.bounds
        )

    def union_aabb(self) -> tuple[np.ndarray, np.ndarray]:
        los, his = zip(*(p.world_aabb() for p in self.primitives))
        return np.min(los, axis=0), np.max(his, axis=0)


def normalize(proxy: ProxyShape, margin: float = 0.9) -> ProxyShape:
    """Rescale and recenter so the union AABB fits [-margin, margin]^3."""
    if not proxy.primitives:
        raise ProxyValidationError("primitives", "proxy has no primitives")
    lo, hi = proxy.union_aabb()
    scale = 2.0 * margin / max(float(np.max(hi - lo)), 1e-12)
    mid = 0.5 * (lo + hi)
    prims = tuple(
        replace(
            p,
            center=(p.center - mid) * scale,
            half_extents=p.half_extents * scale,
        )
        for p in proxy.primitives
    )
    out = ProxyShape(prims, Box.unit())
    out.validate()
    return out


@dataclass(frozen=True)
class PointSamples:
    """Surface point samples with their source part ids."""

    points: np.ndarray  # (N, 3)
    source_part: np.ndarray  # (N,)

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64))
        object.__setattr__(
            self, "source_part", np.asarray(self.source_part, dtype=np.int64)
        )
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise InvalidInputError("points must be (N, 3)")
        if len(self.points) != len(self.source_part):
            raise InvalidInputError("points and source_part length mismatch")
        if len(self.points) < 1:
            raise InvalidInputError("need at least one sample")


def sample_surface(proxy: ProxyShape, n: int, seed: int) -> PointSamples:
    """Sample n surface points, allocated across primitives by surface area.

    Deterministic for a fixed (proxy, n, seed): each primitive draws from its
    own stream keyed by (seed, part_id), and the per-primitive counts come
    from a multinomial draw over normalized areas.
    """
    if n < 1:
        raise InvalidInputError("sample count must be >= 1")
    if not proxy.primitives:
        raise InvalidInputError("cannot sample an empty proxy")
    areas = np.array([p.surface_area() for p in proxy.primitives])
    probs = areas / areas.sum()
    counts = np.random.default_rng([int(seed), 0x5A17]).multinomial(n, probs)
    pts, parts = [], []
    for prim, count in zip(proxy.primitives, counts):
        rng = np.random.default_rng([int(seed), int(prim.part_id)])
        pts.append(prim.sample_surface(int(count), rng))
        parts.append(np.full(int(count), prim.part_id, dtype=np.int64))
    return PointSamples(np.concatenate(pts, axis=0), np.concatenate(parts, axis=0))


def samples_by_density(
    proxy: ProxyShape,
    part_ids,
    resolution: int,
    samples_per_cell: float,
    seed: int,
) -> PointSamples:
    """Per-part surface samples with counts tied to grid cell footprint.

    The count for a part depends only on its own area and the grid, never on
    which other parts are requested, so masks built from a part subset can
    only occupy cells the full-proxy sampling occupies too.
    """
    sub = proxy.parts(part_ids)
    cell_area = (float(proxy.bounds.extent[0]) / resolution) ** 2
    pts, parts = [], []
    for prim in sub.primitives:
        count = max(64, int(math.ceil(samples_per_cell * prim.surface_area() / cell_area)))
        rng = np.random.default_rng([int(seed), int(prim.part_id)])
        pts.append(prim.sample_surface(count, rng))
        parts.append(np.full(count, prim.part_id, dtype=np.int64))
    return PointSamples(np.concatenate(pts, axis=0), np.concatenate(parts, axis=0))


@dataclass(frozen=True)
class OccupancyGrid:
    """Binary voxel grid over an axis-aligned box."""

    resolution: int
    bounds: Box
    cells: np.ndarray  # (v, v, v) uint8

    def __post_init__(self):
        object.__setattr__(self, "cells", np.asarray(self.cells, dtype=np.uint8))
        if self.resolution < 2:
            raise InvalidInputError("resolution must be >= 2")
        if self.cells.shape != (self.resolution,) * 3:
            raise InvalidInputError("cells shape must be (v, v, v)")

    def cell_centers(self) -> np.ndarray:
        """(v^3, 3) world positions of cell centers, index-major order."""
        v = self.resolution
        idx = np.stack(
            np.meshgrid(np.arange(v), np.arange(v), np.arange(v), indexing="ij"),
            axis=-1,
        ).reshape(-1, 3)
        step = self.bounds.extent / v
        return self.bounds.min + (idx + 0.5) * step


def point_cell_indices(points: np.ndarray, resolution: int, bounds: Box) -> np.ndarray:
    """Cell index per point: floor((p - min) / extent * v), clamped."""
    rel = (np.asarray(points) - bounds.min) / bounds.extent
    idx = np.floor(rel * resolution).astype(np.int64)
    return np.clip(idx, 0, resolution - 1)


def voxelize(
    samples: PointSamples | np.ndarray,
    resolution: int,
    bounds: Box | None = None,
    allow_empty: bool = False,
) -> OccupancyGrid:
    """Mark every cell containing at least one sample point."""
    if resolution < 2:
        raise InvalidInputError("resolution must be >= 2")
    bounds = bounds or Box.unit()
    points = samples.points if isinstance(samples, PointSamples) else np.asarray(samples)
    if points.size == 0:
        if not allow_empty:
            raise InvalidInputError(
                "empty sample set (pass allow_empty=True for an all-zero grid)"
            )
        return OccupancyGrid(resolution, bounds, np.zeros((resolution,) * 3, np.uint8))
    inside = bounds.contains(points)
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside)[0])
        raise OutOfBoundsError(f"sample {bad} at {points[bad]} lies outside bounds")
    idx = point_cell_indices(points, resolution, bounds)
    cells = np.zeros((resolution,) * 3, dtype=np.uint8)
    cells[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    return OccupancyGrid(resolution, bounds, cells)


@dataclass(frozen=True)
class VolumeMask:
    """Soft 3D mask over the voxel grid, values in [0, 1]."""

    resolution: int
    values: np.ndarray  # (v, v, v) float32

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float32))
        if self.values.shape != (self.resolution,) * 3:
            raise InvalidInputError("mask shape must be (v, v, v)")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise InvalidInputError("mask values must lie in [0, 1]")

    def support(self) -> np.ndarray:
        return self.values > 0


def dilate_mask(values: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a Chebyshev cube of the given radius."""
    if radius < 0:
        raise InvalidInputError("dilation radius must be >= 0")
    if radius == 0:
        return (np.asarray(values) > 0).astype(np.float32)
    size = 2 * radius + 1
    out = ndimage.binary_dilation(
        np.asarray(values) > 0, structure=np.ones((size,) * 3, dtype=bool)
    )
    return out.astype(np.float32)


def part_mask(
    proxy: ProxyShape,
    part_ids,
    resolution: int,
    dilation_radius: int = DEFAULT_DILATION_RADIUS,
    seed: int = 0,
) -> VolumeMask:
    """Binary mask of cells covered by the selected parts, then dilated.

    Coverage comes from dense surface sampling (>= MASK_SAMPLES_PER_CELL
    samples per cell footprint) of just the selected primitives.
    """
    ids = set(part_ids)
    if not ids:
        raise InvalidPartError("part id selection is empty")
    samples = samples_by_density(proxy, ids, resolution, MASK_SAMPLES_PER_CELL, seed)
    grid = voxelize(samples, resolution, proxy.bounds)
    return VolumeMask(resolution, dilate_mask(grid.cells, dilation_radius))


@dataclass(frozen=True)
class Silhouette:
    """Binary coverage image; empty=True flags a proxy outside the frustum."""

    pixels: np.ndarray  # (H, W) uint8
    empty: bool


def render_silhouette(proxy: ProxyShape, pose, width: int, height: int) -> Silhouette:
    """Analytic ray-primitive coverage test per pixel (no tessellation)."""
    from .cameras import pixel_rays  # local import: avoid module cycle

    if not proxy.primitives:
        raise InvalidInputError("cannot render an empty proxy")
    origins, dirs = pixel_rays(pose, width, height)
    hit = np.zeros(origins.shape[0], dtype=bool)
    for prim in proxy.primitives:
        miss = ~hit
        if not miss.any():
            break
        hit[miss] |= _ray_hits_primitive(prim, origins[miss], dirs[miss])
    img = hit.reshape(height, width).astype(np.uint8)
    return Silhouette(img, empty=not bool(hit.any()))


def _ray_hits_primitive(prim: Primitive, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    rot = prim.rotation_matrix
    o = (origins - prim.center) @ rot
    d = dirs @ rot
    hx, hy, hz = prim.half_extents
    if prim.kind == "sphere":
        return _ray_hits_unit_sphere(o / prim.half_extents, d / prim.half_extents)
    if prim.kind == "cuboid":
        return _ray_hits_box(o, d, prim.half_extents)
    if prim.kind == "cylinder":
        return _ray_hits_cylinder(o, d, hx, hy)
    if prim.kind == "cone":
        return _ray_hits_cone(o, d, hx, hy)
    raise InvalidInputError(f"unknown primitive kind {prim.kind!r}")


def _ray_hits_unit_sphere(o, d):
    a = (d * d).sum(axis=1)
    b = 2.0 * (o * d).sum(axis=1)
    c = (o * o).sum(axis=1) - 1.0
    disc = b * b - 4 * a * c
    ok = disc >= 0
    t_hi = np.where(ok, (-b + np.sqrt(np.maximum(disc, 0.0))) / (2 * a), -1.0)
    return ok & (t_hi > 1e-9)


def _ray_hits_box(o, d, he):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-he - o) * inv
        t2 = (he - o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    # axis-parallel rays: require the origin inside the slab
    par = np.abs(d) < 1e-15
    inside = np.abs(o) <= he
    bad = (par & ~inside).any(axis=1)
    return (~bad) & (tmax >= np.maximum(tmin, 0.0)) & (tmax > 1e-9)


def _ray_hits_cylinder(o, d, r, hy):
    a = d[:, 0] ** 2 + d[:, 2] ** 2
    b = 2.0 * (o[:, 0] * d[:, 0] + o[:, 2] * d[:, 2])
    c = o[:, 0] ** 2 + o[:, 2] ** 2 - r * r
    hit = np.zeros(len(o), dtype=bool)
    disc = b * b - 4 * a * c
    quad = (disc >= 0) & (a > 1e-15)
    sq = np.sqrt(np.maximum(disc, 0.0))
    for sign in (-1.0, 1.0):
        t = np.where(quad, (-b + sign * sq) / (2 * np.where(quad, a, 1.0)), -1.0)
        y = o[:, 1] + t * d[:, 1]
        hit |= quad & (t > 1e-9) & (np.abs(y) <= hy)
    # caps
    for ycap in (-hy, hy):
        dy = d[:, 1]
        t = np.where(np.abs(dy) > 1e-15, (ycap - o[:, 1]) / np.where(np.abs(dy) > 1e-15, dy, 1.0), -1.0)
        x = o[:, 0] + t * d[:, 0]
        z = o[:, 2] + t * d[:, 2]
        hit |= (t > 1e-9) & (x * x + z * z <= r * r)
    return hit


def _ray_hits_cone(o, d, r, hy):
    # lateral surface: x^2 + z^2 = k^2 (hy - y)^2 with k = r / (2 hy)
    k = r / (2.0 * hy)
    oy = hy - o[:, 1]
    dy = -d[:, 1]
    a = d[:, 0] ** 2 + d[:, 2] ** 2 - k * k * dy * dy
    b = 2.0 * (o[:, 0] * d[:, 0] + o[:, 2] * d[:, 2] - k * k * oy * dy)
    c = o[:, 0] ** 2 + o[:, 2] ** 2 - k * k * oy * oy
    hit = np.zeros(len(o), dtype=bool)
    disc = b * b - 4 * a * c
    quad = (disc >= 0) & (np.abs(a) > 1e-15)
    sq = np.sqrt(np.maximum(disc, 0.0))
    for sign in (-1.0, 1.0):
        t = np.where(quad, (-b + sign * sq) / (2 * np.where(quad, a, 1.0)), -1.0)
        y = o[:, 1] + t * d[:, 1]
        hit |= quad & (t > 1e-9) & (y >= -hy - 1e-12) & (y <= hy + 1e-12)
    # base disk
    dyb = d[:, 1]
    t = np.where(np.abs(dyb) > 1e-15, (-hy - o[:, 1]) / np.where(np.abs(dyb) > 1e-15, dyb, 1.0), -1.0)
    x = o[:, 0] + t * d[:, 0]
    z = o[:, 2] + t * d[:, 2]
    hit |= (t > 1e-9) & (x * x + z * z <= r * r)
    return hit


# ---------------------------------------------------------------------------
# Interchange format


def proxy_to_dict(proxy: ProxyShape) -> dict:
    return {
        "version": PROXY_FORMAT_VERSION,
        "bounds": {"min": proxy.bounds.min.tolist(), "max": proxy.bounds.max.tolist()},
        "primitives": [
            {
                "kind": p.kind,
                "center": p.center.tolist(),
                "half_extents": p.half_extents.tolist(),
                "rotation": p.rotation.tolist(),
                "part_id": int(p.part_id),
                **({"label": p.label} if p.label else {}),
            }
            for p in proxy.primitives
        ],
    }


def proxy_from_dict(doc: dict, normalize_shape: bool = True) -> ProxyShape:
    """Parse and validate a proxy document; normalizes into [-0.9,0.9]^3."""
    if not isinstance(doc, dict):
        raise ProxyValidationError("$", "proxy document must be an object")
    version = doc.get("version", PROXY_FORMAT_VERSION)
    if version != PROXY_FORMAT_VERSION:
        raise ProxyValidationError("version", f"unsupported version {version}")
    raw = doc.get("primitives")
    if not isinstance(raw, list) or not raw:
        raise ProxyValidationError("primitives", "must be a non-empty list")
    prims = []
    for i, entry in enumerate(raw):
        path = f"primitives[{i}]"
        if not isinstance(entry, dict):
            raise ProxyValidationError(path, "must be an object")
        try:
            prim = Primitive(
                kind=entry.get("kind", ""),
                center=np.asarray(entry.get("center", []), dtype=np.float64),
                half_extents=np.asarray(entry.get("half_extents", []), dtype=np.float64),
                rotation=np.asarray(entry.get("rotation", [1, 0, 0, 0]), dtype=np.float64),
                part_id=entry.get("part_id", i),
                label=entry.get("label", ""),
            )
        except (TypeError, ValueError) as exc:
            raise ProxyValidationError(path, str(exc)) from exc
        prim.validate(path=path)
        prims.append(prim)
    bounds = Box.unit()
    if "bounds" in doc:
        b = doc["bounds"]
        bounds = Box(np.asarray(b["min"], dtype=np.float64), np.asarray(b["max"], dtype=np.float64))
    shape = ProxyShape(tuple(prims), bounds)
    if normalize_shape:
        shape = normalize(shape)
    shape.validate()
    return shape


def save_proxy(proxy: ProxyShape, path) -> None:
    Path(path).write_text(json.dumps(proxy_to_dict(proxy), indent=2))


def load_proxy(path, normalize_shape: bool = True) -> ProxyShape:
    return proxy_from_dict(json.loads(Path(path).read_text()), normalize_shape)
