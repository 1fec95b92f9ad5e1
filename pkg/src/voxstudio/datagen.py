"""Procedural synthetic dataset: primitive-assembled objects with paired
coarse proxies, multiview renders, masks, depth, and surface samples.

Objects come from five templates (stacked-spheres figure, table, mushroom,
vehicle block, mug). The detail mesh tessellates the proxy primitives, then
adds per-vertex bump displacement and small appendages, so the proxy always
under-specifies the final surface. Rendering is a built-in z-buffer
rasterizer with flat shading and one directional light.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import ViewSet, project_points, save_views
from .errors import InvalidInputError
from .proxy import (
    Primitive,
    ProxyShape,
    normalize,
    quat_to_matrix,
    sample_surface,
    save_proxy,
)

CATEGORIES = ("figure", "table", "mushroom", "vehicle", "mug")

PALETTE = np.array(
    [
        [0.85, 0.35, 0.30],
        [0.30, 0.55, 0.85],
        [0.40, 0.75, 0.40],
        [0.90, 0.75, 0.25],
        [0.70, 0.45, 0.80],
        [0.45, 0.70, 0.75],
    ]
)

IDENT_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)
    colors: np.ndarray  # (V, 3)

    def merged_with(self, other: "TriMesh") -> "TriMesh":
        off = len(self.vertices)
        return TriMesh(
            np.concatenate([self.vertices, other.vertices]),
            np.concatenate([self.faces, other.faces + off]),
            np.concatenate([self.colors, other.colors]),
        )


@dataclass
class SyntheticObject:
    detail_mesh: TriMesh
    proxy: ProxyShape
    category_tag: str
    seed: int


# ---------------------------------------------------------------------------
# Primitive tessellation


def tessellate(prim: Primitive, color, segments: int = 20) -> TriMesh:
    hx, hy, hz = prim.half_extents
    if prim.kind == "cuboid":
        verts, faces = _box_mesh(hx, hy, hz)
    elif prim.kind == "sphere":
        verts, faces = _uv_sphere(segments, segments // 2)
        verts = verts * prim.half_extents
    elif prim.kind == "cylinder":
        verts, faces = _lathe(
            [(hx, -hy), (hx, hy)], segments, close_bottom=True, close_top=True
        )
    elif prim.kind == "cone":
        verts, faces = _lathe(
            [(hx, -hy), (1e-4, hy)], segments, close_bottom=True, close_top=True
        )
    else:
        raise InvalidInputError(f"unknown primitive kind {prim.kind!r}")
    rot = quat_to_matrix(prim.rotation)
    verts = verts @ rot.T + prim.center
    colors = np.broadcast_to(np.asarray(color, dtype=np.float64), verts.shape).copy()
    return TriMesh(verts, faces.astype(np.int64), colors)


def _box_mesh(hx, hy, hz):
    corners = np.array(
        [
            [-hx, -hy, -hz], [hx, -hy, -hz], [hx, hy, -hz], [-hx, hy, -hz],
            [-hx, -hy, hz], [hx, -hy, hz], [hx, hy, hz], [-hx, hy, hz],
        ]
    )
    quads = [
        (0, 1, 2, 3), (5, 4, 7, 6), (4, 0, 3, 7), (1, 5, 6, 2), (3, 2, 6, 7), (4, 5, 1, 0),
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return corners, np.array(faces)


def _uv_sphere(n_az: int, n_el: int):
    verts = []
    for i in range(n_el + 1):
        theta = math.pi * i / n_el
        for j in range(n_az):
            phi = 2 * math.pi * j / n_az
            verts.append(
                (math.sin(theta) * math.cos(phi), math.cos(theta), math.sin(theta) * math.sin(phi))
            )
    faces = []
    for i in range(n_el):
        for j in range(n_az):
            a = i * n_az + j
            b = i * n_az + (j + 1) % n_az
            c = (i + 1) * n_az + j
            d = (i + 1) * n_az + (j + 1) % n_az
            faces.append((a, b, d))
            faces.append((a, d, c))
    return np.array(verts, dtype=np.float64), np.array(faces)


def _lathe(profile, n_az: int, close_bottom=False, close_top=False):
    """Revolve an (r, y) profile around the Y axis."""
    rows = []
    for r, y in profile:
        ring = []
        for j in range(n_az):
            phi = 2 * math.pi * j / n_az
            ring.append((r * math.cos(phi), y, r * math.sin(phi)))
        rows.append(ring)
    verts = [v for ring in rows for v in ring]
    faces = []
    for i in range(len(rows) - 1):
        for j in range(n_az):
            a = i * n_az + j
            b = i * n_az + (j + 1) % n_az
            c = (i + 1) * n_az + j
            d = (i + 1) * n_az + (j + 1) % n_az
            faces.append((a, b, d))
            faces.append((a, d, c))
    if close_bottom:
        center = len(verts)
        verts.append((0.0, profile[0][1], 0.0))
        for j in range(n_az):
            faces.append((center, (j + 1) % n_az, j))
    if close_top:
        center = len(verts)
        base = (len(rows) - 1) * n_az
        verts.append((0.0, profile[-1][1], 0.0))
        for j in range(n_az):
            faces.append((center, base + j, base + (j + 1) % n_az))
    return np.array(verts, dtype=np.float64), np.array(faces)


# ---------------------------------------------------------------------------
# Object templates


def make_object(seed: int) -> SyntheticObject:
    """Deterministic synthetic object for a seed: template + perturbations."""
    rng = np.random.default_rng([int(seed), 0xD47A])
    category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
    builder = {
        "figure": _make_figure,
        "table": _make_table,
        "mushroom": _make_mushroom,
        "vehicle": _make_vehicle,
        "mug": _make_mug,
    }[category]
    prims, appendages = builder(rng)
    proxy = normalize(ProxyShape(tuple(prims)))
    scale_ref = ProxyShape(tuple(prims))
    lo, hi = scale_ref.union_aabb()
    norm_scale = 1.8 / max(float(np.max(hi - lo)), 1e-12)
    mid = 0.5 * (lo + hi)

    colors = PALETTE[rng.permutation(len(PALETTE))]
    mesh = None
    for i, prim in enumerate(proxy.primitives):
        part = tessellate(prim, colors[i % len(colors)])
        mesh = part if mesh is None else mesh.merged_with(part)
    # appendages are detail-only: present in the mesh, absent from the proxy
    for prim, color in appendages:
        moved = Primitive(
            prim.kind,
            (prim.center - mid) * norm_scale,
            prim.half_extents * norm_scale,
            prim.rotation,
            part_id=999,
        )
        mesh = mesh.merged_with(tessellate(moved, color))

    mesh = _apply_bumps(mesh, rng, amplitude=float(rng.uniform(0.02, 0.05)))
    mesh.vertices[:] = np.clip(mesh.vertices, -1.1, 1.1)
    return SyntheticObject(detail_mesh=mesh, proxy=proxy, category_tag=category, seed=seed)


def _apply_bumps(mesh: TriMesh, rng, amplitude: float) -> TriMesh:
    """Smooth pseudo-noise displacement along radial directions."""
    v = mesh.vertices
    freq = rng.uniform(2.0, 4.0, size=3)
    phase = rng.uniform(0, 2 * math.pi, size=3)
    bump = (
        np.sin(freq[0] * v[:, 0] * math.pi + phase[0])
        * np.sin(freq[1] * v[:, 1] * math.pi + phase[1])
        * np.sin(freq[2] * v[:, 2] * math.pi + phase[2])
    )
    radial = v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-6)
    out = v + radial * (bump * amplitude)[:, None]
    shade = 1.0 + 0.15 * bump[:, None]
    return TriMesh(out, mesh.faces, np.clip(mesh.colors * shade, 0.0, 1.0))


def _make_figure(rng):
    base_r = rng.uniform(0.32, 0.42)
    mid_r = base_r * rng.uniform(0.68, 0.8)
    head_r = mid_r * rng.uniform(0.6, 0.75)
    y0 = -0.5
    prims = [
        Primitive("sphere", [0, y0 + base_r, 0], [base_r] * 3, IDENT_QUAT, 0),
        Primitive("sphere", [0, y0 + 2 * base_r + mid_r * 0.8, 0], [mid_r] * 3, IDENT_QUAT, 1),
        Primitive("sphere", [0, y0 + 2 * base_r + 1.6 * mid_r + head_r * 0.8, 0], [head_r] * 3, IDENT_QUAT, 2),
    ]
    head_y = prims[2].center[1]
    ears = [
        (Primitive("sphere", [s * head_r * 0.9, head_y + head_r * 0.8, 0], [head_r * 0.3] * 3, IDENT_QUAT, 99),
         PALETTE[0])
        for s in (-1, 1)
    ]
    return prims, ears


def _make_table(rng):
    top_w = rng.uniform(0.5, 0.7)
    top_t = rng.uniform(0.05, 0.09)
    leg_h = rng.uniform(0.3, 0.45)
    leg_r = rng.uniform(0.045, 0.07)
    top_y = leg_h * 2 + top_t
    prims = [Primitive("cuboid", [0, top_y, 0], [top_w, top_t, top_w * rng.uniform(0.6, 1.0)], IDENT_QUAT, 0)]
    off = top_w * 0.75
    offz = float(prims[0].half_extents[2]) * 0.75
    for i, (sx, sz) in enumerate([(-1, -1), (-1, 1), (1, -1), (1, 1)]):
        prims.append(
            Primitive("cylinder", [sx * off, leg_h, sz * offz], [leg_r, leg_h, leg_r], IDENT_QUAT, i + 1)
        )
    return prims, []


def _make_mushroom(rng):
    stem_h = rng.uniform(0.28, 0.42)
    stem_r = rng.uniform(0.1, 0.16)
    cap_r = rng.uniform(0.3, 0.45)
    prims = [
        Primitive("cylinder", [0, stem_h, 0], [stem_r, stem_h, stem_r], IDENT_QUAT, 0),
        Primitive("sphere", [0, 2 * stem_h + cap_r * 0.3, 0], [cap_r, cap_r * rng.uniform(0.5, 0.7), cap_r], IDENT_QUAT, 1),
    ]
    dots = [
        (Primitive("sphere", [cap_r * 0.5 * math.cos(a), 2 * stem_h + cap_r * 0.55, cap_r * 0.5 * math.sin(a)],
                   [cap_r * 0.12] * 3, IDENT_QUAT, 99), np.array([0.95, 0.95, 0.9]))
        for a in rng.uniform(0, 2 * math.pi, size=3)
    ]
    return prims, dots


def _make_vehicle(rng):
    body_l = rng.uniform(0.5, 0.7)
    body_h = rng.uniform(0.14, 0.2)
    body_w = rng.uniform(0.25, 0.35)
    wheel_r = rng.uniform(0.09, 0.13)
    cab_l = body_l * rng.uniform(0.4, 0.55)
    rot_z = np.array([math.sqrt(0.5), 0.0, 0.0, math.sqrt(0.5)])  # wheel axis along x
    prims = [
        Primitive("cuboid", [0, 2 * wheel_r + body_h, 0], [body_l, body_h, body_w], IDENT_QUAT, 0),
        Primitive("cuboid", [-body_l * 0.25, 2 * wheel_r + 2 * body_h + body_h * 0.9, 0],
                  [cab_l, body_h * 0.9, body_w * 0.9], IDENT_QUAT, 1),
    ]
    for i, (sx, sz) in enumerate([(-1, -1), (-1, 1), (1, -1), (1, 1)]):
        prims.append(
            Primitive(
                "cylinder",
                [sx * body_l * 0.6, wheel_r, sz * (body_w + wheel_r * 0.4)],
                [wheel_r, wheel_r * 0.35, wheel_r],
                rot_z,
                i + 2,
            )
        )
    return prims, []


def _make_mug(rng):
    body_r = rng.uniform(0.25, 0.35)
    body_h = rng.uniform(0.3, 0.42)
    handle_r = rng.uniform(0.05, 0.075)
    prims = [
        Primitive("cylinder", [0, body_h, 0], [body_r, body_h, body_r], IDENT_QUAT, 0),
        Primitive(
            "cuboid",
            [body_r + handle_r * 1.6, body_h, 0],
            [handle_r * 1.6, body_h * 0.55, handle_r],
            IDENT_QUAT,
            1,
        ),
    ]
    return prims, []


# ---------------------------------------------------------------------------
# Rasterizer


def render_views(obj: SyntheticObject, views: ViewSet, size: int):
    """Flat-shaded z-buffer renders -> (images, masks, depths).

    images: (N_v, H, W, 3) uint8 on white; masks: (N_v, H, W) uint8 exact
    coverage; depths: (N_v, H, W) float32 (inf outside the object).
    """
    images, masks, depths = [], [], []
    light = np.array([0.35, 0.8, 0.5])
    light /= np.linalg.norm(light)
    mesh = obj.detail_mesh
    tri_idx = mesh.faces
    for pose in views:
        img, mask, depth = _rasterize(mesh, tri_idx, pose, size, light)
        images.append(img)
        masks.append(mask)
        depths.append(depth)
    return np.stack(images), np.stack(masks), np.stack(depths)


def _rasterize(mesh, faces, pose, size, light):
    pix, depth, valid = project_points(mesh.vertices, pose)
    scale = size / pose.intrinsics.width
    pix = pix * scale
    color_acc = np.ones((size, size, 3), dtype=np.float64)
    zbuf = np.full((size, size), np.inf, dtype=np.float64)
    mask = np.zeros((size, size), dtype=np.uint8)

    tri_pix = pix[faces]  # (F, 3, 2)
    tri_z = depth[faces]
    tri_ok = valid[faces].all(axis=1)
    v_world = mesh.vertices[faces]
    normals = np.cross(v_world[:, 1] - v_world[:, 0], v_world[:, 2] - v_world[:, 0])
    norms = np.linalg.norm(normals, axis=1)
    facing = norms > 1e-12
    normals = normals / np.maximum(norms, 1e-12)[:, None]
    shade = np.abs(normals @ light) * 0.65 + 0.35
    tri_color = mesh.colors[faces].mean(axis=1) * shade[:, None]

    for f in np.flatnonzero(tri_ok & facing):
        p = tri_pix[f]
        zs = tri_z[f]
        x0 = max(int(np.floor(p[:, 0].min())), 0)
        x1 = min(int(np.ceil(p[:, 0].max())), size - 1)
        y0 = max(int(np.floor(p[:, 1].min())), 0)
        y1 = min(int(np.ceil(p[:, 1].max())), size - 1)
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1) + 0.5
        ys = np.arange(y0, y1 + 1) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        d = (p[1, 1] - p[2, 1]) * (p[0, 0] - p[2, 0]) + (p[2, 0] - p[1, 0]) * (p[0, 1] - p[2, 1])
        if abs(d) < 1e-12:
            continue
        w0 = ((p[1, 1] - p[2, 1]) * (gx - p[2, 0]) + (p[2, 0] - p[1, 0]) * (gy - p[2, 1])) / d
        w1 = ((p[2, 1] - p[0, 1]) * (gx - p[2, 0]) + (p[0, 0] - p[2, 0]) * (gy - p[2, 1])) / d
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        # perspective-correct depth via 1/z interpolation
        inv_z = w0 / zs[0] + w1 / zs[1] + w2 / zs[2]
        z = 1.0 / np.maximum(inv_z, 1e-12)
        sub_z = zbuf[y0 : y1 + 1, x0 : x1 + 1]
        closer = inside & (z < sub_z)
        if not closer.any():
            continue
        sub_z[closer] = z[closer]
        color_acc[y0 : y1 + 1, x0 : x1 + 1][closer] = tri_color[f]
        mask[y0 : y1 + 1, x0 : x1 + 1][closer] = 1

    img = np.round(np.clip(color_acc, 0.0, 1.0) * 255.0).astype(np.uint8)
    return img, mask, zbuf.astype(np.float32)


# ---------------------------------------------------------------------------
# Dataset builder


def surface_distance(obj: SyntheticObject, n: int = 512) -> float:
    """Mean distance from detail-mesh vertices to the proxy surface samples."""
    from scipy.spatial import cKDTree

    samples = sample_surface(obj.proxy, max(n, 256), seed=obj.seed)
    tree = cKDTree(samples.points)
    d, _ = tree.query(obj.detail_mesh.vertices)
    return float(d.mean())


def build_dataset(
    n_objects: int,
    views: ViewSet,
    out_dir,
    size: int = 64,
    n_surface_samples: int = 256,
    force: bool = False,
    start_seed: int = 0,
) -> dict:
    """Write the on-disk dataset layout and return the manifest."""
    if n_objects < 1:
        raise InvalidInputError("need at least one object")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise InvalidInputError(f"{out} is not empty (pass force=True to overwrite)")
    out.mkdir(parents=True, exist_ok=True)

    entries = []
    for i in range(n_objects):
        seed = start_seed + i
        obj = make_object(seed)
        obj_dir = out / f"obj_{i:05d}"
        obj_dir.mkdir(exist_ok=True)
        save_proxy(obj.proxy, obj_dir / "proxy.json")
        save_views(views, obj_dir / "poses.json")
        samples = sample_surface(obj.proxy, n_surface_samples, seed=seed)
        packed = np.concatenate(
            [samples.points.astype("<f4"), samples.source_part.astype("<f4")[:, None]], axis=1
        )
        (obj_dir / "samples.bin").write_bytes(packed.tobytes())
        images, masks, _ = render_views(obj, views, size)
        for v in range(len(views)):
            Image.fromarray(images[v]).save(obj_dir / f"view_{v:02d}.png")
            Image.fromarray(masks[v] * 255).save(obj_dir / f"mask_{v:02d}.png")
        checks = {
            p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(obj_dir.iterdir())
        }
        entries.append(
            {
                "dir": obj_dir.name,
                "seed": seed,
                "category": obj.category_tag,
                "n_parts": len(obj.proxy.primitives),
                "checksums": checks,
            }
        )
    manifest = {
        "version": 1,
        "n_objects": n_objects,
        "image_size": size,
        "n_views": len(views),
        "n_surface_samples": n_surface_samples,
        "objects": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def verify_manifest(root) -> bool:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    for entry in manifest["objects"]:
        for name, digest in entry["checksums"].items():
            actual = hashlib.sha256((root / entry["dir"] / name).read_bytes()).hexdigest()
            if actual != digest:
                return False
    return True


def load_object_views(root, index: int):
    """Read one object back: (proxy_path, images [-1,1], masks, views)."""
    from .cameras import load_views
    from .proxy import load_proxy

    obj_dir = Path(root) / f"obj_{index:05d}"
    views = load_views(obj_dir / "poses.json")
    proxy = load_proxy(obj_dir / "proxy.json")
    images, masks = [], []
    for v in range(len(views)):
        img = np.asarray(Image.open(obj_dir / f"view_{v:02d}.png"), dtype=np.float32) / 255.0
        images.append(img.transpose(2, 0, 1) * 2.0 - 1.0)
        m = np.asarray(Image.open(obj_dir / f"mask_{v:02d}.png"), dtype=np.float32) / 255.0
        masks.append(m)
    return proxy, np.stack(images), np.stack(masks), views
