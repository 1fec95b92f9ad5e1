"""Deterministic oracle checks runnable on a fresh checkout (no training).

Each check recomputes an expected value through an independent route and
compares. Prints one PASS/FAIL line per check; exit code 0 iff all pass.
"""

from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np
import torch


def _check_voxelize_center():
    from .proxy import PointSamples, voxelize

    grid = voxelize(PointSamples(np.zeros((1, 3)), np.zeros(1, int)), 32)
    occ = np.argwhere(grid.cells)
    return occ.shape == (1, 3) and tuple(occ[0]) == (16, 16, 16)


def _check_view_ring():
    from .cameras import make_view_ring

    ring = make_view_ring(16, elevation=-30.0)
    return (
        len(ring) == 16
        and abs(ring[1].azimuth - 22.5) < 1e-12
        and all(p.elevation == -30.0 for p in ring)
    )


def _check_projection_round_trip():
    from .cameras import CameraPose, Intrinsics, project, unproject

    pose = CameraPose(37.0, -25.0, 2.5, Intrinsics.square(64))
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = rng.uniform(-0.8, 0.8, 3)
        pix, depth = project(p, pose)
        if np.abs(unproject(pix, depth, pose) - p).max() > 1e-9:
            return False
    return True


def _check_add_noise_closed_form():
    from .diffusion import DenoiseSchedule

    sched = DenoiseSchedule(betas=torch.tensor([0.75]))
    out = sched.add_noise(torch.zeros((2, 2)), 0, torch.ones((2, 2)))
    return abs(float(out[0, 0]) - math.sqrt(0.75)) < 1e-6


def _check_perfect_denoiser_reconstruction():
    from .diffusion import DenoiseSchedule

    sched = DenoiseSchedule.linear(100)
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn((8,), generator=gen)
    x = torch.randn((8,), generator=gen)
    for t, t_prev in sched.plan(10):
        ab = sched.alpha_bars[t]
        eps = (x - torch.sqrt(ab) * x0) / torch.sqrt(1 - ab)
        x = sched.reverse_step(x, eps, t, t_prev)
    return float((x - x0).abs().max()) < 1e-4


def _check_fuse_blend():
    from .editing import fuse_volumes
    from .volumes import FeatureVolume

    cached = FeatureVolume(torch.full((1, 4, 4, 4), 2.0))
    fresh = FeatureVolume(torch.full((1, 4, 4, 4), 4.0))
    out = fuse_volumes(cached, fresh, torch.full((4, 4, 4), 0.5))
    return torch.allclose(out.values, torch.full((1, 4, 4, 4), 3.0))


def _check_zero_conv_transparency():
    from .config import ControlStrength
    from .volumes import ControlAdapter, FeatureVolume

    torch.manual_seed(0)
    adapter = ControlAdapter(resolution=8, channels=8, widths=(8, 12, 16), ray_samples=4)
    gen = torch.Generator().manual_seed(1)
    f_v = FeatureVolume(torch.randn((8, 8, 8, 8), generator=gen))
    f_i = FeatureVolume(torch.randn((8, 8, 8, 8), generator=gen))
    with torch.no_grad():
        a = adapter.forward_control(f_v, f_i, ControlStrength(), 90, 100)
        b = adapter.forward_control(None, f_i, ControlStrength(), 90, 100)
    return float((a.values - b.values).abs().max()) == 0.0


def _check_trilinear_centers():
    from .volumes import grid_cell_centers, trilinear_sample

    gen = torch.Generator().manual_seed(2)
    values = torch.randn((2, 5, 5, 5), generator=gen)
    centers = torch.from_numpy(grid_cell_centers(5)).float()
    out = trilinear_sample(values, centers)
    return torch.allclose(out, values.reshape(2, -1).T, atol=1e-6)


def _check_cfvx_round_trip():
    from .containers import read_volume, write_volume

    rng = np.random.default_rng(3)
    vol = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "v.cfvx"
        write_volume(path, vol)
        return np.array_equal(read_volume(path), vol)


def _check_mesh_round_trip():
    from .recon import TexturedMesh, export_mesh, import_mesh

    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    faces = np.array([[0, 1, 2]], dtype=np.int64)
    colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    mesh = TexturedMesh(verts, faces, colors)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.glb"
        export_mesh(mesh, path)
        back = import_mesh(path)
        return (
            path.read_bytes()[:4] == b"glTF"
            and np.allclose(back.vertices, verts)
            and np.array_equal(back.faces, faces)
        )


def _check_dilation_counts():
    from .proxy import dilate_mask

    grid = np.zeros((8, 8, 8))
    grid[4, 4, 4] = 1
    corner = np.zeros((8, 8, 8))
    corner[0, 0, 0] = 1
    return dilate_mask(grid, 1).sum() == 27 and dilate_mask(corner, 1).sum() == 8


CHECKS = [
    ("voxelize center cell", _check_voxelize_center),
    ("view ring spacing", _check_view_ring),
    ("projection round trip", _check_projection_round_trip),
    ("forward-noise closed form", _check_add_noise_closed_form),
    ("perfect-denoiser reconstruction", _check_perfect_denoiser_reconstruction),
    ("masked volume blend", _check_fuse_blend),
    ("zero-convolution transparency", _check_zero_conv_transparency),
    ("trilinear sampling at centers", _check_trilinear_centers),
    ("voxel container round trip", _check_cfvx_round_trip),
    ("mesh export round trip", _check_mesh_round_trip),
    ("cube dilation counts", _check_dilation_counts),
]


def run() -> int:
    failures = 0
    for name, fn in CHECKS:
        try:
            ok = fn()
        except Exception as exc:  # a crashed check is a failure, not an abort
            ok = False
            print(f"FAIL {name}: {type(exc).__name__}: {exc}")
            failures += 1
            continue
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        failures += 0 if ok else 1
    print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return 0 if failures == 0 else 1
