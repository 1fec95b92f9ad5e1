"""Camera poses, the generation view ring, and image/grid projections.

Right-handed Y-up world; the camera looks along -Z in its own frame. Image
coordinates are continuous with u in [0, W] and v in [0, H], v pointing
down, and pixel (i, j) centered at (i + 0.5, j + 0.5).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidInputError, ShapeError

DEFAULT_RADIUS = 2.5
DEFAULT_ELEVATION = -30.0


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    width: int
    height: int
    principal: tuple = None  # defaults to the image center

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise InvalidInputError("image must be at least 8x8")
        if self.focal <= 0:
            raise InvalidInputError("focal length must be positive")
        if self.principal is None:
            object.__setattr__(self, "principal", (self.width / 2.0, self.height / 2.0))

    @staticmethod
    def square(size: int, focal_scale: float = 0.8) -> "Intrinsics":
        """Default framing: a unit-scale object spans ~80% of the image."""
        return Intrinsics(focal=focal_scale * size, width=size, height=size)


@dataclass(frozen=True)
class CameraPose:
    """Orbit pose: azimuth/elevation in degrees around a look-at point."""

    azimuth: float
    elevation: float
    radius: float
    intrinsics: Intrinsics
    look_at: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidInputError("camera radius must be positive")
        object.__setattr__(self, "look_at", np.asarray(self.look_at, dtype=np.float64))

    @property
    def position(self) -> np.ndarray:
        az = math.radians(self.azimuth)
        el = math.radians(self.elevation)
        offset = np.array(
            [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
        )
        return self.look_at + self.radius * offset

    def rotation_world_to_cam(self) -> np.ndarray:
        """Rows are the camera's right/up/backward axes in world coords."""
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        world_up = np.array([0.0, 1.0, 0.0])
        if abs(np.dot(fwd, world_up)) > 1.0 - 1e-9:
            world_up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, world_up)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return np.stack([right, up, -fwd], axis=0)


@dataclass(frozen=True)
class ViewSet:
    poses: tuple

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.poses) < 1:
            raise InvalidInputError("a view set needs at least one pose")

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def __getitem__(self, i):
        return self.poses[i]


def make_view_ring(
    n_views: int,
    elevation: float = DEFAULT_ELEVATION,
    radius: float = DEFAULT_RADIUS,
    intrinsics: Intrinsics | None = None,
) -> ViewSet:
    """Evenly spaced azimuths at constant elevation, looking at the origin."""
    if n_views < 1:
        raise InvalidInputError("need at least one view")
    intrinsics = intrinsics or Intrinsics.square(64)
    poses = tuple(
        CameraPose(
            azimuth=k * 360.0 / n_views,
            elevation=elevation,
            radius=radius,
            intrinsics=intrinsics,
        )
        for k in range(n_views)
    )
    return ViewSet(poses)


def project(point, pose: CameraPose):
    """Pinhole projection of one world point -> ((u, v), depth).

    Depth is the distance along the optical axis; points at or behind the
    camera raise InvalidInputError.
    """
    pix, depth, valid = project_points(np.asarray(point, dtype=np.float64)[None, :], pose)
    if not valid[0]:
        raise InvalidInputError("point is behind the camera")
    return pix[0], float(depth[0])


def project_points(points: np.ndarray, pose: CameraPose):
    """Vectorized projection: (N,3) -> pixel (N,2), depth (N,), valid (N,)."""
    rot = pose.rotation_world_to_cam()
    cam = (np.asarray(points, dtype=np.float64) - pose.position) @ rot.T
    depth = -cam[:, 2]
    valid = depth > 1e-12
    safe = np.where(valid, depth, 1.0)
    cx, cy = pose.intrinsics.principal
    u = cx + pose.intrinsics.focal * cam[:, 0] / safe
    v = cy - pose.intrinsics.focal * cam[:, 1] / safe
    return np.stack([u, v], axis=1), depth, valid


def unproject(pixel, depth: float, pose: CameraPose) -> np.ndarray:
    """Inverse of project for a pixel at a given optical-axis depth."""
    if depth <= 0:
        raise InvalidInputError("depth must be positive")
    u, v = pixel
    cx, cy = pose.intrinsics.principal
    f = pose.intrinsics.focal
    cam = np.array([(u - cx) / f * depth, -(v - cy) / f * depth, -depth])
    rot = pose.rotation_world_to_cam()
    return rot.T @ cam + pose.position


def pixel_rays(pose: CameraPose, width: int, height: int):
    """Rays through all pixel centers: origins (H*W,3), unit dirs (H*W,3)."""
    ii, jj = np.meshgrid(np.arange(width), np.arange(height))
    u = ii.ravel() + 0.5
    v = jj.ravel() + 0.5
    cx, cy = pose.intrinsics.principal
    # principal point/focal scale with the requested raster size
    sx = width / pose.intrinsics.width
    sy = height / pose.intrinsics.height
    f = pose.intrinsics.focal
    cam = np.stack(
        [(u - cx * sx) / (f * sx), -(v - cy * sy) / (f * sy), -np.ones_like(u)], axis=1
    )
    rot = pose.rotation_world_to_cam()
    dirs = cam @ rot
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return origins, dirs


def bilinear_sample(feature_map: torch.Tensor, pix: torch.Tensor) -> torch.Tensor:
    """Bilinear interpolation over pixel centers.

    feature_map: (C, H, W); pix: (N, 2) continuous (u, v) image coordinates.
    Samples outside the image are clamped to the border (callers mask them
    with a validity flag instead).
    """
    c, h, w = feature_map.shape
    x = pix[:, 0] - 0.5
    y = pix[:, 1] - 0.5
    x = x.clamp(0.0, w - 1.0)
    y = y.clamp(0.0, h - 1.0)
    x0 = x.floor().long().clamp(0, w - 2) if w > 1 else x.floor().long() * 0
    y0 = y.floor().long().clamp(0, h - 2) if h > 1 else y.floor().long() * 0
    x1 = (x0 + 1).clamp(0, w - 1)
    y1 = (y0 + 1).clamp(0, h - 1)
    wx = (x - x0.to(x.dtype)).clamp(0.0, 1.0)
    wy = (y - y0.to(y.dtype)).clamp(0.0, 1.0)
    flat = feature_map.reshape(c, -1)
    def grab(yi, xi):
        return flat[:, yi * w + xi]  # (C, N)
    top = grab(y0, x0) * (1 - wx) + grab(y0, x1) * wx
    bot = grab(y1, x0) * (1 - wx) + grab(y1, x1) * wx
    return (top * (1 - wy) + bot * wy).transpose(0, 1)  # (N, C)


def gather_view_features(
    grid_vertices: np.ndarray,
    feature_maps: torch.Tensor,
    poses: ViewSet,
):
    """Project grid vertices into every view and gather bilinear features.

    grid_vertices: (M, 3) world positions; feature_maps: (N_v, C, H, W).
    Returns (features (M, N_v, C), validity (M, N_v)); vertices projecting
    outside [0,W)x[0,H) or behind a camera get zeros and validity 0.
    """
    if feature_maps.ndim != 4:
        raise ShapeError("feature_maps must be (N_v, C, H, W)")
    if feature_maps.shape[0] != len(poses):
        raise ShapeError(
            f"got {feature_maps.shape[0]} feature maps for {len(poses)} poses"
        )
    n_views, c, h, w = feature_maps.shape
    m = grid_vertices.shape[0]
    dtype = feature_maps.dtype
    feats = torch.zeros((m, n_views, c), dtype=dtype)
    valid = torch.zeros((m, n_views), dtype=dtype)
    for vi, pose in enumerate(poses):
        if pose.intrinsics.width != w or pose.intrinsics.height != h:
            scale = np.array([w / pose.intrinsics.width, h / pose.intrinsics.height])
        else:
            scale = np.array([1.0, 1.0])
        pix, _, in_front = project_points(grid_vertices, pose)
        pix = pix * scale
        inside = in_front & (pix[:, 0] >= 0) & (pix[:, 0] < w) & (pix[:, 1] >= 0) & (pix[:, 1] < h)
        idx = np.flatnonzero(inside)
        if idx.size == 0:
            continue
        pix_t = torch.from_numpy(pix[idx]).to(dtype)
        feats[idx, vi] = bilinear_sample(feature_maps[vi], pix_t)
        valid[idx, vi] = 1.0
    return feats, valid


# ---------------------------------------------------------------------------
# Pose file format (shared by CLI, service, and the dataset renderer)


def pose_to_dict(pose: CameraPose) -> dict:
    return {
        "azimuth": pose.azimuth,
        "elevation": pose.elevation,
        "radius": pose.radius,
        "intrinsics": {
            "focal": pose.intrinsics.focal,
            "width": pose.intrinsics.width,
            "height": pose.intrinsics.height,
            "principal": list(pose.intrinsics.principal),
        },
    }


def pose_from_dict(doc: dict) -> CameraPose:
    intr = doc["intrinsics"]
    return CameraPose(
        azimuth=float(doc["azimuth"]),
        elevation=float(doc["elevation"]),
        radius=float(doc["radius"]),
        intrinsics=Intrinsics(
            focal=float(intr["focal"]),
            width=int(intr["width"]),
            height=int(intr["height"]),
            principal=tuple(intr["principal"]) if "principal" in intr else None,
        ),
    )


def save_views(views: ViewSet, path) -> None:
    Path(path).write_text(json.dumps([pose_to_dict(p) for p in views], indent=2))


def load_views(path) -> ViewSet:
    return ViewSet(tuple(pose_from_dict(d) for d in json.loads(Path(path).read_text())))
