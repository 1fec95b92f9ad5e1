"""Progressive volume cache and arbitrary-view previews.

The cache memorizes the control volume of every denoising step of the
latest generation or edit pass. Previews replay a (possibly shortened)
per-view reverse trajectory against those cached volumes, skipping the
adapter and multiview fusion entirely, and never mutate the cache.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np
import torch

from .cameras import CameraPose, Intrinsics, ViewSet
from .containers import read_volume, write_volume
from .errors import CacheMissError, InvalidInputError
from .volumes import FeatureVolume


class VolumeCache:
    """Timestep -> control volume map for a single generation pass."""

    def __init__(self, generation_id: str, step_plan=None, half_precision: bool = True):
        self.generation_id = generation_id
        self.step_plan = list(step_plan or [])
        self.half_precision = half_precision
        self.entries: dict[int, FeatureVolume] = {}

    def __len__(self):
        return len(self.entries)

    def store(self, t: int, volume: FeatureVolume) -> None:
        """Upsert the entry for t; the latest volume wins."""
        if not torch.isfinite(volume.values).all():
            raise InvalidInputError("refusing to cache a non-finite volume")
        if volume.timestep_tag is not None and volume.timestep_tag != t:
            raise InvalidInputError(
                f"volume tagged {volume.timestep_tag} stored under timestep {t}"
            )
        self.entries[int(t)] = volume.tagged(int(t))

    def load(self, t: int) -> FeatureVolume:
        if int(t) not in self.entries:
            raise CacheMissError([int(t)])
        return self.entries[int(t)]

    def timesteps(self) -> list:
        return sorted(self.entries, reverse=True)

    def nearest(self, t: int) -> int:
        if not self.entries:
            raise CacheMissError([t], "cache is empty")
        return min(self.entries, key=lambda k: abs(k - t))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for t in self.timesteps():
            h.update(str(t).encode())
            h.update(self.entries[t].values.numpy().tobytes())
        return h.hexdigest()

    @staticmethod
    def from_trace(generation_id: str, trace, step_plan, half_precision: bool = True) -> "VolumeCache":
        cache = VolumeCache(generation_id, step_plan, half_precision)
        for volume in trace:
            if volume.timestep_tag is None:
                raise InvalidInputError("trace volumes must be timestep-tagged")
            cache.store(volume.timestep_tag, volume)
        return cache

    # -- persistence (one CFVX file per timestep plus a manifest) ----------

    def persist(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for t, volume in self.entries.items():
            write_volume(
                directory / f"volume_t{t:04d}.cfvx",
                volume.values.numpy(),
                half_precision=self.half_precision,
            )
        manifest = {
            "generation_id": self.generation_id,
            "step_plan": [[t, p] for t, p in self.step_plan],
            "timesteps": self.timesteps(),
            "half_precision": self.half_precision,
        }
        (directory / "cache_manifest.json").write_text(json.dumps(manifest, indent=2))

    @staticmethod
    def load_dir(directory) -> "VolumeCache":
        directory = Path(directory)
        manifest = json.loads((directory / "cache_manifest.json").read_text())
        cache = VolumeCache(
            manifest["generation_id"],
            [(t, p) for t, p in manifest["step_plan"]],
            manifest.get("half_precision", True),
        )
        for t in manifest["timesteps"]:
            values = read_volume(directory / f"volume_t{t:04d}.cfvx")
            cache.store(t, FeatureVolume(torch.from_numpy(values), timestep_tag=t))
        return cache


def preview_plan(cache: VolumeCache, preview_steps: int | None):
    """Strided subset of the cached trajectory ending in a clean step."""
    full = cache.step_plan or [(t, None) for t in cache.timesteps()]
    ts = [t for t, _ in full]
    if preview_steps is None or preview_steps >= len(ts):
        picked = ts
    else:
        if preview_steps < 1:
            raise InvalidInputError("preview needs at least one step")
        idx = np.unique(np.round(np.linspace(0, len(ts) - 1, preview_steps)).astype(int))
        picked = [ts[i] for i in idx]
    missing = [t for t in picked if t not in cache.entries]
    if missing:
        raise CacheMissError(missing)
    return [(t, picked[i + 1] if i + 1 < len(picked) else None) for i, t in enumerate(picked)]


def preview(
    cache: VolumeCache,
    pose: CameraPose,
    model,
    candidate,
    seed: int,
    preview_steps: int | None = None,
    ring: ViewSet | None = None,
) -> np.ndarray:
    """Render one view from cached control volumes only.

    No adapter or multiview fusion runs. At a generation ring pose with the
    full step count and the generation seed, this reproduces the stored
    view exactly (same noise slice, same cached volumes, same denoiser
    calls). Returns a (3, H, W) float image in [0, 1].
    """
    plan = preview_plan(cache, preview_steps)
    size = model.config.image_size
    gen = torch.Generator().manual_seed(int(seed))
    ring_index = _matching_ring_index(pose, ring) if ring is not None else None
    if ring_index is not None:
        noise = torch.randn((len(ring), 3, size, size), generator=gen)
        x = noise[ring_index : ring_index + 1].clone()
    else:
        mix = hash((int(seed), round(pose.azimuth * 1e6), round(pose.elevation * 1e6))) & 0x7FFFFFFF
        x = torch.randn((1, 3, size, size), generator=torch.Generator().manual_seed(mix))
    emb = torch.from_numpy(np.asarray(candidate.embed(model.encoder), dtype=np.float32))
    poses = ViewSet((pose,))
    with torch.no_grad():
        for t, t_prev in plan:
            volume = cache.load(t)
            eps_hat = model.predict_noise(
                x, t, emb, poses, candidate.anchor_azimuth, control_volume=volume
            )
            x = model.schedule.reverse_step(x, eps_hat, t, t_prev, generator=gen)
        img = model.decoder(x)[0].numpy()
    return img


def _matching_ring_index(pose: CameraPose, ring: ViewSet):
    for i, p in enumerate(ring):
        if (
            math.isclose(p.azimuth % 360.0, pose.azimuth % 360.0, abs_tol=1e-9)
            and math.isclose(p.elevation, pose.elevation, abs_tol=1e-9)
            and math.isclose(p.radius, pose.radius, rel_tol=1e-9)
        ):
            return i
    return None


def transfer_viewpoint(
    ui_pose: dict,
    intrinsics: Intrinsics,
    look_at=(0.0, 0.0, 0.0),
) -> CameraPose:
    """Map UI orbit coordinates {azimuth, elevation, distance} to a camera
    pose in the generation convention."""
    distance = float(ui_pose["distance"])
    if distance <= 0:
        raise InvalidInputError("orbit distance must be positive")
    return CameraPose(
        azimuth=float(ui_pose["azimuth"]) % 360.0,
        elevation=float(ui_pose["elevation"]),
        radius=distance,
        intrinsics=intrinsics,
        look_at=np.asarray(look_at, dtype=np.float64),
    )


def viewpoint_to_orbit(pose: CameraPose) -> dict:
    """Inverse of transfer_viewpoint."""
    return {
        "azimuth": pose.azimuth % 360.0,
        "elevation": pose.elevation,
        "distance": pose.radius,
    }
