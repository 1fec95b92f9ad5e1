"""Feature volumes and the dual 3D-UNet control adapter.

The adapter lifts a voxelized proxy to a feature volume, fuses in-flight
multiview latents into a second volume, runs a proxy UNet whose level
outputs are injected into the fusion UNet through zero-initialized
convolutions (scaled by the control weight), and projects the resulting
control volume into per-view 2D feature maps with attention over ray depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cameras import CameraPose, ViewSet, gather_view_features, pixel_rays
from .config import ControlStrength
from .errors import DegenerateInputError, ShapeError
from .proxy import OccupancyGrid


@dataclass
class FeatureVolume:
    """Dense voxel feature grid, channel-first (C, v, v, v)."""

    values: torch.Tensor
    timestep_tag: int | None = None

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ShapeError(f"feature volume must be (C, v, v, v), got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ShapeError("feature volume contains non-finite values")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def resolution(self) -> int:
        return self.values.shape[1]

    def tagged(self, t: int) -> "FeatureVolume":
        return FeatureVolume(self.values, timestep_tag=t)

    def half_precision_round_trip(self) -> "FeatureVolume":
        return FeatureVolume(self.values.half().float(), self.timestep_tag)


def grid_cell_centers(resolution: int) -> np.ndarray:
    """(v^3, 3) cell centers of the canonical [-1, 1]^3 volume."""
    idx = np.stack(
        np.meshgrid(*([np.arange(resolution)] * 3), indexing="ij"), axis=-1
    ).reshape(-1, 3)
    return (idx + 0.5) / resolution * 2.0 - 1.0


def sinusoidal_embedding(value: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Classic transformer-style frequency embedding; value shape (B,)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = value.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ZeroConv3d(nn.Conv3d):
    """1x1x1 convolution with weights and bias starting at exactly zero."""

    def __init__(self, channels: int):
        super().__init__(channels, channels, kernel_size=1)
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)


def _norm(ch: int) -> nn.GroupNorm:
    groups = 4
    while ch % groups:
        groups -= 1
    return nn.GroupNorm(groups, ch)


class ResBlock3d(nn.Module):
    def __init__(self, channels: int, emb_dim: int | None = None):
        super().__init__()
        self.norm1 = _norm(channels)
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * channels) if emb_dim else None

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb_proj is not None and emb is not None:
            scale, shift = self.emb_proj(emb)[0].chunk(2)
            h = h * (1 + scale[None, :, None, None, None]) + shift[None, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class VolumeUNet(nn.Module):
    """3-level 3D UNet with additive skips and six tap points.

    Taps (three encoder, three decoder activations) are returned so a proxy
    copy of this network can donate level outputs, and accepted so the
    fusion copy can receive them.
    """

    def __init__(self, in_channels: int, widths: tuple, out_channels: int):
        super().__init__()
        c0, c1, c2 = widths
        self.stem = nn.Conv3d(in_channels, c0, 3, padding=1)
        self.enc0 = ResBlock3d(c0)
        self.down0 = nn.Conv3d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = ResBlock3d(c1)
        self.down1 = nn.Conv3d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = ResBlock3d(c2)
        self.mid = ResBlock3d(c2)
        self.dec2 = ResBlock3d(c2)
        self.up1 = nn.Conv3d(c2, c1, 3, padding=1)
        self.dec1 = ResBlock3d(c1)
        self.up0 = nn.Conv3d(c1, c0, 3, padding=1)
        self.dec0 = ResBlock3d(c0)
        self.out = nn.Conv3d(c0, out_channels, 3, padding=1)

    @property
    def tap_channels(self) -> tuple:
        c0 = self.stem.out_channels
        c1 = self.down0.out_channels
        c2 = self.down1.out_channels
        return (c0, c1, c2, c2, c1, c0)

    def forward(self, x, injections=None, lam: float = 1.0):
        """injections: six tensors matching this net's tap activations."""

        def maybe_add(h, i):
            if injections is not None:
                h = h + lam * injections[i]
            return h

        taps = []
        h0 = self.enc0(self.stem(x))
        h0 = maybe_add(h0, 0)
        taps.append(h0)
        h1 = self.enc1(self.down0(h0))
        h1 = maybe_add(h1, 1)
        taps.append(h1)
        h2 = self.enc2(self.down1(h1))
        h2 = maybe_add(h2, 2)
        taps.append(h2)
        m = self.dec2(self.mid(h2))
        m = maybe_add(m, 3)
        taps.append(m)
        u1 = self.up1(F.interpolate(m, scale_factor=2, mode="nearest")) + h1
        u1 = self.dec1(u1)
        u1 = maybe_add(u1, 4)
        taps.append(u1)
        u0 = self.up0(F.interpolate(u1, scale_factor=2, mode="nearest")) + h0
        u0 = self.dec0(u0)
        u0 = maybe_add(u0, 5)
        taps.append(u0)
        return self.out(u0), taps


class LiftConv(nn.Module):
    """Two 3D convolutions raising binary occupancy to feature channels."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(1, channels, 3, padding=1)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, occ):
        return self.conv2(F.silu(self.conv1(occ)))


class MultiviewFuser(nn.Module):
    """Learned 3D CNN over view-mean features, conditioned on the timestep."""

    def __init__(self, latent_channels: int, channels: int, time_dim: int = 32):
        super().__init__()
        self.time_dim = time_dim
        self.proj = nn.Conv3d(latent_channels, channels, 3, padding=1)
        self.block = ResBlock3d(channels, emb_dim=time_dim)

    def forward(self, fused, t_frac: torch.Tensor):
        emb = sinusoidal_embedding(t_frac, self.time_dim)
        return self.block(self.proj(fused), emb)


class DepthAttentionProjector(nn.Module):
    """Aggregate volume features along each pixel ray.

    K depth-stratified samples are read with trilinear interpolation; a
    learned per-sample score is softmaxed over depth and used as convex
    combination weights for the sample features.
    """

    def __init__(self, channels: int, n_samples: int = 32):
        super().__init__()
        self.n_samples = n_samples
        self.score = nn.Linear(channels, 1)

    def forward(self, volume: FeatureVolume, pose: CameraPose, width: int, height: int):
        origins, dirs = pixel_rays(pose, width, height)
        origins = torch.from_numpy(origins).float()
        dirs = torch.from_numpy(dirs).float()
        inv = 1.0 / torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
        t1 = (-1.0 - origins) * inv
        t2 = (1.0 - origins) * inv
        near = torch.minimum(t1, t2).amax(dim=-1).clamp_min(1e-4)
        far = torch.maximum(t1, t2).amin(dim=-1)
        valid = far > near
        near = torch.where(valid, near, torch.ones_like(near))
        far = torch.where(valid, far, near + 1e-4)
        steps = (torch.arange(self.n_samples, dtype=torch.float32) + 0.5) / self.n_samples
        z = near[:, None] + (far - near)[:, None] * steps[None, :]
        pts = origins[:, None, :] + z[..., None] * dirs[:, None, :]
        feats = trilinear_sample(volume.values, pts.reshape(-1, 3)).reshape(
            len(origins), self.n_samples, -1
        )
        scores = self.score(feats).squeeze(-1) / math.sqrt(feats.shape[-1])
        weights = torch.softmax(scores, dim=-1)
        out = (weights[..., None] * feats).sum(dim=1)
        out = out * valid[:, None].to(out.dtype)
        c = out.shape[-1]
        fmap = out.transpose(0, 1).reshape(c, height, width)
        vmap = valid.reshape(height, width)
        return fmap, vmap


def trilinear_sample(values: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Trilinear interpolation of a (C, v, v, v) grid over [-1, 1]^3.

    Grid nodes sit at cell centers; queries are clamped to the border.
    Returns (N, C). Runs on the fused grid_sample kernel: with
    align_corners=False its sample positions are exactly the cell centers
    (2i+1)/v - 1, matching the voxelization convention (the hand-rolled
    gather was ~15x slower on CPU; tests verify against an independent
    closed-form oracle).
    """
    # grid_sample wants (N, D_out, H_out, W_out, 3) with coords ordered
    # (w, h, d) = our (z, y, x)
    grid = points[:, [2, 1, 0]].reshape(1, -1, 1, 1, 3).to(values.dtype)
    out = F.grid_sample(
        values[None], grid, mode="bilinear", padding_mode="border", align_corners=False
    )
    return out.reshape(values.shape[0], -1).transpose(0, 1)


class ControlAdapter(nn.Module):
    """Proxy conditioning for the multiview denoiser.

    Holds the occupancy lift, the proxy and fusion volume UNets, the
    zero-initialized injection convolutions, the multiview fuser, and the
    depthwise-attention projector.
    """

    def __init__(
        self,
        resolution: int = 32,
        channels: int = 64,
        widths: tuple = (64, 128, 256),
        latent_channels: int = 3,
        ray_samples: int = 32,
        freeze_fusion: bool = False,
    ):
        super().__init__()
        self.resolution = resolution
        self.channels = channels
        self.lift = LiftConv(channels)
        self.fusion_unet = VolumeUNet(channels, widths, channels)
        self.proxy_unet = VolumeUNet(channels, widths, channels)
        self.injections = nn.ModuleList(ZeroConv3d(ch) for ch in self.fusion_unet.tap_channels)
        self.fuser = MultiviewFuser(latent_channels, channels)
        self.projector = DepthAttentionProjector(channels, ray_samples)
        self._cell_centers = grid_cell_centers(resolution)
        self.copy_proxy_from_fusion()
        if freeze_fusion:
            for p in self.fusion_unet.parameters():
                p.requires_grad_(False)

    def copy_proxy_from_fusion(self):
        """Trainable-copy initialization of the proxy pathway."""
        self.proxy_unet.load_state_dict(self.fusion_unet.state_dict())

    def build_proxy_volume(self, grid: OccupancyGrid) -> FeatureVolume:
        if grid.resolution != self.resolution:
            raise ShapeError(
                f"grid resolution {grid.resolution} != adapter resolution {self.resolution}"
            )
        occ = torch.from_numpy(grid.cells.astype(np.float32))[None, None]
        return FeatureVolume(self.lift(occ)[0])

    def fuse_view_features(self, latents: torch.Tensor, poses: ViewSet):
        """Mean of gathered per-view features over valid views.

        latents: (N_v, C, H, W). Returns ((C, v, v, v) tensor, valid count
        per vertex). This is the pre-CNN fusion."""
        if latents.ndim != 4:
            raise ShapeError("latents must be (N_v, C, H, W)")
        if latents.shape[0] != len(poses):
            raise ShapeError(f"{latents.shape[0]} latent maps for {len(poses)} poses")
        feats, valid = gather_view_features(self._cell_centers, latents, poses)
        count = valid.sum(dim=1)
        if count.max() == 0:
            raise DegenerateInputError("no grid vertex is visible from any view")
        mean = feats.sum(dim=1) / count.clamp_min(1.0)[:, None]
        v = self.resolution
        return mean.transpose(0, 1).reshape(-1, v, v, v), count

    def build_multiview_volume(
        self, latents: torch.Tensor, poses: ViewSet, t: int, total_steps: int
    ) -> FeatureVolume:
        fused, _ = self.fuse_view_features(latents, poses)
        t_frac = torch.tensor([t / max(total_steps, 1)], dtype=torch.float32)
        return FeatureVolume(self.fuser(fused[None], t_frac)[0], timestep_tag=t)

    def forward_control(
        self,
        proxy_volume: FeatureVolume | None,
        view_volume: FeatureVolume,
        strength: ControlStrength,
        t: int,
        total_steps: int,
    ) -> FeatureVolume:
        """Produce the control volume for one denoising step.

        Injection is skipped when no proxy is given, when the weight is 0,
        or when progress has passed the s_end fraction of the trajectory.
        """
        if proxy_volume is not None and proxy_volume.values.shape != view_volume.values.shape:
            raise ShapeError(
                f"proxy volume {tuple(proxy_volume.values.shape)} != "
                f"view volume {tuple(view_volume.values.shape)}"
            )
        progress = 1.0 - t / max(total_steps, 1)
        inject = (
            proxy_volume is not None
            and strength.lam > 0.0
            and progress < strength.s_end - 1e-12
        )
        x = view_volume.values[None]
        if not inject:
            out, _ = self.fusion_unet(x)
            return FeatureVolume(out[0], timestep_tag=t)
        _, taps = self.proxy_unet(proxy_volume.values[None])
        injected = [conv(tap) for conv, tap in zip(self.injections, taps)]
        out, _ = self.fusion_unet(x, injections=injected, lam=strength.lam)
        return FeatureVolume(out[0], timestep_tag=t)

    def project_control(self, volume: FeatureVolume, pose: CameraPose, width: int, height: int):
        """2D control feature map for one view; rays missing the volume get
        zeros and validity 0."""
        return self.projector(volume, pose, width, height)
