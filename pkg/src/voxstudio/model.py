"""The full generation model: adapter + denoiser + encoders, with
checkpoint (de)serialization and the synchronized sampling loop."""

from __future__ import annotations

import tempfile
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .cameras import ViewSet
from .config import ControlStrength, PipelineConfig
from .containers import load_checkpoint, save_checkpoint
from .diffusion import (
    CandidateEncoder,
    CandidateGenerator,
    CandidateImage,
    DenoiseSchedule,
    PreviewDecoder,
    UNet2D,
    view_embedding_features,
)
from .errors import ConfigurationError, ModelNotReadyError, ShapeError, TrainingFault
from .proxy import OccupancyGrid, ProxyShape, sample_surface, voxelize
from .volumes import ControlAdapter, FeatureVolume

PROMPT_VOCAB = {
    "generic": 0,
    "figure": 1,
    "table": 2,
    "mushroom": 3,
    "vehicle": 4,
    "mug": 5,
}


@dataclass
class SampleResult:
    """Decoded views plus the per-step control volume trace."""

    images: np.ndarray  # (N_v, 3, H, W) float32 in [0, 1]
    volume_trace: list  # FeatureVolume per step, timestep-tagged
    step_plan: list  # (t, t_prev) pairs actually used
    latents: np.ndarray = None  # final predicted clean latents


class StudioModel(torch.nn.Module):
    """Bundle of every trainable part of the generation pipeline."""

    def __init__(self, config: PipelineConfig, schedule: DenoiseSchedule | None = None):
        super().__init__()
        self.config = config
        self.schedule = schedule or DenoiseSchedule.linear(config.total_timesteps)
        self.adapter = ControlAdapter(
            resolution=config.volume_resolution,
            channels=config.volume_channels,
            widths=config.adapter_widths,
            latent_channels=3,
            ray_samples=config.ray_samples,
            freeze_fusion=config.freeze_fusion,
        )
        self.denoiser = UNet2D(
            in_channels=3,
            widths=config.unet_widths,
            control_channels=config.volume_channels,
            token_dim=config.embed_dim,
        )
        self.encoder = CandidateEncoder(config.embed_dim)
        self.decoder = PreviewDecoder()
        self.candidate_generator = CandidateGenerator(
            widths=tuple(max(8, w // 2) for w in config.unet_widths),
            n_prompts=len(PROMPT_VOCAB),
            image_size=config.image_size,
        )
        self.trained = False

    # -- proxy plumbing ----------------------------------------------------

    def voxelize_proxy(self, proxy: ProxyShape, strength: ControlStrength, seed: int) -> OccupancyGrid:
        samples = sample_surface(proxy, strength.n_samples, seed)
        return voxelize(samples, self.config.volume_resolution, proxy.bounds)

    # -- conditioning ------------------------------------------------------

    def embed_candidate(self, candidate: CandidateImage) -> torch.Tensor:
        pixels = torch.from_numpy(candidate.pixels)[None]
        if pixels.shape[-1] != self.config.image_size:
            pixels = F.interpolate(pixels, size=(self.config.image_size,) * 2, mode="bilinear", align_corners=False)
        return self.encoder(pixels)[0]

    def predict_noise(
        self,
        latents: torch.Tensor,
        t: int,
        candidate_embedding,
        poses: ViewSet,
        anchor_azimuth: float = 0.0,
        control_volume: FeatureVolume | None = None,
        control_maps: torch.Tensor | None = None,
        uncontrolled: bool = False,
    ) -> torch.Tensor:
        """Per-view noise prediction; deterministic in its inputs.

        candidate_embedding: (D,) shared or (N_v, D) per view. Exactly one
        of control_volume / control_maps must be given; running the bare
        backbone requires uncontrolled=True explicitly.
        """
        n_views = latents.shape[0]
        if len(poses) != n_views:
            raise ShapeError(f"{n_views} latents for {len(poses)} poses")
        if control_volume is not None and control_maps is not None:
            raise ConfigurationError("pass either a control volume or control maps, not both")
        if control_volume is None and control_maps is None and not uncontrolled:
            raise ConfigurationError(
                "control is enabled but no control volume or maps were supplied"
            )
        if control_volume is not None:
            h, w = latents.shape[-2:]
            maps = [self.adapter.project_control(control_volume, pose, w, h)[0] for pose in poses]
            control_maps = torch.stack(maps)
        if isinstance(candidate_embedding, torch.Tensor):
            emb = candidate_embedding.float()
        else:
            emb = torch.as_tensor(np.asarray(candidate_embedding), dtype=torch.float32)
        if emb.ndim == 1:
            emb = emb[None].expand(n_views, -1)
        tokens = emb[:, None, :]
        view_feats = view_embedding_features(
            [p.azimuth for p in poses], [p.elevation for p in poses], anchor_azimuth
        )
        return self.denoiser(latents, t, view_feats=view_feats, tokens=tokens, control=control_maps)

    # -- sampling ----------------------------------------------------------

    def sample(
        self,
        proxy: ProxyShape | None,
        candidate: CandidateImage | None,
        strength: ControlStrength,
        poses: ViewSet,
        seed: int,
        steps: int | None = None,
        on_step=None,
        require_trained: bool = True,
        volume_hook=None,
        conditions: list | None = None,
        mixing_temperature: float = 15.0,
    ) -> SampleResult:
        """Full reverse trajectory producing the view ring images.

        The per-step control volume is stored (after the cache precision
        round trip) and the stored values condition the denoiser, so cached
        previews replay the exact computation. on_step(k, total, images)
        streams decoded intermediate predictions. volume_hook(t, volume)
        may replace each step's control volume (part editing fuses cached
        volumes there). conditions, a list of (CandidateImage, anchor
        azimuth) pairs, switches to blended per-view embeddings.
        """
        if require_trained and not self.trained:
            raise ModelNotReadyError(
                "no trained weights loaded; run training or pass a checkpoint"
            )
        steps = steps or self.config.sample_steps
        cfg = self.config
        total = self.schedule.total_steps
        gen = torch.Generator().manual_seed(int(seed))
        size = cfg.image_size
        x = torch.randn((len(poses), 3, size, size), generator=gen)

        proxy_volume = None
        if proxy is not None and strength.lam > 0.0:
            grid = self.voxelize_proxy(proxy, strength, seed)
            with torch.no_grad():
                proxy_volume = self.adapter.build_proxy_volume(grid)

        if conditions:
            from .editing import mixed_denoise_conditions

            emb = mixed_denoise_conditions(conditions, poses, self.encoder, mixing_temperature)
            anchor = conditions[0][1]
        else:
            emb = torch.from_numpy(np.asarray(candidate.embed(self.encoder), dtype=np.float32))
            anchor = candidate.anchor_azimuth
        plan = self.schedule.plan(steps)
        trace = []
        with torch.no_grad():
            for k, (t, t_prev) in enumerate(plan):
                view_volume = self.adapter.build_multiview_volume(x, poses, t, total)
                control = self.adapter.forward_control(proxy_volume, view_volume, strength, t, total)
                if volume_hook is not None:
                    control = volume_hook(t, control)
                if cfg.cache_half_precision:
                    control = control.half_precision_round_trip().tagged(t)
                trace.append(control)
                eps_hat = self.predict_noise(
                    x, t, emb, poses, anchor, control_volume=control
                )
                x = self.schedule.reverse_step(x, eps_hat, t, t_prev, generator=gen)
                if on_step is not None:
                    x0 = x if t_prev is None else self.schedule.predicted_x0(x, eps_hat, t_prev)
                    on_step(k, len(plan), self.decoder(x0).numpy())
            images = self.decoder(x).numpy()
        return SampleResult(images=images, volume_trace=trace, step_plan=plan, latents=x.numpy())

    # -- persistence ---------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        params = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        meta = {"trained": self.trained}
        meta.update(extra or {})
        save_checkpoint(path, params, self.schedule.to_dict(), self.config.to_dict(), extra=meta)

    @staticmethod
    def load(path) -> "StudioModel":
        params, schedule, config, extra = load_checkpoint(path)
        model = StudioModel(PipelineConfig.from_dict(config), DenoiseSchedule.from_dict(schedule))
        state = {k: torch.from_numpy(v.copy()) for k, v in params.items()}
        model.load_state_dict(state)
        model.trained = bool(extra.get("trained", True))
        model.eval()
        return model


def training_step(model: StudioModel, batch: dict, generator: torch.Generator, dump_dir=None) -> torch.Tensor:
    """One noise-prediction objective evaluation for a single object.

    batch: views (N_v,3,H,W) in [-1,1]; grid: OccupancyGrid; candidate:
    CandidateImage; poses: ViewSet; anchor_azimuth: float. Returns the mean
    squared error between sampled and predicted noise across all views.
    """
    views = torch.as_tensor(np.asarray(batch["views"]), dtype=torch.float32)
    poses = batch["poses"]
    total = model.schedule.total_steps
    t = int(torch.randint(total, (1,), generator=generator))
    eps = torch.randn(views.shape, generator=generator)
    x_t = model.schedule.add_noise(views, t, eps)

    proxy_volume = model.adapter.build_proxy_volume(batch["grid"])
    view_volume = model.adapter.build_multiview_volume(x_t, poses, t, total)
    strength = batch.get("strength", ControlStrength())
    control = model.adapter.forward_control(proxy_volume, view_volume, strength, t, total)

    candidate = batch["candidate"]
    emb = model.encoder(torch.from_numpy(candidate.pixels)[None])[0]
    eps_hat = model.predict_noise(
        x_t, t, emb, poses, candidate.anchor_azimuth, control_volume=control
    )
    loss = F.mse_loss(eps_hat, eps)
    if not torch.isfinite(loss):
        dump_path = None
        try:
            dump_path = tempfile.mktemp(prefix="voxstudio_batch_", suffix=".npz", dir=dump_dir)
            np.savez(dump_path, views=views.numpy(), t=t, grid=batch["grid"].cells)
        except OSError:
            pass
        raise TrainingFault(f"non-finite training loss at t={t}", dump_path=dump_path)
    return loss
