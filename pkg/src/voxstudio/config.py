"""Run configuration and the two presets.

"desk" is sized so all deterministic checks and a full train/generate/edit
cycle run on commodity hardware; "paper" preserves the published
hyperparameters (16 views at 256x256, lr 5e-5, batch 8, 600 reconstruction
iterations).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigurationError


@dataclass(frozen=True)
class ControlStrength:
    """Control knobs: injection weight, gating fraction, proxy sample count."""

    lam: float = 1.0
    s_end: float = 1.0
    n_samples: int = 256

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError("lambda must be in [0, 1]")
        if not 0.0 < self.s_end <= 1.0:
            raise ConfigurationError("s_end must be in (0, 1]")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    preset: str = "desk"
    # views / images
    n_views: int = 8
    image_size: int = 64
    ring_elevation: float = -30.0
    ring_radius: float = 2.5
    # volume / adapter
    volume_resolution: int = 32
    volume_channels: int = 64
    adapter_widths: tuple = (64, 128, 256)
    ray_samples: int = 32
    freeze_fusion: bool = False
    # denoiser
    unet_widths: tuple = (64, 128, 256)
    embed_dim: int = 256
    total_timesteps: int = 1000
    sample_steps: int = 50
    # training
    lr: float = 1e-4
    batch_size: int = 4
    train_steps: int = 20000
    # preview
    preview_steps: int = 10
    cache_half_precision: bool = True
    # reconstruction
    recon_iterations: int = 600

    def view_ring(self):
        from .cameras import Intrinsics, make_view_ring

        return make_view_ring(
            self.n_views,
            elevation=self.ring_elevation,
            radius=self.ring_radius,
            intrinsics=Intrinsics.square(self.image_size),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adapter_widths"] = list(self.adapter_widths)
        d["unet_widths"] = list(self.unet_widths)
        return d

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        known = {f.name for f in PipelineConfig.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("adapter_widths", "unet_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return PipelineConfig(**d)


DESK = PipelineConfig()

PAPER = PipelineConfig(
    preset="paper",
    n_views=16,
    image_size=256,
    lr=0.00005,
    batch_size=8,
    train_steps=100000,
    recon_iterations=600,
)

PRESETS = {"desk": DESK, "paper": PAPER}

# A deliberately tiny configuration for fast deterministic checks.
TINY = PipelineConfig(
    preset="desk",
    n_views=3,
    image_size=16,
    volume_resolution=8,
    volume_channels=8,
    adapter_widths=(8, 12, 16),
    ray_samples=8,
    unet_widths=(8, 12, 16),
    embed_dim=32,
    total_timesteps=100,
    sample_steps=6,
    preview_steps=3,
)


def resolve_config(preset: str = "desk", overrides: dict | None = None) -> PipelineConfig:
    """Apply key/value overrides to a named preset; unknown keys rejected."""
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r} (expected desk or paper)")
    cfg = PRESETS[preset]
    if overrides:
        known = {f.name for f in PipelineConfig.__dataclass_fields__.values()}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        fixed = dict(overrides)
        for key in ("adapter_widths", "unet_widths"):
            if key in fixed:
                fixed[key] = tuple(fixed[key])
        cfg = replace(cfg, **fixed)
    return cfg
