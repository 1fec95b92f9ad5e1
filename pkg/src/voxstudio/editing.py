"""Part editing: masked volume fusion, mask projection, candidate
inpainting, and the two-pathway edit loop.

An edit selects proxy parts, dilates their voxel mask for seamless blends,
regenerates the 2D condition inside the projected mask, and re-runs the
sampling loop where every step's control volume keeps cached values outside
the mask and takes freshly predicted values inside it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .cameras import CameraPose, ViewSet, pixel_rays
from .config import ControlStrength
from .diffusion import CandidateImage
from .errors import CacheMissError, InvalidInputError, InvalidPartError, ShapeError
from .proxy import ProxyShape, VolumeMask, part_mask, render_silhouette
from .volumes import FeatureVolume


@dataclass
class EditRequest:
    """One part-regeneration request against a completed generation."""

    part_ids: set
    seed: int
    dilation_radius: int = 2
    edit_view: CameraPose | None = None
    new_candidate: CandidateImage | None = None
    prompt_tag: str = "generic"
    session_id: str = ""

    def __post_init__(self):
        self.part_ids = set(self.part_ids)
        if self.dilation_radius < 0:
            raise InvalidInputError("dilation radius must be >= 0")


def fuse_volumes(cached: FeatureVolume, fresh: FeatureVolume, mask: VolumeMask | torch.Tensor) -> FeatureVolume:
    """Blend two volumes: (1 - M) * cached + M * fresh, mask broadcast over
    channels. Binary masks keep unmasked voxels bit-identical to cached."""
    m = mask.values if isinstance(mask, VolumeMask) else mask
    m = torch.as_tensor(np.asarray(m), dtype=cached.values.dtype)
    if cached.values.shape != fresh.values.shape:
        raise ShapeError(
            f"cached {tuple(cached.values.shape)} vs fresh {tuple(fresh.values.shape)}"
        )
    if m.shape != cached.values.shape[1:]:
        raise ShapeError(f"mask {tuple(m.shape)} does not match volume grid")
    if float(m.min()) < 0.0 or float(m.max()) > 1.0:
        raise InvalidInputError("mask values must lie in [0, 1]")
    out = (1.0 - m)[None] * cached.values + m[None] * fresh.values
    return FeatureVolume(out, timestep_tag=fresh.timestep_tag)


def project_part_mask(mask3d: VolumeMask, pose: CameraPose, width: int, height: int) -> np.ndarray:
    """2D footprint of the masked voxels from a pose, dilated by one pixel.

    A pixel is set when its ray passes through any masked cell (max over
    depth samples with nearest-cell lookup)."""
    v = mask3d.resolution
    origins, dirs = pixel_rays(pose, width, height)
    inv = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t1 = (-1.0 - origins) / inv
    t2 = (1.0 - origins) / inv
    near = np.maximum(np.minimum(t1, t2).max(axis=1), 1e-4)
    far = np.maximum(t1, t2).min(axis=1)
    hit = np.zeros(len(origins), dtype=bool)
    valid = far > near
    n_samples = 2 * v
    steps = (np.arange(n_samples) + 0.5) / n_samples
    occ = mask3d.values > 0.5
    idx_valid = np.flatnonzero(valid)
    if idx_valid.size:
        z = near[idx_valid, None] + (far - near)[idx_valid, None] * steps[None, :]
        pts = origins[idx_valid, None, :] + z[..., None] * dirs[idx_valid, None, :]
        cell = np.clip(((pts + 1.0) * 0.5 * v).astype(int), 0, v - 1)
        vals = occ[cell[..., 0], cell[..., 1], cell[..., 2]]
        hit[idx_valid] = vals.any(axis=1)
    img = hit.reshape(height, width)
    if img.any():
        img = ndimage.binary_dilation(img, structure=np.ones((3, 3), dtype=bool))
    return img.astype(np.uint8)


@dataclass
class InpaintResult:
    image: CandidateImage
    no_op: bool = False


def inpaint_candidate(
    image: CandidateImage,
    mask2d: np.ndarray,
    prompt_tag: str,
    seed: int,
    model,
    silhouette: np.ndarray | None = None,
    steps: int = 20,
) -> InpaintResult:
    """Masked image-to-image: resample masked pixels, keep the rest.

    At every reverse step the unmasked region is replaced with the
    forward-noised original, so unmasked pixels of the result equal the
    input within 8-bit quantization. An empty mask is a warning no-op.
    """
    from .model import PROMPT_VOCAB, StudioModel

    mask = np.asarray(mask2d).astype(np.float32)
    if mask.sum() == 0:
        return InpaintResult(CandidateImage(image.pixels.copy(), anchor_azimuth=image.anchor_azimuth), no_op=True)
    generator_model = model.candidate_generator if isinstance(model, StudioModel) else model
    schedule = model.schedule
    original = torch.from_numpy(image.pixels) * 2.0 - 1.0
    size = original.shape[-1]
    if mask.shape != (size, size):
        raise ShapeError(f"mask {mask.shape} does not match image {size}x{size}")
    m = torch.from_numpy(mask)[None]
    cond = torch.from_numpy(
        (silhouette if silhouette is not None else mask).astype(np.float32)
    )[None, None]
    prompt = torch.tensor([PROMPT_VOCAB.get(prompt_tag, 0)])
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn((1, 3, size, size), generator=gen)
    with torch.no_grad():
        for t, t_prev in schedule.plan(steps):
            eps_hat = generator_model.unet(x, t, control=cond, prompt_ids=prompt)
            x = schedule.reverse_step(x, eps_hat, t, t_prev, generator=gen)
            if t_prev is None:
                known = original[None]
            else:
                eps_known = torch.randn(original.shape, generator=gen)[None]
                known = schedule.add_noise(original[None], t_prev, eps_known)
            x = m * x + (1.0 - m) * known
    out = ((x[0] + 1.0) * 0.5).clamp(0.0, 1.0).numpy()
    return InpaintResult(CandidateImage(out, anchor_azimuth=image.anchor_azimuth))


def mixed_denoise_conditions(
    conditions: list,
    views: ViewSet,
    encoder,
    temperature: float = 15.0,
) -> torch.Tensor:
    """Blend candidate embeddings per view by angular proximity.

    conditions: list of (CandidateImage, anchor azimuth degrees). Each view
    gets softmax(-angular_distance / temperature) weights over the anchors
    (anchors share the ring elevation)."""
    if not conditions:
        raise InvalidInputError("need at least one condition")
    embs = torch.stack(
        [torch.from_numpy(np.asarray(c.embed(encoder), dtype=np.float32)) for c, _ in conditions]
    )  # (A, D)
    if len(conditions) == 1:
        return embs[0][None].expand(len(views), -1).clone()
    anchor_az = torch.tensor([float(az) for _, az in conditions])
    view_az = torch.tensor([p.azimuth for p in views])
    # shortest angular distance on the azimuth circle, in degrees
    diff = (view_az[:, None] - anchor_az[None, :] + 180.0) % 360.0 - 180.0
    dist = diff.abs()
    tau = max(float(temperature), 1e-9)
    weights = torch.softmax(-dist / tau, dim=1)  # (N_v, A)
    return weights @ embs


def condition_weights(conditions, views, temperature: float = 15.0) -> torch.Tensor:
    """Just the per-view anchor weights (exposed for tests and UI)."""
    if not conditions:
        raise InvalidInputError("need at least one condition")
    anchor_az = torch.tensor([float(az) for _, az in conditions])
    view_az = torch.tensor([p.azimuth for p in views])
    diff = (view_az[:, None] - anchor_az[None, :] + 180.0) % 360.0 - 180.0
    tau = max(float(temperature), 1e-9)
    return torch.softmax(-diff.abs() / tau, dim=1)


@dataclass
class EditResult:
    images: np.ndarray
    volume_trace: list
    step_plan: list
    mask: VolumeMask
    edited_candidate: CandidateImage | None
    mask2d: np.ndarray | None = None


def edit_part(
    model,
    proxy: ProxyShape,
    request: EditRequest,
    cache,
    candidate: CandidateImage,
    strength: ControlStrength,
    poses: ViewSet,
    steps: int | None = None,
    on_step=None,
) -> EditResult:
    """Regenerate the selected parts while freezing everything else.

    Builds the dilated 3D mask, refreshes the 2D condition (inpainting at
    the edit view when one is given), and re-runs the sampling loop fusing
    each step's fresh volume with the cached one. Voxels outside the mask
    stay bit-identical to the cache at every timestep.
    """
    if not request.part_ids:
        raise InvalidPartError("part id selection is empty")
    proxy.parts(request.part_ids)  # raises InvalidPartError on unknown ids
    if cache is None or len(cache) == 0:
        raise CacheMissError([], "edit requested before any generation completed")

    res = model.config.volume_resolution
    mask = part_mask(proxy, request.part_ids, res, request.dilation_radius, seed=request.seed)
    mask_t = torch.from_numpy(mask.values)

    conditions = [(candidate, candidate.anchor_azimuth)]
    edited = None
    mask2d = None
    if request.edit_view is not None:
        size = model.config.image_size
        mask2d = project_part_mask(mask, request.edit_view, size, size)
        sil = render_silhouette(proxy, request.edit_view, size, size).pixels
        if request.new_candidate is not None:
            edited = request.new_candidate
        else:
            base = _reanchor(candidate, size)
            edited = inpaint_candidate(
                base, mask2d, request.prompt_tag, request.seed, model, silhouette=sil
            ).image
        edited.anchor_azimuth = request.edit_view.azimuth
        conditions.append((edited, request.edit_view.azimuth))
    elif request.new_candidate is not None:
        edited = request.new_candidate
        conditions = [(edited, candidate.anchor_azimuth)]

    def fuse_hook(t, fresh):
        return fuse_volumes(cache.load(t), fresh, mask_t)

    result = model.sample(
        proxy,
        candidate=None,
        strength=strength,
        poses=poses,
        seed=request.seed,
        steps=steps or len(cache),
        on_step=on_step,
        volume_hook=fuse_hook,
        conditions=conditions,
    )
    return EditResult(
        images=result.images,
        volume_trace=result.volume_trace,
        step_plan=result.step_plan,
        mask=mask,
        edited_candidate=edited,
        mask2d=mask2d,
    )


def _reanchor(candidate: CandidateImage, size: int) -> CandidateImage:
    """Resize a candidate to the working resolution if needed."""
    if candidate.pixels.shape[-1] == size:
        return candidate
    import torch.nn.functional as F

    t = torch.from_numpy(candidate.pixels)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0]
    return CandidateImage(out.clamp(0, 1).numpy(), anchor_azimuth=candidate.anchor_azimuth)
