"""Neural SDF reconstruction from generated multiview images.

A small signed-distance MLP plus a view-dependent color MLP, rendered with
logistic-CDF opacity compositing and optimized with rendered-color, mask,
distillation (optional, conditioned on cached control volumes), eikonal,
sparsity, and smoothness terms. The zero level set is extracted with
marching cubes and exported as a vertex-colored mesh.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cameras import ViewSet, pixel_rays
from .errors import CacheMissError, DegenerateInputError, EmptyMeshError, InvalidInputError, TrainingFault


@dataclass
class ReconConfig:
    """Loss weights and optimization budget for field fitting."""

    w_rgb: float = 1.0
    w_sds: float = 0.0
    w_mask: float = 0.5
    w_eik: float = 0.4
    w_sparse: float = 0.01
    w_smooth: float = 0.005
    iterations: int = 600
    rays_per_batch: int = 512
    n_coarse: int = 40
    n_fine: int = 24
    lr: float = 5e-4
    sds_t_range: tuple = (0.02, 0.6)  # fraction of the schedule
    sds_interval: int = 10
    sds_image_size: int = 32
    mesh_resolution: int = 64
    hidden_dim: int = 64
    n_layers: int = 4
    pe_frequencies: int = 4
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        for name in ("w_rgb", "w_sds", "w_mask", "w_eik", "w_sparse", "w_smooth"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")
        if self.iterations < 1:
            raise InvalidInputError("iterations must be >= 1")


def positional_encoding(x: torch.Tensor, n_freq: int) -> torch.Tensor:
    if n_freq == 0:
        return x
    outs = [x]
    for k in range(n_freq):
        outs.append(torch.sin((2.0**k) * math.pi * x))
        outs.append(torch.cos((2.0**k) * math.pi * x))
    return torch.cat(outs, dim=-1)


class SdfNetwork(nn.Module):
    """MLP position -> (signed distance, feature), geometrically initialized
    so the zero level set starts as a centered sphere."""

    def __init__(self, hidden_dim=64, n_layers=4, pe_frequencies=4, feat_dim=16, init_radius=0.5):
        super().__init__()
        self.pe_frequencies = pe_frequencies
        in_dim = 3 * (1 + 2 * pe_frequencies)
        dims = [in_dim] + [hidden_dim] * n_layers + [1 + feat_dim]
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1))
        self._geometric_init(init_radius)
        self.act = nn.Softplus(beta=100)

    def _geometric_init(self, init_radius):
        n = len(self.layers)
        for i, lin in enumerate(self.layers):
            if i == n - 1:
                nn.init.normal_(lin.weight, 0.0, 1e-2)
                nn.init.zeros_(lin.bias)
                with torch.no_grad():
                    # sdf row approximates ||x|| - r at initialization
                    lin.weight[0].normal_(math.sqrt(math.pi / lin.in_features), 1e-4)
                    lin.bias[0] = -init_radius
            else:
                nn.init.normal_(lin.weight, 0.0, math.sqrt(2.0 / lin.out_features))
                nn.init.zeros_(lin.bias)
                if i == 0:
                    # encoded dims start silent so the sphere init survives
                    with torch.no_grad():
                        lin.weight[:, 3:] = 0.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = positional_encoding(x, self.pe_frequencies)
        for i, lin in enumerate(self.layers):
            h = lin(h)
            if i < len(self.layers) - 1:
                h = self.act(h)
        return h

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[..., 0]

    def sdf_and_feat(self, x: torch.Tensor):
        out = self.forward(x)
        return out[..., 0], out[..., 1:]


class ColorNetwork(nn.Module):
    """MLP (position, view dir, normal, geometry feature) -> RGB."""

    def __init__(self, feat_dim=16, hidden_dim=64):
        super().__init__()
        in_dim = 3 + 3 + 3 + feat_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, 3),
        )

    def forward(self, x, dirs, normals, feat):
        h = torch.cat([x, dirs, normals, feat], dim=-1)
        return torch.sigmoid(self.net(h))


class SDFField(nn.Module):
    """Signed-distance + color field with a learnable sharpness scalar."""

    def __init__(self, hidden_dim=64, n_layers=4, pe_frequencies=4, feat_dim=16, init_radius=0.5):
        super().__init__()
        self.sdf_net = SdfNetwork(hidden_dim, n_layers, pe_frequencies, feat_dim, init_radius)
        self.color_net = ColorNetwork(feat_dim, hidden_dim)
        # inv_std = exp(10 * variance); start moderately soft
        self.variance = nn.Parameter(torch.tensor(0.3))
        self.anneal = 1.0  # set by the fit loop

    def inv_std(self) -> torch.Tensor:
        return torch.exp(self.variance * 10.0).clamp(1e-6, 1e6) * self.anneal

    def sdf(self, x):
        return self.sdf_net.sdf(x)

    def gradient(self, x: torch.Tensor, create_graph: bool | None = None) -> torch.Tensor:
        """Analytic SDF gradient via autograd."""
        if create_graph is None:
            create_graph = self.training
        with torch.enable_grad():
            x = x.detach().requires_grad_(True)
            y = self.sdf_net.sdf(x)
            (grad,) = torch.autograd.grad(y.sum(), x, create_graph=create_graph)
        return grad if create_graph else grad.detach()


def intersect_box(origins: torch.Tensor, dirs: torch.Tensor, half: float = 1.0):
    """Entry/exit distances of rays against [-half, half]^3."""
    inv = 1.0 / torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    t1 = (-half - origins) * inv
    t2 = (half - origins) * inv
    near = torch.minimum(t1, t2).amax(dim=-1).clamp_min(1e-3)
    far = torch.maximum(t1, t2).amin(dim=-1)
    valid = far > near
    return near, far, valid


def sample_pdf(bins: torch.Tensor, weights: torch.Tensor, n: int, generator=None) -> torch.Tensor:
    """Inverse-CDF sampling of extra depths proportional to coarse weights."""
    weights = weights + 1e-5
    pdf = weights / weights.sum(dim=-1, keepdim=True)
    cdf = torch.cumsum(pdf, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], dim=-1)
    u = torch.linspace(0.5 / n, 1.0 - 0.5 / n, n, dtype=bins.dtype)
    u = u.expand(list(cdf.shape[:-1]) + [n]).contiguous()
    idx = torch.searchsorted(cdf, u, right=True)
    below = (idx - 1).clamp_min(0)
    above = idx.clamp_max(cdf.shape[-1] - 1)
    cdf_lo = torch.gather(cdf, -1, below)
    cdf_hi = torch.gather(cdf, -1, above)
    bins_pad = torch.cat([bins, bins[..., -1:]], dim=-1)
    bin_lo = torch.gather(bins_pad, -1, below)
    bin_hi = torch.gather(bins_pad, -1, above)
    denom = (cdf_hi - cdf_lo).clamp_min(1e-5)
    frac = (u - cdf_lo) / denom
    return bin_lo + frac * (bin_hi - bin_lo)


def render_rays(
    field: SDFField,
    rays: tuple,
    n_coarse: int = 40,
    n_fine: int = 24,
    perturb: bool = False,
    generator=None,
    with_eikonal: bool = False,
):
    """Volumetric render of (origins, dirs) -> dict(rgb, opacity, depth, ...).

    Directions must be unit length. SDF values are converted to section
    opacities with the logistic CDF at the field's current sharpness, then
    alpha-composited front to back.
    """
    origins, dirs = rays
    if torch.any(dirs.norm(dim=-1) < 1e-8):
        raise InvalidInputError("ray directions must be non-zero")
    n_rays = origins.shape[0]
    near, far, valid = intersect_box(origins, dirs)
    near = torch.where(valid, near, torch.ones_like(near))
    far = torch.where(valid, far, near + 1e-3)

    steps = torch.linspace(0.0, 1.0, n_coarse, dtype=origins.dtype)
    z = near[:, None] + (far - near)[:, None] * steps[None, :]
    if perturb:
        jitter = torch.rand(z.shape, generator=generator, dtype=z.dtype)
        mids = 0.5 * (z[:, 1:] + z[:, :-1])
        lo = torch.cat([z[:, :1], mids], dim=-1)
        hi = torch.cat([mids, z[:, -1:]], dim=-1)
        z = lo + (hi - lo) * jitter

    if n_fine > 0:
        with torch.no_grad():
            pts = origins[:, None, :] + z[..., None] * dirs[:, None, :]
            sdf = field.sdf(pts.reshape(-1, 3)).reshape(n_rays, -1)
            alpha = _section_alpha(sdf, field.inv_std())
            w = _composite_weights(alpha)
            z_mid = 0.5 * (z[:, 1:] + z[:, :-1])
            z_extra = sample_pdf(z_mid, w, n_fine, generator=generator)
        z = torch.sort(torch.cat([z, z_extra], dim=-1), dim=-1).values

    pts = origins[:, None, :] + z[..., None] * dirs[:, None, :]
    flat = pts.reshape(-1, 3)
    sdf, feat = field.sdf_net.sdf_and_feat(flat)
    sdf = sdf.reshape(n_rays, -1)
    alpha = _section_alpha(sdf, field.inv_std())
    weights = _composite_weights(alpha)  # (n_rays, S-1)

    # shade section midpoints; normals are detached here (the eikonal term
    # regularizes gradients on its own sample set, which is far cheaper than
    # double backprop through every shading point)
    z_mid = 0.5 * (z[:, 1:] + z[:, :-1])
    mid_pts = origins[:, None, :] + z_mid[..., None] * dirs[:, None, :]
    mid_flat = mid_pts.reshape(-1, 3)
    normals = field.gradient(mid_flat, create_graph=False)
    normals_unit = F.normalize(normals, dim=-1, eps=1e-8)
    n_sections = z.shape[1] - 1
    feat_mid = 0.5 * (
        feat.reshape(n_rays, -1, feat.shape[-1])[:, 1:] + feat.reshape(n_rays, -1, feat.shape[-1])[:, :-1]
    )
    dirs_rep = dirs[:, None, :].expand(-1, n_sections, -1).reshape(-1, 3)
    rgb_sections = field.color_net(
        mid_flat, dirs_rep, normals_unit, feat_mid.reshape(-1, feat_mid.shape[-1])
    ).reshape(n_rays, n_sections, 3)

    opacity = weights.sum(dim=-1)
    rgb = (weights[..., None] * rgb_sections).sum(dim=1)
    depth = (weights * z_mid).sum(dim=-1) / opacity.clamp_min(1e-6)

    out = {
        "rgb": rgb,
        "opacity": opacity * valid.to(rgb.dtype),
        "depth": depth,
        "weights": weights,
        "valid": valid,
    }
    if with_eikonal:
        out["gradients"] = normals
        out["points"] = mid_flat
    return out


def _section_alpha(sdf: torch.Tensor, inv_std: torch.Tensor) -> torch.Tensor:
    cdf = torch.sigmoid(sdf * inv_std)
    alpha = (cdf[:, :-1] - cdf[:, 1:] + 1e-6) / (cdf[:, :-1] + 1e-6)
    return alpha.clamp(0.0, 1.0)


def _composite_weights(alpha: torch.Tensor) -> torch.Tensor:
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[:, :1]), 1.0 - alpha + 1e-7], dim=-1), dim=-1
    )[:, :-1]
    return alpha * trans


def regularizers(field: SDFField, samples: torch.Tensor, tau: float = 100.0, delta: float = 1e-2, generator=None):
    """Eikonal, free-space sparsity, and normal-smoothness terms."""
    offset = torch.randn(samples.shape, generator=generator, dtype=samples.dtype) * delta
    both = torch.cat([samples, samples + offset], dim=0)
    grad_both = field.gradient(both)
    grad, grad2 = grad_both.split(len(samples), dim=0)
    eik = ((grad.norm(dim=-1) - 1.0) ** 2).mean()
    sdf = field.sdf(samples)
    sparse = torch.exp(-tau * sdf.abs()).mean()
    smooth = (grad - grad2).norm(dim=-1).mean()
    return {"eik": eik, "sparse": sparse, "smooth": smooth}


def volume_sds_grad(rendered: torch.Tensor, t: int, condition: dict, schedule, model, generator=None):
    """Distillation gradient for a rendered view.

    rendered: (3, H, W) in the model's image range [-1, 1]. Samples a noise,
    forms the noised image, and returns w(t) * (predicted_noise - noise)
    with no gradient flowing through the denoiser; the caller applies the
    result as a custom gradient on the rendered image. w(t) = 1 - alpha_bar.
    """
    control_volume = condition.get("control_volume")
    if control_volume is None:
        raise CacheMissError([t], f"no cached control volume supplied for timestep {t}")
    with torch.no_grad():
        x0 = rendered.detach()
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
        x_t = schedule.add_noise(x0, t, eps)
        pred = model.predict_noise(
            x_t[None],
            t,
            candidate_embedding=condition["candidate_embedding"],
            poses=ViewSet((condition["pose"],)),
            anchor_azimuth=condition.get("anchor_azimuth", 0.0),
            control_volume=control_volume,
        )[0]
        w = 1.0 - schedule.alpha_bars[t]
        return w * (pred - eps)


@dataclass
class FitReport:
    metrics: list = field(default_factory=list)
    wall_seconds: float = 0.0


def fit_field(
    images,
    masks,
    poses: ViewSet,
    cache=None,
    config: ReconConfig | None = None,
    model=None,
    candidate_embedding=None,
    metrics_path=None,
) -> tuple[SDFField, FitReport]:
    """Optimize an SDF+color field against posed images and masks.

    images: (N_v, 3, H, W) float in [0,1]; masks: (N_v, H, W) binary.
    cache supplies per-timestep control volumes when the distillation weight
    is positive; the denoiser/adapter weights are never updated here.
    """
    config = config or ReconConfig()
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    masks = torch.as_tensor(np.asarray(masks), dtype=torch.float32)
    if masks.sum() == 0:
        raise DegenerateInputError("all masks are empty")
    if config.w_sds > 0 and (cache is None or model is None):
        raise CacheMissError([], "distillation requires a populated cache and model")
    n_views, _, h, w = images.shape

    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    field_net = SDFField(
        hidden_dim=config.hidden_dim,
        n_layers=config.n_layers,
        pe_frequencies=config.pe_frequencies,
    )
    opt = torch.optim.Adam(field_net.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=config.iterations, eta_min=config.lr * 0.1
    )

    all_origins, all_dirs = [], []
    for pose in poses:
        o, d = pixel_rays(pose, w, h)
        all_origins.append(torch.from_numpy(o).float())
        all_dirs.append(torch.from_numpy(d).float())
    all_origins = torch.stack(all_origins)  # (N_v, H*W, 3)
    all_dirs = torch.stack(all_dirs)
    flat_rgb = images.permute(0, 2, 3, 1).reshape(n_views, -1, 3)
    flat_mask = masks.reshape(n_views, -1)

    fg_idx = [torch.nonzero(flat_mask[v] > 0.5).squeeze(-1) for v in range(n_views)]
    bg_idx = [torch.nonzero(flat_mask[v] <= 0.5).squeeze(-1) for v in range(n_views)]

    report = FitReport()
    t0 = time.time()
    anneal_steps = max(1, config.iterations // 3)
    sds_gen = torch.Generator().manual_seed(config.seed + 17)

    for it in range(config.iterations):
        # exponential sharpness ramp (x1 -> x10) over the first third
        field_net.anneal = 10.0 ** min(1.0, it / anneal_steps)

        v = int(torch.randint(n_views, (1,), generator=gen))
        n_fg = config.rays_per_batch // 2
        n_bg = config.rays_per_batch - n_fg
        pick_fg = fg_idx[v][torch.randint(len(fg_idx[v]), (n_fg,), generator=gen)] if len(fg_idx[v]) else torch.zeros(0, dtype=torch.long)
        pick_bg = bg_idx[v][torch.randint(len(bg_idx[v]), (n_bg,), generator=gen)] if len(bg_idx[v]) else torch.zeros(0, dtype=torch.long)
        pick = torch.cat([pick_fg, pick_bg])
        rays = (all_origins[v][pick], all_dirs[v][pick])
        target_rgb = flat_rgb[v][pick]
        target_mask = flat_mask[v][pick]

        out = render_rays(
            field_net, rays, config.n_coarse, config.n_fine, perturb=True, generator=gen, with_eikonal=True
        )
        fg = target_mask > 0.5
        if fg.any():
            loss_rgb = ((out["rgb"][fg] - target_rgb[fg]) ** 2).mean()
        else:
            loss_rgb = torch.zeros(())
        opacity = out["opacity"].clamp(1e-4, 1.0 - 1e-4)
        loss_mask = F.binary_cross_entropy(opacity, target_mask)

        # regularizer points: near-surface (weight-importance) + uniform box;
        # the sparsity term only sees the uniform set, so it suppresses
        # floaters without inflating gradients at the actual surface
        n_reg = 384
        flat_w = out["weights"].reshape(-1).detach() + 1e-6
        near_idx = torch.multinomial(flat_w, n_reg // 2, replacement=True, generator=gen)
        near_pts = out["points"][near_idx].detach()
        near_pts = near_pts + torch.randn(near_pts.shape, generator=gen) * 0.04
        uniform_pts = torch.rand((n_reg // 2, 3), generator=gen) * 2.0 - 1.0
        regs = regularizers(field_net, torch.cat([near_pts, uniform_pts]), generator=gen)
        loss_sparse = torch.exp(-100.0 * field_net.sdf(uniform_pts).abs()).mean()

        loss = (
            config.w_rgb * loss_rgb
            + config.w_mask * loss_mask
            + config.w_eik * regs["eik"]
            + config.w_sparse * loss_sparse
            + config.w_smooth * regs["smooth"]
        )

        if config.w_sds > 0 and it % config.sds_interval == 0:
            loss = loss + config.w_sds * _sds_term(
                field_net, poses, cache, model, candidate_embedding, config, sds_gen
            )

        if not torch.isfinite(loss):
            raise TrainingFault(f"non-finite reconstruction loss at iteration {it}")

        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()

        if (it + 1) % config.log_every == 0 or it == config.iterations - 1:
            grad_norm = field_net.gradient(near_pts, create_graph=False).norm(dim=-1)
            record = {
                "iteration": it + 1,
                "loss": float(loss.detach()),
                "rgb": float(loss_rgb.detach()) if torch.is_tensor(loss_rgb) else float(loss_rgb),
                "mask": float(loss_mask.detach()),
                "eik": float(regs["eik"].detach()),
                "sparse": float(loss_sparse.detach()),
                "smooth": float(regs["smooth"].detach()),
                "inv_std": float(field_net.inv_std().detach()),
                "grad_norm_mean": float(grad_norm.mean()),
            }
            report.metrics.append(record)
            if metrics_path is not None:
                with open(metrics_path, "a") as fh:
                    fh.write(json.dumps(record) + "\n")

    report.wall_seconds = time.time() - t0
    field_net.eval()
    return field_net, report


def _sds_term(field_net, poses, cache, model, candidate_embedding, config, gen):
    """Render a random training view at low resolution and push the
    distillation gradient through it."""
    schedule = model.schedule
    v = int(torch.randint(len(poses), (1,), generator=gen))
    pose = poses[v]
    size = config.sds_image_size
    o, d = pixel_rays(pose, size, size)
    rays = (torch.from_numpy(o).float(), torch.from_numpy(d).float())
    out = render_rays(field_net, rays, config.n_coarse, 0, perturb=False)
    img = out["rgb"].reshape(size, size, 3).permute(2, 0, 1)
    lo = int(config.sds_t_range[0] * schedule.total_steps)
    hi = int(config.sds_t_range[1] * schedule.total_steps)
    t = int(torch.randint(lo, max(hi, lo + 1), (1,), generator=gen))
    cached_t = cache.nearest(t)
    vol = cache.load(cached_t)
    img_up = F.interpolate(img[None], size=(model.config.image_size,) * 2, mode="bilinear", align_corners=False)[0]
    latent = img_up * 2.0 - 1.0  # rendered [0,1] -> model image range
    grad = volume_sds_grad(
        latent,
        t,
        {
            "candidate_embedding": candidate_embedding,
            "control_volume": vol,
            "pose": pose,
            "anchor_azimuth": 0.0,
        },
        schedule,
        model,
        generator=gen,
    )
    return (grad.detach() * latent).sum() / latent.numel()


def extract_mesh(field: SDFField, resolution: int = 64, bounds: float = 1.0):
    """Marching cubes on the SDF zero set; vertex colors from the color net."""
    from skimage import measure

    lin = torch.linspace(-bounds, bounds, resolution)
    grid = torch.stack(torch.meshgrid(lin, lin, lin, indexing="ij"), dim=-1).reshape(-1, 3)
    values = []
    with torch.no_grad():
        for chunk in grid.split(65536):
            values.append(field.sdf(chunk))
    sdf = torch.cat(values).reshape(resolution, resolution, resolution).numpy()
    if sdf.min() > 0 or sdf.max() < 0:
        raise EmptyMeshError("SDF zero level set is empty at this resolution")
    spacing = 2.0 * bounds / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(sdf, level=0.0, spacing=(spacing,) * 3)
    verts = verts + np.array([-bounds, -bounds, -bounds])
    vt = torch.from_numpy(verts.copy()).float()
    with torch.no_grad():
        normals = field.gradient(vt)
        normals = F.normalize(normals, dim=-1, eps=1e-8)
        _, feat = field.sdf_net.sdf_and_feat(vt)
        colors = field.color_net(vt, -normals, normals, feat).numpy()
    return TexturedMesh(verts.astype(np.float64), faces.astype(np.int64), colors.astype(np.float64))


@dataclass
class TexturedMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    colors: np.ndarray  # (V, 3) in [0, 1]

    def __post_init__(self):
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidInputError("faces index outside the vertex array")

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0 or len(self.faces) == 0

    def sample_points(self, n: int, seed: int = 0) -> np.ndarray:
        """Area-weighted surface samples (used by distance metrics)."""
        v = self.vertices
        tri = v[self.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        area = 0.5 * np.linalg.norm(cross, axis=1)
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(tri), size=n, p=area / area.sum())
        u = rng.uniform(size=(n, 1))
        w = rng.uniform(size=(n, 1))
        flip = (u + w) > 1.0
        u = np.where(flip, 1.0 - u, u)
        w = np.where(flip, 1.0 - w, w)
        t = tri[idx]
        return t[:, 0] + u * (t[:, 1] - t[:, 0]) + w * (t[:, 2] - t[:, 0])


def chamfer_to_sphere(mesh: TexturedMesh, radius: float, n: int = 4000) -> float:
    """Symmetric mean distance between the mesh and an analytic sphere."""
    from scipy.spatial import cKDTree

    mesh_pts = mesh.sample_points(n, seed=0)
    d_mesh_to_sphere = np.abs(np.linalg.norm(mesh_pts, axis=1) - radius)
    from . import proxy as px

    sphere_dirs = px._fibonacci_sphere(n)
    sphere_pts = sphere_dirs * radius
    dense = mesh.sample_points(4 * n, seed=1)
    tree = cKDTree(dense)
    d_sphere_to_mesh, _ = tree.query(sphere_pts)
    return float(0.5 * (d_mesh_to_sphere.mean() + d_sphere_to_mesh.mean()))


# ---------------------------------------------------------------------------
# Mesh export / import


def export_mesh(mesh: TexturedMesh, path, fmt: str | None = None) -> None:
    """Write obj (vertex-color extension) or glb."""
    if mesh.is_empty:
        raise EmptyMeshError("refusing to export an empty mesh")
    path = str(path)
    fmt = fmt or ("glb" if path.endswith(".glb") else "obj")
    if fmt == "obj":
        _write_obj(mesh, path)
    elif fmt == "glb":
        _write_glb(mesh, path)
    else:
        raise InvalidInputError(f"unsupported mesh format {fmt!r}")


def import_mesh(path) -> TexturedMesh:
    path = str(path)
    if path.endswith(".glb"):
        return _read_glb(path)
    return _read_obj(path)


def _write_obj(mesh, path):
    lines = []
    for v, c in zip(mesh.vertices, mesh.colors):
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_obj(path):
    verts, colors, faces = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                nums = [float(x) for x in parts[1:]]
                verts.append(nums[:3])
                colors.append(nums[3:6] if len(nums) >= 6 else [0.5, 0.5, 0.5])
            elif parts[0] == "f":
                faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
    return TexturedMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64), np.asarray(colors))


def _write_glb(mesh, path):
    import struct

    pos = np.ascontiguousarray(mesh.vertices, dtype="<f4")
    col = np.ascontiguousarray(np.clip(mesh.colors, 0, 1), dtype="<f4")
    idx = np.ascontiguousarray(mesh.faces.reshape(-1), dtype="<u4")
    bin_chunks = [pos.tobytes(), col.tobytes(), idx.tobytes()]
    offsets, off = [], 0
    for b in bin_chunks:
        offsets.append(off)
        off += len(b)
        if off % 4:
            off += 4 - off % 4
    body = b""
    for b in bin_chunks:
        body += b
        if len(body) % 4:
            body += b"\x00" * (4 - len(body) % 4)
    doc = {
        "asset": {"version": "2.0", "generator": "voxstudio"},
        "scene": 0,
        "scenes": [{"nodes": [0]}],
        "nodes": [{"mesh": 0}],
        "meshes": [
            {
                "primitives": [
                    {
                        "attributes": {"POSITION": 0, "COLOR_0": 1},
                        "indices": 2,
                        "mode": 4,
                    }
                ]
            }
        ],
        "buffers": [{"byteLength": len(body)}],
        "bufferViews": [
            {"buffer": 0, "byteOffset": offsets[0], "byteLength": len(bin_chunks[0]), "target": 34962},
            {"buffer": 0, "byteOffset": offsets[1], "byteLength": len(bin_chunks[1]), "target": 34962},
            {"buffer": 0, "byteOffset": offsets[2], "byteLength": len(bin_chunks[2]), "target": 34963},
        ],
        "accessors": [
            {
                "bufferView": 0,
                "componentType": 5126,
                "count": len(pos),
                "type": "VEC3",
                "min": pos.min(axis=0).tolist(),
                "max": pos.max(axis=0).tolist(),
            },
            {"bufferView": 1, "componentType": 5126, "count": len(col), "type": "VEC3"},
            {"bufferView": 2, "componentType": 5125, "count": len(idx), "type": "SCALAR"},
        ],
    }
    js = json.dumps(doc).encode()
    if len(js) % 4:
        js += b" " * (4 - len(js) % 4)
    total = 12 + 8 + len(js) + 8 + len(body)
    with open(path, "wb") as fh:
        fh.write(b"glTF" + struct.pack("<II", 2, total))
        fh.write(struct.pack("<I", len(js)) + b"JSON" + js)
        fh.write(struct.pack("<I", len(body)) + b"BIN\x00" + body)


def _read_glb(path):
    import struct

    raw = open(path, "rb").read()
    if raw[:4] != b"glTF":
        raise InvalidInputError("not a glb file")
    offset = 12
    doc, body = None, None
    while offset < len(raw):
        length, kind = struct.unpack_from("<I4s", raw, offset)
        chunk = raw[offset + 8 : offset + 8 + length]
        if kind == b"JSON":
            doc = json.loads(chunk)
        elif kind == b"BIN\x00":
            body = chunk
        offset += 8 + length
    prim = doc["meshes"][0]["primitives"][0]

    def read_accessor(i):
        acc = doc["accessors"][i]
        view = doc["bufferViews"][acc["bufferView"]]
        start = view.get("byteOffset", 0)
        buf = body[start : start + view["byteLength"]]
        if acc["componentType"] == 5126:
            arr = np.frombuffer(buf, dtype="<f4")
        else:
            arr = np.frombuffer(buf, dtype="<u4")
        if acc["type"] == "VEC3":
            arr = arr.reshape(-1, 3)
        return arr

    verts = read_accessor(prim["attributes"]["POSITION"]).astype(np.float64)
    colors = read_accessor(prim["attributes"]["COLOR_0"]).astype(np.float64)
    faces = read_accessor(prim["indices"]).astype(np.int64).reshape(-1, 3)
    return TexturedMesh(verts, faces, colors)
