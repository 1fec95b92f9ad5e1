"""Training loop over the synthetic dataset.

Each step draws objects, samples one shared timestep per object, and
minimizes the noise-prediction error through the full conditioning stack
(adapter, projector, candidate encoder, denoiser). The toy candidate
generator and the preview decoder train jointly on the same batches with
their own objectives.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ControlStrength
from .datagen import load_object_views
from .diffusion import CandidateImage
from .errors import InvalidInputError
from .model import PROMPT_VOCAB, StudioModel, training_step

log = logging.getLogger(__name__)


@dataclass
class TrainReport:
    steps: int = 0
    losses: list = field(default_factory=list)
    candidate_losses: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def window_mean(self, first: bool, k: int = 50) -> float:
        vals = self.losses[:k] if first else self.losses[-k:]
        return float(np.mean(vals))


class ObjectStore:
    """Lazy dataset reader with an in-memory cache of decoded objects."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = json.loads((self.root / "manifest.json").read_text())
        self.entries = manifest["objects"]
        self._cache = {}

    def __len__(self):
        return len(self.entries)

    def get(self, index: int):
        if index not in self._cache:
            proxy, images, masks, views = load_object_views(self.root, index)
            entry = self.entries[index]
            self._cache[index] = {
                "proxy": proxy,
                "images": images,
                "masks": masks,
                "views": views,
                "category": entry["category"],
                "seed": entry["seed"],
            }
        return self._cache[index]


def train_model(
    model: StudioModel,
    dataset_root,
    steps: int,
    lr: float | None = None,
    batch_size: int | None = None,
    seed: int = 0,
    log_every: int = 50,
    checkpoint_path=None,
    checkpoint_every: int = 1000,
    strength: ControlStrength | None = None,
) -> TrainReport:
    """Optimize the model in place; returns the per-step loss trace."""
    store = ObjectStore(dataset_root)
    if len(store) < 1:
        raise InvalidInputError("dataset is empty")
    cfg = model.config
    lr = lr if lr is not None else cfg.lr
    batch_size = batch_size if batch_size is not None else cfg.batch_size
    strength = strength or ControlStrength()

    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    report = TrainReport()
    t0 = time.time()
    model.train()

    for step in range(steps):
        opt.zero_grad()
        main_total, cand_total = 0.0, 0.0
        for _ in range(batch_size):
            idx = int(torch.randint(len(store), (1,), generator=gen))
            obj = store.get(idx)
            views = obj["views"]
            candidate = CandidateImage(
                (obj["images"][0] + 1.0) * 0.5, anchor_azimuth=views[0].azimuth
            )
            grid = model.voxelize_proxy(obj["proxy"], strength, seed=obj["seed"])
            batch = {
                "views": obj["images"],
                "grid": grid,
                "candidate": candidate,
                "poses": views,
                "strength": strength,
            }
            loss_main = training_step(model, batch, gen)

            # candidate generator: silhouette-conditioned denoising on two views
            imgs = torch.as_tensor(obj["images"][:2])
            masks = torch.as_tensor(obj["masks"][:2])[:, None]
            prompt = torch.full((2,), PROMPT_VOCAB.get(obj["category"], 0), dtype=torch.long)
            loss_cand = model.candidate_generator.training_loss(
                imgs, masks, prompt, model.schedule, generator=gen
            )

            # preview decoder: undo mild corruption of the clean latent
            noise = torch.randn(imgs.shape, generator=gen) * 0.1
            target = (imgs + 1.0) * 0.5
            loss_dec = torch.nn.functional.mse_loss(model.decoder(imgs + noise), target)

            loss = loss_main + loss_cand + 0.1 * loss_dec
            (loss / batch_size).backward()
            main_total += float(loss_main.detach())
            cand_total += float(loss_cand.detach())
        opt.step()
        report.losses.append(main_total / batch_size)
        report.candidate_losses.append(cand_total / batch_size)
        report.steps = step + 1
        if (step + 1) % log_every == 0:
            window = report.losses[-log_every:]
            log.info(
                "step %d/%d loss %.4f (cand %.4f)",
                step + 1,
                steps,
                float(np.mean(window)),
                float(np.mean(report.candidate_losses[-log_every:])),
            )
        if checkpoint_path and (step + 1) % checkpoint_every == 0:
            model.trained = True
            model.save(checkpoint_path, extra={"train_step": step + 1})

    report.wall_seconds = time.time() - t0
    model.trained = True
    model.eval()
    if checkpoint_path:
        model.save(checkpoint_path, extra={"train_step": steps})
    return report
