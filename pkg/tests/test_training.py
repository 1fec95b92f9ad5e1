import numpy as np
import pytest
import torch

from voxstudio import datagen as dg
from voxstudio.cameras import Intrinsics, make_view_ring
from voxstudio.config import PipelineConfig
from voxstudio.errors import TrainingFault
from voxstudio.model import StudioModel, training_step
from voxstudio.training import train_model

TINY_TRAIN = PipelineConfig(
    preset="desk", n_views=3, image_size=16, volume_resolution=8,
    volume_channels=8, adapter_widths=(8, 12, 16), ray_samples=4,
    unet_widths=(8, 12, 16), embed_dim=32, total_timesteps=100, sample_steps=4,
)


@pytest.fixture(scope="module")
def overfit_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit") / "ds"
    views = make_view_ring(3, intrinsics=Intrinsics.square(16))
    dg.build_dataset(16, views, root, size=16)
    return root


def test_training_fault_on_nonfinite(tmp_path):
    torch.manual_seed(0)
    model = StudioModel(TINY_TRAIN)
    ring = TINY_TRAIN.view_ring()
    rng = np.random.default_rng(0)
    from voxstudio.config import ControlStrength
    from voxstudio.diffusion import CandidateImage
    from voxstudio.proxy import Primitive, ProxyShape, normalize

    proxy = normalize(ProxyShape((
        Primitive("sphere", np.zeros(3), np.full(3, 0.5), np.array([1.0, 0, 0, 0]), 0),
    )))
    batch = {
        "views": rng.uniform(-1, 1, (3, 3, 16, 16)).astype(np.float32),
        "grid": model.voxelize_proxy(proxy, ControlStrength(n_samples=64), 0),
        "candidate": CandidateImage(rng.uniform(0, 1, (3, 16, 16)).astype(np.float32)),
        "poses": ring,
    }
    model.predict_noise = lambda *a, **k: torch.full((3, 3, 16, 16), float("nan"))
    with pytest.raises(TrainingFault):
        training_step(model, batch, torch.Generator().manual_seed(0), dump_dir=tmp_path)


def test_checkpointing_during_training(overfit_dataset, tmp_path):
    torch.manual_seed(0)
    model = StudioModel(TINY_TRAIN)
    ckpt = tmp_path / "m.ckpt"
    train_model(model, overfit_dataset, steps=3, lr=1e-3, batch_size=1, seed=0,
                checkpoint_path=ckpt, checkpoint_every=2)
    assert ckpt.exists()
    back = StudioModel.load(ckpt)
    assert back.trained
    for a, b in zip(model.state_dict().values(), back.state_dict().values()):
        assert torch.equal(a, b)


@pytest.mark.slow
def test_overfit_smoke_500_steps(overfit_dataset):
    # 16-object set: the objective must fall below a quarter of its start
    torch.manual_seed(0)
    model = StudioModel(TINY_TRAIN)
    report = train_model(model, overfit_dataset, steps=500, lr=2e-3, batch_size=1, seed=0)
    initial = report.window_mean(first=True, k=50)
    final = report.window_mean(first=False, k=50)
    assert final < 0.25 * initial, f"loss {initial:.3f} -> {final:.3f}"
    assert model.trained
