import numpy as np
import pytest

from voxstudio import containers as ct
from voxstudio.errors import InvalidInputError


def test_volume_round_trip_f32(tmp_path):
    rng = np.random.default_rng(0)
    vol = rng.normal(size=(4, 8, 8, 8)).astype(np.float32)
    path = tmp_path / "vol.cfvx"
    ct.write_volume(path, vol)
    back = ct.read_volume(path)
    assert np.array_equal(back, vol)


def test_volume_half_precision_quantizes(tmp_path):
    rng = np.random.default_rng(1)
    vol = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
    path = tmp_path / "vol.cfvx"
    ct.write_volume(path, vol, half_precision=True)
    back = ct.read_volume(path)
    assert np.array_equal(back, vol.astype(np.float16).astype(np.float32))


def test_header_layout(tmp_path):
    vol = np.zeros((3, 5, 5, 5), dtype=np.float32)
    path = tmp_path / "v.cfvx"
    ct.write_volume(path, vol)
    raw = path.read_bytes()
    assert raw[:4] == b"CFVX"
    assert len(raw) == 16 + 3 * 5**3 * 4
    assert int.from_bytes(raw[8:12], "little") == 5
    assert int.from_bytes(raw[12:16], "little") == 3


def test_single_channel_grid(tmp_path):
    grid = (np.arange(27).reshape(3, 3, 3) % 2).astype(np.float32)
    path = tmp_path / "occ.cfvx"
    ct.write_volume(path, grid)
    back = ct.read_volume(path)
    assert back.shape == (1, 3, 3, 3)
    assert np.array_equal(back[0], grid)


def test_corrupt_rejected(tmp_path):
    path = tmp_path / "bad.cfvx"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(InvalidInputError):
        ct.read_volume(path)
    path.write_bytes(b"CF")
    with pytest.raises(InvalidInputError):
        ct.read_volume(path)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    params = {
        "denoiser.conv_in.weight": rng.normal(size=(8, 3, 3, 3)).astype(np.float32),
        "adapter.lift.0.bias": rng.normal(size=(8,)).astype(np.float32),
    }
    schedule = {"total_steps": 100, "betas": [0.1, 0.2]}
    config = {"preset": "desk", "n_views": 8}
    path = tmp_path / "model.ckpt"
    ct.save_checkpoint(path, params, schedule, config, extra={"train_step": 7})
    p2, s2, c2, extra = ct.load_checkpoint(path)
    assert set(p2) == set(params)
    for name in params:
        assert np.array_equal(p2[name], params[name])
    assert s2 == schedule
    assert c2 == config
    assert extra["train_step"] == 7
