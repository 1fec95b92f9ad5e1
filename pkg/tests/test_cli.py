import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from voxstudio.cli import main
from voxstudio.config import TINY


TINY_OVERRIDES = {
    "n_views": 3,
    "image_size": 16,
    "volume_resolution": 8,
    "volume_channels": 8,
    "adapter_widths": [8, 12, 16],
    "ray_samples": 8,
    "unet_widths": [8, 12, 16],
    "embed_dim": 32,
    "total_timesteps": 100,
    "sample_steps": 4,
    "preview_steps": 2,
}


def write_tiny_config(tmp_path):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY_OVERRIDES))
    return cfg


def test_selftest_exits_zero(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_unknown_flag_usage_error_with_suggestion(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["dataset", "--out", "/tmp/x", "--objetcs", "3"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "--objects" in err  # did-you-mean hint


def test_sample_without_checkpoint_exits_one(tmp_path, capsys):
    proxy = {
        "version": 1,
        "primitives": [
            {"kind": "sphere", "center": [0, 0, 0], "half_extents": [0.5, 0.5, 0.5],
             "rotation": [1, 0, 0, 0], "part_id": 0}
        ],
    }
    ppath = tmp_path / "proxy.json"
    ppath.write_text(json.dumps(proxy))
    code = main(["sample", "--proxy", str(ppath), "--data-dir", str(tmp_path / "data")])
    assert code == 1
    err = capsys.readouterr().err
    assert "model" in err.lower() and "checkpoint" in err.lower()


def test_train_paper_preset_banner(tmp_path, capsys):
    code = main([
        "train", "--preset", "paper", "--dataset", str(tmp_path), "--out",
        str(tmp_path / "m.ckpt"), "--dry-run",
    ])
    assert code == 0
    err = capsys.readouterr().err
    assert '"lr": 5e-05' in err
    assert '"batch_size": 8' in err
    assert '"n_views": 16' in err


def test_dataset_command(tmp_path, capsys):
    cfg = write_tiny_config(tmp_path)
    code = main([
        "dataset", "--out", str(tmp_path / "ds"), "--objects", "2",
        "--config", str(cfg),
    ])
    assert code == 0
    assert (tmp_path / "ds" / "manifest.json").exists()
    assert (tmp_path / "ds" / "resolved_config.json").exists()


@pytest.mark.slow
def test_full_cli_loop(tmp_path, capsys):
    cfg = write_tiny_config(tmp_path)
    ds = tmp_path / "ds"
    ckpt = tmp_path / "model.ckpt"
    data_dir = tmp_path / "studio"

    assert main(["dataset", "--out", str(ds), "--objects", "3", "--config", str(cfg)]) == 0
    assert main([
        "train", "--dataset", str(ds), "--out", str(ckpt), "--config", str(cfg),
        "--steps", "3",
    ]) == 0
    assert ckpt.exists()

    proxy_path = ds / "obj_00000" / "proxy.json"
    out_dir = tmp_path / "out"
    code = main([
        "sample", "--proxy", str(proxy_path), "--checkpoint", str(ckpt),
        "--data-dir", str(data_dir), "--out", str(out_dir), "--seed", "3",
        "--n-samples", "64",
    ])
    assert code == 0
    sid = capsys.readouterr().out.strip().splitlines()[-1]
    assert (out_dir / "view_00.png").exists()
    assert (out_dir / "resolved_config.json").exists()

    png_out = tmp_path / "pv.png"
    assert main([
        "preview", "--session", sid, "--az", "45", "--el", "-30",
        "--checkpoint", str(ckpt), "--data-dir", str(data_dir), "--out", str(png_out),
    ]) == 0
    assert png_out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    assert main([
        "edit", "--session", sid, "--parts", "0", "--radius", "1",
        "--checkpoint", str(ckpt), "--data-dir", str(data_dir),
    ]) == 0

    assert main([
        "reconstruct", "--session", sid, "--iterations", "5",
        "--checkpoint", str(ckpt), "--data-dir", str(data_dir),
        "--no-volume-guidance", "--out", str(tmp_path / "mesh_out"),
    ]) == 0
    meshes = list((tmp_path / "mesh_out").glob("mesh_v*.glb"))
    assert meshes and meshes[0].read_bytes()[:4] == b"glTF"


@pytest.mark.slow
def test_sample_reproducible_across_runs(tmp_path, capsys):
    cfg = write_tiny_config(tmp_path)
    ds = tmp_path / "ds"
    ckpt = tmp_path / "model.ckpt"
    assert main(["dataset", "--out", str(ds), "--objects", "2", "--config", str(cfg)]) == 0
    assert main([
        "train", "--dataset", str(ds), "--out", str(ckpt), "--config", str(cfg), "--steps", "2",
    ]) == 0
    proxy_path = ds / "obj_00000" / "proxy.json"

    outs = []
    for run in range(2):
        out_dir = tmp_path / f"out{run}"
        assert main([
            "sample", "--proxy", str(proxy_path), "--checkpoint", str(ckpt),
            "--data-dir", str(tmp_path / f"studio{run}"), "--out", str(out_dir),
            "--seed", "11", "--n-samples", "64",
        ]) == 0
        outs.append((out_dir / "view_00.png").read_bytes())
    assert outs[0] == outs[1]
