from __future__ import annotations

import json

import numpy as np
import pytest
import torch
from PIL import Image

from distill3d import camera, io, scenes
from distill3d.cli import cli_run
from distill3d.field import render_pose

from helpers import set_args, tiny


# --- io -----------------------------------------------------------------------

def _rgba(tmp_path, alpha):
    rgb = np.zeros((8, 8, 3), dtype=np.uint8)
    rgb[..., 0] = 255
    arr = np.concatenate([rgb, np.full((8, 8, 1), alpha, dtype=np.uint8)], -1)
    p = tmp_path / "in.png"
    Image.fromarray(arr, mode="RGBA").save(p)
    return p


def test_rgba_input_is_composited_over_white(tmp_path):
    img, mask = io.load_input(_rgba(tmp_path, 255))
    assert torch.allclose(img, torch.tensor([1.0, 0.0, 0.0]).expand(8, 8, 3))
    assert torch.all(mask == 1)
    img, mask = io.load_input(_rgba(tmp_path, 0) if False else _half(tmp_path))
    assert torch.allclose(img[0, 0], torch.tensor([1.0, 1.0, 1.0]))


def _half(tmp_path):
    arr = np.zeros((8, 8, 4), dtype=np.uint8)
    arr[..., 2] = 255
    arr[:, 4:, 3] = 255
    p = tmp_path / "half.png"
    Image.fromarray(arr, mode="RGBA").save(p)
    return p


def test_empty_alpha_rejected(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        io.load_input(_rgba(tmp_path, 0))


def test_rgb_input_needs_mask(tmp_path):
    p = tmp_path / "x.png"
    Image.fromarray(np.full((8, 8, 3), 100, dtype=np.uint8)).save(p)
    with pytest.raises(ValueError, match="no alpha"):
        io.load_input(p)
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:6, 2:6] = 255
    Image.fromarray(m).save(io.sidecar_mask_path(p))
    img, mask = io.load_input(p)
    assert float(mask.sum()) == 16
    assert torch.all(img[0, 0] == 1.0)
    Image.fromarray(m[:4]).save(tmp_path / "small.png")
    with pytest.raises(ValueError):
        io.load_input(p, tmp_path / "small.png")
    with pytest.raises(FileNotFoundError):
        io.load_input(tmp_path / "missing.png")


def test_bundled_input_matches_oracle_scene():
    img, mask = io.load_input(io.bundled_input_path())
    rgb, m = io.render_oracle_input(size=img.shape[0], samples_per_ray=192)
    assert float(((img - rgb) ** 2).mean()) < 1e-4
    assert float((mask - m).abs().max()) < 2 / 255


def test_save_rgba_roundtrip(tmp_path):
    rgb, m = io.render_oracle_input(size=32, samples_per_ray=64)
    io.save_rgba(tmp_path / "o.png", rgb, m)
    img, mask = io.load_input(tmp_path / "o.png")
    assert float((img - rgb).abs().max()) < 3 / 255
    assert float((mask - m).abs().max()) < 1 / 255


def test_turntable_view0_is_front(tmp_path):
    cam = camera.CameraConfig(width=24, height=24)
    paths = io.turntable(scenes.oracle_scene(), 4, tmp_path, cam, samples_per_ray=32)
    assert [p.name for p in paths] == [f"view_{k:03d}.png" for k in range(4)]
    front = render_pose(scenes.oracle_scene(), camera.front_pose(cam), 32, normals=False).rgb
    got = np.asarray(Image.open(paths[0]), dtype=np.float64) / 255
    assert np.abs(got - front.numpy()).max() <= 0.5 / 255 + 1e-6
    assert io.turntable_azimuths(4) == [0.0, 90.0, 180.0, 270.0]
    with pytest.raises(ValueError):
        io.turntable_azimuths(0)


def test_metrics_file(tmp_path):
    io.write_metrics(tmp_path / "m.json", {"b": np.float32(1.5), "a": float("inf"), "c": np.int64(3)})
    text = (tmp_path / "m.json").read_text()
    assert text.index('"a"') < text.index('"b"')
    assert io.read_metrics(tmp_path / "m.json") == {"a": 99.0, "b": 1.5, "c": 3}
    with pytest.raises(ValueError):
        io.write_metrics(tmp_path / "n.json", {"x": [1, 2]})


# --- cli ------------------------------------------------------------------------

def _run(argv, capsys=None):
    code = cli_run(argv)
    return code


def test_run_all_writes_outputs_and_is_deterministic(tmp_path):
    args = set_args(tiny())
    for name in ("a", "b"):
        assert cli_run(["run-all", "--out", str(tmp_path / name), "--seed", "3", "--quiet", "--turntable", "2", *args]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
    for f in ("stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "mesh.obj", "mesh.mtl", "mesh_albedo.png", "config.toml",
              "timing.json", "turntable/view_001.png", "field_front_000.png"):
        assert (a / f).exists(), f
    m = io.read_metrics(a / "metrics.json")
    assert m["run.seed"] == 3 and m["run.completed_stage"] == 3 and m["run.backend"] == "toy_conv"
    assert "stage3.front_psnr" in m


def test_stages_chain_through_out_dir(tmp_path, capsys):
    args = set_args(tiny())
    out = str(tmp_path / "r")
    assert cli_run(["stage1", "--out", out, "--quiet", *args]) == 0
    assert cli_run(["stage2", "--out", out, "--quiet"]) == 0
    assert cli_run(["stage3", "--out", out, "--quiet"]) == 0
    assert io.read_metrics(tmp_path / "r" / "metrics.json")["run.completed_stage"] == 3
    assert cli_run(["metrics", "--mesh", str(tmp_path / "r" / "mesh.obj"), *args]) == 0
    assert "mesh.front_psnr" in json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    code = cli_run(["preview", "--resume", str(tmp_path / "r" / "stage2.ckpt"), "--out", str(tmp_path / "pv"),
                    "--resolution", "16", "--steps", "2"])
    assert code == 0 and any(p.name.startswith("preview_p90") for p in (tmp_path / "pv").iterdir())


@pytest.mark.parametrize("argv,needle", [
    (["stage2"], "stage-1 checkpoint"),
    (["stage3", "--resume", "nope.ckpt"], "not found"),
    (["run-all", "--image", "x.png"], "--prompt"),
    (["preview"], "--resume"),
    (["metrics"], "--mesh"),
    (["run-all", "--set", "stage1.steps=abc"], "stage1.steps"),
])
def test_expected_errors_exit_2(tmp_path, capsys, argv, needle):
    assert cli_run([*argv, "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and needle in err[0]


def test_resume_from_wrong_stage(tmp_path, capsys):
    out = str(tmp_path / "r")
    assert cli_run(["stage1", "--out", out, "--quiet", *set_args(tiny())]) == 0
    assert cli_run(["stage3", "--resume", f"{out}/stage1.ckpt", "--out", out]) == 2
    assert "stage-2" in capsys.readouterr().err
