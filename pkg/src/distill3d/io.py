"""Input images, PNG output, turntables and the metrics file."""

from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .camera import CameraConfig, CameraPose, orbit_pose
from .field import render_pose

BUNDLED_SCENE = "oracle_blob_pair.png"
BUNDLED_PROMPT = "an orange-capped blue ball with a green stripe and a small bump"


def bundled_input_path() -> Path:
    """The synthetic oracle scene shipped with the package (front view, RGBA)."""
    return Path(str(resources.files("distill3d") / "data" / BUNDLED_SCENE))


def _to_numpy(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().double().numpy()
    return np.asarray(img, dtype=np.float64)


def save_image(path, img) -> Path:
    """Write an (H, W, 3) or (H, W) image in [0, 1] as 8-bit PNG."""
    arr = np.clip(_to_numpy(img), 0.0, 1.0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)
    return path


def save_rgba(path, rgb, mask) -> Path:
    """Straight-alpha RGBA PNG from a colour composited over white and its coverage."""
    rgb, m = _to_numpy(rgb), _to_numpy(mask)
    straight = np.where(m[..., None] > 1e-6, (rgb - (1.0 - m[..., None])) / np.maximum(m[..., None], 1e-6), 1.0)
    arr = np.concatenate([np.clip(straight, 0, 1), np.clip(m, 0, 1)[..., None]], -1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGBA").save(path)
    return path


def sidecar_mask_path(path) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}_mask.png")


def load_input(path, mask_path=None) -> tuple[torch.Tensor, torch.Tensor]:
    """RGB image composited over white, and its mask, both float32 in [0, 1].

    The mask is the alpha channel when the PNG has one; otherwise
    ``mask_path`` or the sidecar ``<stem>_mask.png`` is used.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input image not found: {path}")
    img = Image.open(path)
    has_alpha = img.mode in ("RGBA", "LA", "PA") or (img.mode == "P" and "transparency" in img.info)
    if has_alpha:
        rgba = np.asarray(img.convert("RGBA"), dtype=np.float64) / 255.0
        rgb, mask = rgba[..., :3], rgba[..., 3]
    else:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        mpath = Path(mask_path) if mask_path is not None else sidecar_mask_path(path)
        if not mpath.exists():
            raise ValueError(
                f"{path} has no alpha channel and no mask was found at {mpath}; "
                "supply an RGBA PNG or a sidecar mask PNG"
            )
        mimg = Image.open(mpath)
        if mimg.size != img.size:
            raise ValueError(f"mask {mpath} is {mimg.size}, image is {img.size}")
        mask = np.asarray(mimg.convert("L"), dtype=np.float64) / 255.0
    if mask.max() <= 0.0:
        raise ValueError(f"{path}: mask is empty (fully transparent input)")
    comp = rgb * mask[..., None] + (1.0 - mask[..., None])
    return torch.as_tensor(comp, dtype=torch.float32), torch.as_tensor(mask, dtype=torch.float32)


def turntable_azimuths(n_views: int) -> list[float]:
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    return [360.0 * k / n_views for k in range(n_views)]


def _renderer(renderable, samples_per_ray: int):
    from .mesh_refine import RefinableMesh, rasterize, render_textured_mesh
    from .meshing import TexturedMesh

    if isinstance(renderable, TexturedMesh):
        return lambda pose: render_textured_mesh(renderable, pose).rgb
    if isinstance(renderable, RefinableMesh):
        return lambda pose: rasterize(renderable, pose).rgb
    if hasattr(renderable, "query"):
        return lambda pose: render_pose(renderable, pose, samples_per_ray, normals=False).rgb
    if callable(renderable):
        return renderable
    raise TypeError(f"cannot render {type(renderable).__name__}")


@torch.no_grad()
def turntable(renderable, n_views: int, out_dir, camera: CameraConfig, polar_deg: float = 90.0,
              samples_per_ray: int = 64, prefix: str = "view") -> list[Path]:
    """Render ``n_views`` azimuths at a fixed polar angle; view 0 is the front pose."""
    render = _renderer(renderable, samples_per_ray)
    paths = []
    for k, az in enumerate(turntable_azimuths(n_views)):
        pose: CameraPose = orbit_pose(camera, polar_deg, az)
        paths.append(save_image(Path(out_dir) / f"{prefix}_{k:03d}.png", render(pose)))
    return paths


def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        if math.isinf(v):
            return 99.0 if v > 0 else -99.0
        return v
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_metrics(path, metrics: dict) -> Path:
    """Flat ``key: value`` JSON, keys sorted, one per line."""
    flat = {str(k): _clean(v) for k, v in metrics.items()}
    for k, v in flat.items():
        if isinstance(v, (dict, list)):
            raise ValueError(f"metrics must be flat, {k} is {type(v).__name__}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(flat, sort_keys=True, indent=1) + "\n")
    return path


def read_metrics(path) -> dict:
    return json.loads(Path(path).read_text())


def render_oracle_input(name: str = "blob_pair", size: int = 256, samples_per_ray: int = 192,
                        camera: CameraConfig | None = None):
    """Front view of a synthetic oracle scene as (rgb over white, mask)."""
    from .camera import front_pose
    from .scenes import oracle_scene

    cam = camera or CameraConfig(width=size, height=size)
    out = render_pose(oracle_scene(name), front_pose(cam), samples_per_ray, normals=False)
    return out.rgb, out.mask
