"""Noise-prediction backends.

A backend predicts the noise in a noised image, either from a text prompt
(``predict_epsilon_text``) or from a reference image plus a relative camera
pose (``predict_epsilon_view``).  Images are ``(H, W, C)`` tensors.  Every
backend also declares the dense layers a :class:`~distill3d.guidance.lora.LoraModule`
may adapt, and accepts that adapter through the ``lora`` argument.

Two backends ship with the package:

``oracle``
    Knows the ground-truth scene and returns the noise that exactly explains
    ``x_t`` given the true image at the queried pose.  Distillation gradients
    against it point straight at the ground truth.
``toy_conv``
    A small randomly initialised conv net.  It has no idea what anything
    looks like; it exists to exercise shapes, adapters and determinism.

Real diffusion models plug in as ``external`` backends: subclass
:class:`GuidanceBackend`, implement the two predictors (plus ``encode``/
``decode`` for latent models) and register the class with
:func:`register_backend`.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from ..camera import CameraPose, PoseDelta, apply_delta
from ..field import render_pose
from .schedule import DiffusionSchedule


def timestep_features(t: int, T: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal features of t / T."""
    half = dim // 2
    freqs = torch.exp(-math.log(100.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    ang = (t / T) * 100.0 * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)]).to(dtype)


def prompt_embedding(y: str | None, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Deterministic pseudo text embedding; the empty/None prompt maps to zeros."""
    if not y:
        return torch.zeros(dim, dtype=dtype)
    seed = int.from_bytes(hashlib.sha256(y.encode("utf-8")).digest()[:8], "little")
    gen = torch.Generator().manual_seed(seed)
    return (torch.randn(dim, generator=gen, dtype=torch.float64) / math.sqrt(dim)).to(dtype)


class GuidanceBackend:
    """Interface shared by every noise predictor."""

    name = "base"
    guidance_scale: float = 1.0

    def __init__(self, schedule: DiffusionSchedule):
        self.schedule = schedule

    def predict_epsilon_text(self, x_t, t, y, pose: CameraPose | None = None, lora=None) -> torch.Tensor:
        raise NotImplementedError

    def predict_epsilon_view(self, x_t, t, x0_ref, delta: PoseDelta) -> torch.Tensor:
        raise NotImplementedError

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return image

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return latent

    def dense_layers(self) -> dict[str, tuple[int, int]]:
        """Adaptable layers as ``name -> (in_features, out_features)``."""
        return {}

    embedding_dim: int = 0

    def _dense(self, name: str, h: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None, lora):
        out = F.linear(h, weight, bias)
        if lora is not None:
            out = out + lora.delta(name, h)
        return out


class OracleBackend(GuidanceBackend):
    """Ground-truth noise predictor for a known synthetic scene.

    ``eps_hat = (x_t - sqrt(ab) * x_target(pose)) / sqrt(1 - ab)``, where the
    target is the scene rendered at the queried pose and at the resolution of
    ``x_t``.  An attached adapter adds a per-pixel correction head whose base
    weights are zero, so a zero adapter leaves the oracle untouched.
    """

    name = "oracle"

    def __init__(
        self,
        scene,
        schedule: DiffusionSchedule,
        ref_pose: CameraPose,
        samples_per_ray: int = 96,
        hidden: int = 16,
        cache_size: int = 64,
    ):
        super().__init__(schedule)
        self.scene = scene
        self.ref_pose = ref_pose
        self.samples_per_ray = samples_per_ray
        self.hidden = hidden
        self.embedding_dim = hidden
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self.w0 = torch.zeros(hidden, 3)
        self.b0 = torch.zeros(hidden)
        self.w1 = torch.zeros(3, hidden)
        self.b1 = torch.zeros(3)

    def dense_layers(self):
        return {"head.0": (3, self.hidden), "head.1": (self.hidden, 3)}

    @torch.no_grad()
    def target(self, pose: CameraPose, height: int, width: int, dtype=torch.float32) -> torch.Tensor:
        key = (pose.polar_deg, pose.azimuth_deg, pose.radius, height, width, dtype)
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        img = render_pose(self.scene, pose.with_resolution(width, height), self.samples_per_ray, normals=False)
        img = img.rgb.to(dtype)
        self._cache[key] = img
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return img

    def _eps(self, x_t, t, pose):
        ab = self.schedule.at(t)
        tgt = self.target(pose, x_t.shape[0], x_t.shape[1], x_t.dtype)
        return (x_t - math.sqrt(ab) * tgt) / math.sqrt(1 - ab)

    def _head(self, x_t, t, pose, lora):
        dt = x_t.dtype
        emb = timestep_features(t, self.schedule.T, self.hidden, dt) + lora.class_embedding(pose, dt)
        h = self._dense("head.0", x_t, self.w0.to(dt), self.b0.to(dt), lora) + emb
        h = F.silu(h)
        return self._dense("head.1", h, self.w1.to(dt), self.b1.to(dt), lora)

    def predict_epsilon_text(self, x_t, t, y, pose=None, lora=None):
        if pose is None:
            raise ValueError("the oracle backend needs the camera pose of x_t")
        eps = self._eps(x_t, t, pose)
        if lora is not None:
            eps = eps + self._head(x_t, t, pose, lora)
        return eps

    def predict_epsilon_view(self, x_t, t, x0_ref, delta):
        return self._eps(x_t, t, apply_delta(self.ref_pose, delta))


class ToyConvBackend(GuidanceBackend):
    """Tiny fixed-weight conv net standing in for a pixel-space diffusion model.

    Architecture: 3x3 conv on the noisy image (and, for the view-conditioned
    branch, the reference image), then three per-pixel dense layers
    conditioned on timestep, prompt and pose-delta embeddings.
    """

    name = "toy_conv"

    def __init__(self, schedule: DiffusionSchedule, seed: int = 0, channels: int = 16, hidden: int = 32,
                 guidance_scale: float = 1.0):
        super().__init__(schedule)
        self.guidance_scale = guidance_scale
        self.embedding_dim = hidden
        self.hidden = hidden
        gen = torch.Generator().manual_seed(seed)

        def rnd(*shape, fan_in):
            return torch.randn(*shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)

        self.conv_text = rnd(channels, 3, 3, 3, fan_in=27)
        self.conv_view = rnd(channels, 6, 3, 3, fan_in=54)
        self.w = {
            "dense0": rnd(hidden, channels, fan_in=channels),
            "dense1": rnd(hidden, hidden, fan_in=hidden),
            "dense2": rnd(3, hidden, fan_in=hidden),
        }
        self.b = {k: torch.zeros(v.shape[0], dtype=torch.float64) for k, v in self.w.items()}
        self.delta_proj = rnd(hidden, 5, fan_in=5)

    def dense_layers(self):
        return {k: (v.shape[1], v.shape[0]) for k, v in self.w.items()}

    def _net(self, feat, emb, lora):
        dt = feat.dtype
        h = self._dense("dense0", feat, self.w["dense0"].to(dt), self.b["dense0"].to(dt), lora)
        h = F.silu(h + emb)
        h = F.silu(self._dense("dense1", h, self.w["dense1"].to(dt), self.b["dense1"].to(dt), lora))
        return self._dense("dense2", h, self.w["dense2"].to(dt), self.b["dense2"].to(dt), lora)

    def _conv(self, x, weight):
        chw = x.permute(2, 0, 1)[None]
        return F.conv2d(chw, weight.to(x.dtype), padding=1)[0].permute(1, 2, 0)

    def predict_epsilon_text(self, x_t, t, y, pose=None, lora=None):
        dt = x_t.dtype
        feat = self._conv(x_t, self.conv_text)
        base = timestep_features(t, self.schedule.T, self.hidden, dt)
        if lora is not None and pose is not None:
            base = base + lora.class_embedding(pose, dt)
        cond = self._net(feat, base + prompt_embedding(y, self.hidden, dt), lora)
        if self.guidance_scale == 1.0:
            return cond
        uncond = self._net(feat, base, lora)
        return uncond + self.guidance_scale * (cond - uncond)

    def predict_epsilon_view(self, x_t, t, x0_ref, delta):
        dt = x_t.dtype
        if x0_ref.shape[:2] != x_t.shape[:2]:
            x0_ref = resize_image(x0_ref, x_t.shape[0], x_t.shape[1])
        feat = self._conv(torch.cat([x_t, x0_ref.to(dt)], -1), self.conv_view)
        d = delta.as_array()
        code = torch.tensor(
            [math.sin(math.radians(d[0])), math.cos(math.radians(d[0])),
             math.sin(math.radians(d[1])), math.cos(math.radians(d[1])), d[2]],
            dtype=torch.float64,
        )
        emb = timestep_features(t, self.schedule.T, self.hidden, dt) + (self.delta_proj @ code).to(dt)
        return self._net(feat, emb, None)


def resize_image(img: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Area-average down / bilinear up resize of an (H, W, C) image."""
    if img.shape[0] == height and img.shape[1] == width:
        return img
    chw = img.permute(2, 0, 1)[None]
    if height <= img.shape[0] and width <= img.shape[1]:
        out = F.adaptive_avg_pool2d(chw, (height, width))
    else:
        out = F.interpolate(chw, size=(height, width), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0)


_REGISTRY: dict[str, Callable[..., GuidanceBackend]] = {}


def register_backend(name: str, factory: Callable[..., GuidanceBackend]) -> None:
    """Make ``factory`` available under ``guidance.backend = name``."""
    _REGISTRY[name] = factory


def make_backend(name: str, **kwargs) -> GuidanceBackend:
    if name not in _REGISTRY:
        raise KeyError(f"unknown guidance backend {name!r}; registered: {sorted(_REGISTRY)}")
    return _REGISTRY[name](**kwargs)


def registered_backends() -> list[str]:
    return sorted(_REGISTRY)


register_backend("oracle", OracleBackend)
register_backend("toy_conv", ToyConvBackend)
