"""Synthetic analytic scenes used as ground truth by the oracle backend.

These are hand-made test scenes, not data from any published dataset.
"""

from __future__ import annotations

import torch


class AnalyticField:
    """Field defined by closed-form density and colour functions.

    Exposes the same ``query``/``density``/``color``/``bounds`` surface as
    :class:`~distill3d.field.HashGridField`, so it can be volume rendered,
    meshed and baked with the same code.
    """

    def __init__(self, density_fn, color_fn, bounds=(-1.0, 1.0), normal_step=1.0 / 128, dtype=torch.float32):
        self._density_fn = density_fn
        self._color_fn = color_fn
        self.bounds = bounds
        self.normal_step = normal_step
        self.dtype = dtype

    def _inside(self, points):
        lo, hi = self.bounds
        return ((points >= lo) & (points <= hi)).all(-1)

    def density(self, points: torch.Tensor) -> torch.Tensor:
        return self._density_fn(points) * self._inside(points)

    def color(self, points: torch.Tensor) -> torch.Tensor:
        return self._color_fn(points)

    def query(self, points: torch.Tensor):
        return self.density(points), self.color(points)


def sphere_density(radius: float, peak: float = 50.0, softness: float = 0.01):
    def fn(p):
        return peak * torch.sigmoid((radius - p.norm(dim=-1)) / softness)

    return fn


def constant_color(rgb):
    def fn(p):
        return torch.as_tensor(rgb, dtype=p.dtype).expand(*p.shape[:-1], 3)

    return fn


def two_tone_color(top=(0.95, 0.55, 0.1), bottom=(0.15, 0.35, 0.85), softness=0.0):
    """Top half (z > 0) one colour, bottom half another."""

    def fn(p):
        a = torch.as_tensor(top, dtype=p.dtype)
        b = torch.as_tensor(bottom, dtype=p.dtype)
        if softness > 0:
            s = torch.sigmoid(p[..., 2:3] / softness)
        else:
            s = (p[..., 2:3] > 0).to(p.dtype)
        return s * a + (1 - s) * b

    return fn


def red_sphere(radius: float = 0.5, peak: float = 50.0, dtype=torch.float32) -> AnalyticField:
    return AnalyticField(sphere_density(radius, peak), constant_color((1.0, 0.0, 0.0)), dtype=dtype)


def two_tone_sphere(radius: float = 0.5, peak: float = 50.0, dtype=torch.float32) -> AnalyticField:
    return AnalyticField(sphere_density(radius, peak), two_tone_color(), dtype=dtype)


def _blend_scene_color(p):
    # orange cap on top, blue body, a greenish band that changes with azimuth
    top = torch.tensor((0.95, 0.55, 0.12), dtype=p.dtype)
    body = torch.tensor((0.15, 0.35, 0.85), dtype=p.dtype)
    band = torch.tensor((0.2, 0.75, 0.35), dtype=p.dtype)
    z = p[..., 2:3]
    s_top = torch.sigmoid((z - 0.1) / 0.04)
    az = torch.atan2(p[..., 1:2], p[..., 0:1])
    s_band = torch.sigmoid((0.15 - z.abs()) / 0.03) * (0.5 + 0.5 * torch.cos(az))
    c = s_top * top + (1 - s_top) * body
    return (1 - s_band) * c + s_band * band


def _blend_scene_density(p):
    # a body sphere plus a smaller offset bump that breaks rotational symmetry
    body = 0.42 - p.norm(dim=-1)
    bump = 0.18 - (p - torch.tensor((0.2, 0.25, 0.3), dtype=p.dtype)).norm(dim=-1)
    sdf = torch.maximum(body, bump)
    return 60.0 * torch.sigmoid(sdf / 0.015)


def oracle_scene(name: str = "blob_pair", dtype=torch.float32) -> AnalyticField:
    """Bundled synthetic scenes by name."""
    if name == "blob_pair":
        return AnalyticField(_blend_scene_density, _blend_scene_color, dtype=dtype)
    if name == "two_tone":
        return two_tone_sphere(0.45, dtype=dtype)
    if name == "red_sphere":
        return red_sphere(0.5, dtype=dtype)
    raise KeyError(f"unknown oracle scene {name!r}")


SCENES = ("blob_pair", "two_tone", "red_sphere")
