"""Orbit cameras, ray generation and pose deltas.

Conventions: poses live on a sphere around the world origin, polar angle is
measured from +z, azimuth from +x towards +y, and every camera looks at the
origin with +z as the up hint.  The front (reference) view is polar 90,
azimuth 0, i.e. the camera sits on +x looking down -x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    focal: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "CameraIntrinsics":
        """Pinhole intrinsics from a vertical field of view in degrees."""
        focal = 0.5 * height / math.tan(math.radians(fov_deg) / 2)
        return cls(int(width), int(height), float(focal))

    @property
    def fov_deg(self) -> float:
        return math.degrees(2 * math.atan(0.5 * self.height / self.focal))

    def resized(self, width: int, height: int | None = None) -> "CameraIntrinsics":
        """Same field of view at another resolution."""
        height = width if height is None else height
        return CameraIntrinsics.from_fov(width, height, self.fov_deg)


@dataclass(frozen=True)
class CameraPose:
    polar_deg: float
    azimuth_deg: float
    radius: float
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        if not 0.0 <= self.polar_deg <= 180.0:
            raise ValueError(f"polar angle {self.polar_deg} outside [0, 180]")
        if not 0.0 <= self.azimuth_deg < 360.0:
            raise ValueError(f"azimuth {self.azimuth_deg} outside [0, 360)")
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")

    @property
    def position(self) -> np.ndarray:
        th, ph = math.radians(self.polar_deg), math.radians(self.azimuth_deg)
        return self.radius * np.array(
            [math.sin(th) * math.cos(ph), math.sin(th) * math.sin(ph), math.cos(th)]
        )

    def frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) unit vectors of the camera in world space."""
        origin = self.position
        forward = -origin / np.linalg.norm(origin)
        hint = np.array([0.0, 0.0, 1.0])
        if abs(forward @ hint) > 1 - 1e-9:
            # looking straight up/down the z axis
            hint = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, hint)
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return right, up, forward

    def with_intrinsics(self, intrinsics: CameraIntrinsics) -> "CameraPose":
        return replace(self, intrinsics=intrinsics)

    def with_resolution(self, width: int, height: int | None = None) -> "CameraPose":
        return replace(self, intrinsics=self.intrinsics.resized(width, height))


@dataclass(frozen=True)
class PoseDelta:
    d_polar: float
    d_azimuth: float
    d_radius: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d_polar, self.d_azimuth, self.d_radius])


@dataclass(frozen=True)
class RayBundle:
    origins: torch.Tensor  # (H, W, 3)
    directions: torch.Tensor  # (H, W, 3), unit norm
    resolution: tuple[int, int]  # (width, height)

    def flat(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.origins.reshape(-1, 3), self.directions.reshape(-1, 3)


@dataclass(frozen=True)
class CameraConfig:
    radius: float = 2.0
    fov_deg: float = 49.1
    polar_min: float = 60.0
    polar_max: float = 150.0
    width: int = 64
    height: int = 64

    def intrinsics(self, width: int | None = None, height: int | None = None) -> CameraIntrinsics:
        w = self.width if width is None else width
        h = (self.height if width is None else w) if height is None else height
        return CameraIntrinsics.from_fov(w, h, self.fov_deg)


def _wrap_azimuth(az: float) -> float:
    az = az % 360.0
    return 0.0 if az >= 360.0 else az


def front_pose(cfg: CameraConfig) -> CameraPose:
    """Pose the input photograph is assumed to be taken from."""
    return CameraPose(90.0, 0.0, cfg.radius, cfg.intrinsics())


def sample_novel_pose(rng: np.random.Generator, cfg: CameraConfig) -> CameraPose:
    azimuth = _wrap_azimuth(rng.uniform(0.0, 360.0))
    polar = rng.uniform(cfg.polar_min, cfg.polar_max)
    return CameraPose(float(polar), float(azimuth), cfg.radius, cfg.intrinsics())


def orbit_pose(cfg: CameraConfig, polar_deg: float, azimuth_deg: float) -> CameraPose:
    return CameraPose(float(polar_deg), _wrap_azimuth(azimuth_deg), cfg.radius, cfg.intrinsics())


def pose_delta(p: CameraPose, p_ref: CameraPose) -> PoseDelta:
    """Relative pose of ``p`` with respect to ``p_ref``; azimuth on the shortest arc."""
    if p.intrinsics != p_ref.intrinsics:
        raise ValueError("pose_delta needs poses with identical intrinsics")
    d_az = (p.azimuth_deg - p_ref.azimuth_deg) % 360.0
    if d_az > 180.0:
        d_az -= 360.0
    return PoseDelta(p.polar_deg - p_ref.polar_deg, d_az, p.radius - p_ref.radius)


def apply_delta(p_ref: CameraPose, delta: PoseDelta) -> CameraPose:
    """Inverse of :func:`pose_delta`."""
    return replace(
        p_ref,
        polar_deg=min(max(p_ref.polar_deg + delta.d_polar, 0.0), 180.0),
        azimuth_deg=_wrap_azimuth(p_ref.azimuth_deg + delta.d_azimuth),
        radius=p_ref.radius + delta.d_radius,
    )


def camera_embedding(pose: CameraPose, radius_scale: float | None = None) -> np.ndarray:
    """Five-scalar class embedding of a pose: sin/cos azimuth, sin/cos polar, radius."""
    th, ph = math.radians(pose.polar_deg), math.radians(pose.azimuth_deg)
    r = pose.radius / (radius_scale or pose.radius)
    return np.array([math.sin(ph), math.cos(ph), math.sin(th), math.cos(th), r])


def generate_rays(pose: CameraPose, dtype: torch.dtype = torch.float32) -> RayBundle:
    """Pinhole rays through pixel centres."""
    K = pose.intrinsics
    right, up, forward = pose.frame()
    j = (np.arange(K.width) + 0.5 - K.width / 2) / K.focal
    i = (np.arange(K.height) + 0.5 - K.height / 2) / K.focal
    u, v = np.meshgrid(j, i, indexing="xy")
    dirs = forward[None, None] + u[..., None] * right - v[..., None] * up
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape)
    return RayBundle(
        torch.as_tensor(np.ascontiguousarray(origins), dtype=dtype),
        torch.as_tensor(dirs, dtype=dtype),
        (K.width, K.height),
    )


def project(pose: CameraPose, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World points to continuous pixel coordinates (x right, y down) and camera depth.

    A pixel (row i, col j) has its centre at (j + 0.5, i + 0.5).
    """
    K = pose.intrinsics
    right, up, forward = pose.frame()
    rel = np.asarray(points, dtype=np.float64) - pose.position
    z = rel @ forward
    x = K.width / 2 + K.focal * (rel @ right) / z
    y = K.height / 2 - K.focal * (rel @ up) / z
    return np.stack([x, y], axis=-1), z
