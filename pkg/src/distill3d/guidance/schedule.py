"""Diffusion noise tables, noise bands and per-timestep weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Cumulative signal rates; ``alpha_bar[t - 1]`` is the rate at step t in 1..T."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise ValueError("alpha_bar must be a 1-D table with at least two entries")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing in t")
        if not (ab[0] > 0.99 and 0 < ab[-1] < 0.01):
            raise ValueError(f"alpha_bar endpoints out of range: {ab[0]:.4g}, {ab[-1]:.4g}")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.alpha_bar.size

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "DiffusionSchedule":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        return cls(np.cumprod(1 - betas))

    @classmethod
    def cosine(cls, T: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> "DiffusionSchedule":
        f = lambda u: math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
        betas = np.array([min(1 - f(i + 1) / f(i), max_beta) for i in range(T)])
        return cls(np.cumprod(1 - betas))

    @classmethod
    def from_name(cls, name: str, T: int = 1000) -> "DiffusionSchedule":
        if name == "linear":
            return cls.linear(T)
        if name == "cosine":
            return cls.cosine(T)
        raise ValueError(f"unknown diffusion schedule {name!r}")

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t

    def at(self, t: int) -> float:
        """alpha_bar at integer timestep t; t = 0 means the clean image (1.0)."""
        if int(t) == 0:
            return 1.0
        return float(self.alpha_bar[self.check_t(t) - 1])


def timestep_weight(schedule: DiffusionSchedule, t: int, kind: str = "one_minus_alpha_bar") -> float:
    """w_t for distillation gradients."""
    if kind == "one_minus_alpha_bar":
        return 1.0 - schedule.at(t)
    if kind == "constant":
        return 1.0
    raise ValueError(f"unknown weight schedule {kind!r}")


@dataclass(frozen=True)
class NoiseBand:
    """Timestep interval as fractions of T."""

    t_min: float
    t_max: float

    def __post_init__(self):
        if not 0.0 <= self.t_min <= self.t_max <= 1.0:
            raise ValueError(f"noise band must satisfy 0 <= t_min <= t_max <= 1, got [{self.t_min}, {self.t_max}]")

    def integer_range(self, T: int) -> tuple[int, int]:
        lo = max(1, math.ceil(self.t_min * T - 1e-9))
        hi = min(T, math.floor(self.t_max * T + 1e-9))
        if lo > hi:
            lo = hi = min(T, max(1, round(self.t_min * T)))
        return lo, hi


@dataclass(frozen=True)
class NoiseBands:
    """High band for stage 1, low band shared by stages 2 and 3."""

    stage1: NoiseBand = NoiseBand(0.5, 0.98)
    stage23: NoiseBand = NoiseBand(0.02, 0.45)

    def __post_init__(self):
        if not self.stage1.t_min > self.stage23.t_max:
            raise ValueError(
                f"stage-1 band {self.stage1} must lie strictly above the stage-2/3 band {self.stage23}"
            )

    def for_stage(self, stage: int) -> NoiseBand:
        if stage == 1:
            return self.stage1
        if stage in (2, 3):
            return self.stage23
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")


def sample_noise_level(stage: int, step: int, bands: NoiseBands, rng: np.random.Generator, T: int = 1000) -> int:
    """Integer timestep drawn uniformly from the band of ``stage``.

    ``step`` is the step index within the stage; the band is constant within
    a stage, so it only matters for logging.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    lo, hi = bands.for_stage(stage).integer_range(T)
    if lo == hi:
        return lo
    return int(rng.integers(lo, hi + 1))
