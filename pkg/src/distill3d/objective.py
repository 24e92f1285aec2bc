"""Reconstruction and regularisation losses, and linear weight schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

# (dy, dx) for the eight one-pixel shifts
SHIFTS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class WeightSchedule:
    """Linear ramp from ``start_value`` at ``start_step`` to ``end_value`` at ``end_step``."""

    name: str
    start_value: float
    end_value: float
    start_step: int = 0
    end_step: int = 1

    def __post_init__(self):
        if self.end_step < self.start_step:
            raise ValueError(f"{self.name}: end_step < start_step")

    @property
    def direction(self) -> str:
        if self.end_value > self.start_value:
            return "increase"
        return "decrease" if self.end_value < self.start_value else "constant"


def schedule_value(schedule: WeightSchedule, step: int) -> float:
    """Value at ``step``, clamped to the endpoints outside the ramp."""
    if step < 0:
        raise ValueError("step must be non-negative")
    s = schedule
    if step <= s.start_step or s.end_step == s.start_step:
        return float(s.start_value if step <= s.start_step else s.end_value)
    if step >= s.end_step:
        return float(s.end_value)
    frac = (step - s.start_step) / (s.end_step - s.start_step)
    return float(s.start_value + frac * (s.end_value - s.start_value))


def reference_view_loss(I, M, I0, M0, lambda_rgb: float, lambda_mask: float) -> torch.Tensor:
    """lambda_rgb * mean|I0 - I| + lambda_mask * mean (M0 - M)^2."""
    if I.shape != I0.shape:
        raise ValueError(f"image shapes differ: {tuple(I.shape)} vs {tuple(I0.shape)}")
    if M.shape != M0.shape:
        raise ValueError(f"mask shapes differ: {tuple(M.shape)} vs {tuple(M0.shape)}")
    return lambda_rgb * (I0 - I).abs().mean() + lambda_mask * ((M0 - M) ** 2).mean()


def shift_image(N: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Move an (H, W, C) map by one pixel with edge replication: out[i, j] = N[i - dy, j - dx]."""
    chw = N.permute(2, 0, 1)[None]
    padded = F.pad(chw, (1, 1, 1, 1), mode="replicate")
    h, w = N.shape[:2]
    out = padded[..., 1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
    return out[0].permute(1, 2, 0)


def normal_smoothness(N: torch.Tensor, rng: np.random.Generator | None = None, mask: torch.Tensor | None = None,
                      direction: tuple[int, int] | None = None) -> torch.Tensor:
    """Mean over pixels of |N - shift(N)|^2 for one random one-pixel shift.

    With ``mask`` only pixels where mask > 0.5 contribute (the denominator is
    still the full pixel count).  ``direction`` pins the shift for testing.
    """
    if direction is None:
        rng = rng if rng is not None else np.random.default_rng()
        direction = SHIFTS[int(rng.integers(len(SHIFTS)))]
    dy, dx = direction
    diff = ((N - shift_image(N, dy, dx)) ** 2).sum(-1)
    if mask is not None:
        diff = diff * (mask.detach() > 0.5).to(diff.dtype)
    return diff.mean()


def offset_penalty(offsets: torch.Tensor) -> torch.Tensor:
    """Sum of squared per-vertex offsets."""
    return (offsets**2).sum()
