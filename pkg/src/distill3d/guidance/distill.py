"""Forward noising, score-distillation gradients, adapter loss and preview sampling.

The distillation functions return the gradient with respect to the rendered
image ``x0``; callers push it through their renderer with
:func:`distill_loss`, whose autograd gradient w.r.t. ``x0`` is exactly that
image gradient.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from ..camera import CameraPose, PoseDelta
from .schedule import DiffusionSchedule, timestep_weight


def q_sample(x0: torch.Tensor, t: int, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x0.shape)}")
    ab = schedule.at(schedule.check_t(t))
    return math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps


def _weight(schedule, t, w):
    if w is None:
        return timestep_weight(schedule, t)
    if isinstance(w, str):
        return timestep_weight(schedule, t, w)
    return float(w)


def _through_encoder(backend, x0, fn):
    """Evaluate ``fn(latent)`` -> latent-space gradient, mapped back to image space."""
    probe = x0.detach().requires_grad_(True)
    with torch.enable_grad():
        z = backend.encode(probe)
    g_z = fn(z.detach())
    if z is probe:
        return g_z
    return torch.autograd.grad(z, probe, g_z)[0]


def sds_gradient(backend, x0, t, y, schedule, w=None, *, eps, pose: CameraPose | None = None):
    """w_t (eps_hat_text(x_t; t, y) - eps) as a gradient on ``x0``."""
    t = schedule.check_t(t)
    wt = _weight(schedule, t, w)

    def grad(z):
        with torch.no_grad():
            x_t = q_sample(z, t, eps, schedule)
            return wt * (backend.predict_epsilon_text(x_t, t, y, pose=pose) - eps)

    return _through_encoder(backend, x0, grad)


def sds3d_gradient(backend, x0, t, x0_ref, delta: PoseDelta, schedule, w=None, *, eps):
    """View-conditioned variant: the prediction sees a reference image and a pose delta."""
    t = schedule.check_t(t)
    wt = _weight(schedule, t, w)

    def grad(z):
        with torch.no_grad():
            x_t = q_sample(z, t, eps, schedule)
            ref = backend.encode(x0_ref)
            return wt * (backend.predict_epsilon_view(x_t, t, ref, delta) - eps)

    return _through_encoder(backend, x0, grad)


def vsd_gradient(backend, lora, x0, t, y, c: CameraPose, schedule, w=None, *, eps):
    """w_t (eps_hat_base(x_t; t, y) - eps_hat_lora(x_t; t, y, c)) as a gradient on ``x0``.

    The base prediction also receives the pose; pose-free backends ignore it.
    """
    t = schedule.check_t(t)
    wt = _weight(schedule, t, w)

    def grad(z):
        with torch.no_grad():
            x_t = q_sample(z, t, eps, schedule)
            base = backend.predict_epsilon_text(x_t, t, y, pose=c)
            return wt * (base - lora.predict_epsilon_lora(x_t, t, y, c))

    return _through_encoder(backend, x0, grad)


def distill_loss(x: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """Surrogate scalar whose gradient w.r.t. ``x`` equals ``grad``."""
    return (grad.detach() * x).sum()


def lora_loss(lora, x0, t_lora, y, c, eps, schedule) -> torch.Tensor:
    """|| eps_hat_lora(x_t; t_lora, y, c) - eps ||_2 with ``x0`` held constant."""
    backend = lora.backend
    with torch.no_grad():
        z = backend.encode(x0.detach())
        x_t = q_sample(z, t_lora, eps, schedule)
    return (lora.predict_epsilon_lora(x_t, t_lora, y, c) - eps).flatten().norm()


@torch.no_grad()
def lora_preview(backend, lora, base_image, y, c, strength: float, steps: int,
                 rng: np.random.Generator | None = None, eps: torch.Tensor | None = None) -> torch.Tensor:
    """Image-to-image sampling with the adapter.

    Noise ``base_image`` to t = strength * T, then run ``steps`` deterministic
    DDIM updates down to t = 0 using the adapter's noise prediction.  A
    strength that rounds to timestep 0 returns the base image untouched.
    """
    if not 0.0 < strength <= 1.0:
        raise ValueError("strength must be in (0, 1]")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    schedule = backend.schedule
    t_start = min(schedule.T, int(round(strength * schedule.T)))
    if t_start < 1:
        return base_image.clone()
    z0 = backend.encode(base_image)
    if eps is None:
        rng = rng or np.random.default_rng(0)
        eps = torch.as_tensor(rng.standard_normal(tuple(z0.shape)), dtype=z0.dtype)
    x = q_sample(z0, t_start, eps, schedule)
    ts = np.unique(np.linspace(t_start, 0, steps + 1).round().astype(int))[::-1]
    x0_hat = z0
    for t_cur, t_next in zip(ts[:-1], ts[1:]):
        ab, ab_next = schedule.at(t_cur), schedule.at(t_next)
        e = lora.predict_epsilon_lora(x, int(t_cur), y, c)
        x0_hat = (x - math.sqrt(1 - ab) * e) / math.sqrt(ab)
        x = math.sqrt(ab_next) * x0_hat + math.sqrt(1 - ab_next) * e
    return backend.decode(x0_hat).clamp(0, 1)
