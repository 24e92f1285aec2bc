"""Object-level low-rank adapter over a frozen noise predictor."""

from __future__ import annotations

import hashlib
import math

import torch
import torch.nn as nn

from ..camera import CameraPose, camera_embedding


class LoraModule(nn.Module):
    """Rank-``r`` updates ``B @ A`` for every dense layer the backend exposes,
    plus a projection of the 5-scalar camera embedding used as class
    conditioning.

    ``B`` and the class projection start at zero, so a fresh adapter predicts
    exactly what the base backend predicts.
    """

    def __init__(self, backend, rank: int = 4, seed: int = 0, radius_scale: float | None = None,
                 dtype=torch.float32):
        super().__init__()
        self.backend = backend
        self.rank = rank
        self.radius_scale = radius_scale
        gen = torch.Generator().manual_seed(seed)
        self.A = nn.ParameterDict()
        self.B = nn.ParameterDict()
        for name, (fan_in, fan_out) in backend.dense_layers().items():
            key = name.replace(".", "_")
            a = torch.randn(rank, fan_in, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)
            self.A[key] = nn.Parameter(a.to(dtype))
            self.B[key] = nn.Parameter(torch.zeros(fan_out, rank, dtype=dtype))
        dim = max(int(getattr(backend, "embedding_dim", 0)), 1)
        self.class_proj = nn.Linear(5, dim).to(dtype)
        nn.init.zeros_(self.class_proj.weight)
        nn.init.zeros_(self.class_proj.bias)

    def delta(self, name: str, h: torch.Tensor) -> torch.Tensor:
        key = name.replace(".", "_")
        a, b = self.A[key], self.B[key]
        return (h @ a.to(h.dtype).T) @ b.to(h.dtype).T

    def class_embedding(self, pose: CameraPose, dtype=torch.float32) -> torch.Tensor:
        c = torch.as_tensor(camera_embedding(pose, self.radius_scale), dtype=dtype)
        w = self.class_proj.weight.to(dtype)
        return w @ c + self.class_proj.bias.to(dtype)

    def predict_epsilon_lora(self, x_t, t, y, c: CameraPose) -> torch.Tensor:
        return self.backend.predict_epsilon_text(x_t, t, y, pose=c, lora=self)

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()
