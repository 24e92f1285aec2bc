"""Differentiable mesh refinement: vertex offsets, warped UVs and a trainable texture."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import CameraConfig, CameraPose, front_pose, sample_novel_pose
from .guidance.distill import _through_encoder, _weight, distill_loss, q_sample
from .guidance.schedule import NoiseBands, sample_noise_level
from .kernels import raster
from .meshing import TexturedMesh
from .objective import (
    WeightSchedule,
    normal_smoothness,
    offset_penalty,
    reference_view_loss,
    schedule_value,
)


@dataclass
class RasterOutput:
    rgb: torch.Tensor  # (H, W, 3) over white
    mask: torch.Tensor  # (H, W) in {0, 1}
    normal: torch.Tensor  # (H, W, 3), zero on background
    face_id: np.ndarray  # (H, W), -1 on background


def project_torch(pose: CameraPose, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable twin of :func:`distill3d.camera.project`."""
    K = pose.intrinsics
    right, up, forward = (torch.as_tensor(a, dtype=points.dtype) for a in pose.frame())
    rel = points - torch.as_tensor(pose.position, dtype=points.dtype)
    z = rel @ forward
    x = K.width / 2 + K.focal * (rel @ right) / z
    y = K.height / 2 - K.focal * (rel @ up) / z
    return torch.stack([x, y], -1), z


def face_normals(verts: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    v = verts[faces]
    n = torch.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], dim=-1)
    return n / n.norm(dim=-1, keepdim=True).clamp_min(1e-20)


def render_mesh(verts: torch.Tensor, faces: np.ndarray, uv: torch.Tensor, uv_faces: np.ndarray,
                texture: torch.Tensor, pose: CameraPose) -> RasterOutput:
    """Rasterize a textured mesh with visibility frozen from a z-buffer pass.

    Colour is a bilinear texture lookup at the perspective-correct
    barycentric UV of each pixel centre; texel (r, c) has its centre at
    ((c + 0.5) / K, (r + 0.5) / K) in (u, v).
    """
    K = pose.intrinsics
    H, W = K.height, K.width
    dtype = verts.dtype
    xy, z = project_torch(pose, verts)
    face_id, _ = raster.zbuffer(xy.detach().cpu().numpy(), z.detach().cpu().numpy(), faces, H, W)
    flat_id = face_id.reshape(-1)
    pix = torch.as_tensor(np.nonzero(flat_id >= 0)[0])
    fid = torch.as_tensor(flat_id[pix.numpy()])
    faces_t = torch.as_tensor(faces, dtype=torch.long)
    uv_faces_t = torch.as_tensor(uv_faces, dtype=torch.long)

    tri_xy = xy[faces_t[fid]]  # (n, 3, 2)
    tri_z = z[faces_t[fid]]
    px = (pix % W).to(dtype) + 0.5
    py = torch.div(pix, W, rounding_mode="floor").to(dtype) + 0.5
    x0, y0 = tri_xy[:, 0, 0], tri_xy[:, 0, 1]
    x1, y1 = tri_xy[:, 1, 0], tri_xy[:, 1, 1]
    x2, y2 = tri_xy[:, 2, 0], tri_xy[:, 2, 1]
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
    w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
    b = torch.stack([w0, w1, 1.0 - w0 - w1], -1)
    b = b / tri_z
    b = b / b.sum(-1, keepdim=True)

    uv_pix = (b[..., None] * uv[uv_faces_t[fid]]).sum(1)  # (n, 2)
    grid = (2.0 * uv_pix - 1.0).view(1, 1, -1, 2)
    tex = texture.permute(2, 0, 1)[None]
    color = F.grid_sample(tex, grid, mode="bilinear", padding_mode="border", align_corners=False)
    color = color[0, :, 0].T  # (n, 3)

    rgb = torch.ones(H * W, 3, dtype=dtype).index_copy(0, pix, color.to(dtype))
    normal = torch.zeros(H * W, 3, dtype=dtype).index_copy(0, pix, face_normals(verts, faces_t)[fid])
    mask = torch.as_tensor(face_id >= 0, dtype=dtype)
    return RasterOutput(rgb.view(H, W, 3), mask, normal.view(H, W, 3), face_id)


def render_textured_mesh(mesh: TexturedMesh, pose: CameraPose, dtype=torch.float32) -> RasterOutput:
    """Render an exported mesh (no trainable parts)."""
    return render_mesh(
        torch.as_tensor(mesh.vertices, dtype=dtype),
        mesh.faces,
        torch.as_tensor(mesh.uv, dtype=dtype),
        mesh.uv_faces,
        torch.as_tensor(mesh.texture, dtype=dtype),
        pose,
    )


class RefinableMesh(nn.Module):
    """Base mesh plus trainable vertex offsets, UV warp and texture.

    The UV warp is ``uv + uv_mlp(uv_latent)``; the MLP's last layer starts at
    zero so the initial render matches the base mesh exactly.  The latent
    codes start as small random values, otherwise the zero last layer would
    also zero their gradient.
    """

    def __init__(self, base: TexturedMesh, hidden: int = 32, latent_std: float = 1e-2, seed: int = 0,
                 dtype=torch.float32):
        super().__init__()
        if base.texture is None or len(base.uv_faces) != len(base.faces):
            raise ValueError("base mesh needs a texture and per-face UV indices")
        self.base = base
        self.dtype = dtype
        gen = torch.Generator().manual_seed(seed)
        self.register_buffer("base_vertices", torch.as_tensor(base.vertices, dtype=dtype))
        self.register_buffer("base_uv", torch.as_tensor(base.uv, dtype=dtype))
        self.offsets = nn.Parameter(torch.zeros(len(base.vertices), 3, dtype=dtype))
        latent = torch.randn(len(base.uv), 2, generator=gen, dtype=torch.float64) * latent_std
        self.uv_latent = nn.Parameter(latent.to(dtype))
        self.uv_mlp = nn.Sequential(
            nn.Linear(2, hidden, dtype=dtype), nn.ReLU(),
            nn.Linear(hidden, hidden, dtype=dtype), nn.ReLU(),
            nn.Linear(hidden, 2, dtype=dtype),
        )
        with torch.no_grad():
            for k, m in enumerate(self.uv_mlp):
                if isinstance(m, nn.Linear):
                    bound = 1.0 / math.sqrt(m.in_features)
                    m.weight.copy_(torch.rand(m.weight.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
                    m.bias.copy_(torch.rand(m.bias.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
            self.uv_mlp[-1].weight.zero_()
            self.uv_mlp[-1].bias.zero_()
        self.texture = nn.Parameter(torch.as_tensor(base.texture, dtype=dtype).clone())

    def vertices(self) -> torch.Tensor:
        return self.base_vertices + self.offsets

    def uv(self) -> torch.Tensor:
        return self.base_uv + self.uv_mlp(self.uv_latent)

    def export(self) -> TexturedMesh:
        """Current state as a plain mesh; UVs are clipped to the unit square and texels to [0, 1]."""
        with torch.no_grad():
            verts = self.base.vertices + self.offsets.double().numpy()
            uv = np.clip(self.base.uv + self.uv_mlp(self.uv_latent).double().numpy(), 0.0, 1.0)
            tex = self.texture.clamp(0, 1).numpy().astype(self.base.texture.dtype)
        return TexturedMesh(verts, self.base.faces.copy(), uv, self.base.uv_faces.copy(), tex,
                            None if self.base.vertex_colors is None else self.base.vertex_colors.copy())


def rasterize(mesh: RefinableMesh, pose: CameraPose) -> RasterOutput:
    return render_mesh(mesh.vertices(), mesh.base.faces, mesh.uv(), mesh.base.uv_faces, mesh.texture, pose)


def refine_gradient(lora, backend, I_3d, t, y, c: CameraPose, schedule, w=None, *, eps) -> torch.Tensor:
    """w_t (eps_hat_lora(x_t; t, y, c) - eps) as a gradient on the rendered image."""
    t = schedule.check_t(t)
    wt = _weight(schedule, t, w)

    def grad(z):
        with torch.no_grad():
            x_t = q_sample(z, t, eps, schedule)
            return wt * (lora.predict_epsilon_lora(x_t, t, y, c) - eps)

    return _through_encoder(backend, I_3d, grad)


@dataclass
class Stage3Losses:
    """Loss weights of the refinement stage.

    ``lambda_normal`` ramps over the stage; ``lambda_guidance`` scales the
    adapter-guided image gradient on novel views.
    """

    lambda_rgb: float = 1000.0
    lambda_mask: float = 500.0
    lambda_normal_start: float = 100.0
    lambda_normal_end: float = 10.0
    lambda_guidance: float = 1.0
    lambda_offset: float = 1.0
    reference_every: int = 2  # one reference step per this many steps

    def normal_schedule(self, steps: int) -> WeightSchedule:
        return WeightSchedule("lambda_normal", self.lambda_normal_start, self.lambda_normal_end, 0, max(steps, 1))


@dataclass
class Stage3Context:
    """Everything a refinement step reads besides the mesh and optimizer."""

    backend: object
    lora: object
    schedule: object
    ref_image: torch.Tensor  # (H, W, 3) at ``resolution``
    ref_mask: torch.Tensor  # (H, W)
    prompt: str
    camera: CameraConfig
    bands: NoiseBands
    losses: Stage3Losses
    total_steps: int
    rng: np.random.Generator
    active: frozenset = frozenset({"reference", "guidance", "normal", "offset"})


def is_reference_step(step: int, losses: Stage3Losses) -> bool:
    return losses.reference_every > 0 and step % losses.reference_every == 0


def stage3_step(mesh: RefinableMesh, optimizer: torch.optim.Optimizer, step: int, ctx: Stage3Context) -> dict:
    """One refinement step; returns scalar metrics.

    Reference steps fit the front view.  Novel steps apply the frozen
    adapter's gradient at a random pose plus normal smoothness.  The offset
    penalty is added on every step.
    """
    L = ctx.losses
    optimizer.zero_grad(set_to_none=True)
    loss = torch.zeros((), dtype=mesh.dtype)
    metrics = {"step": step}
    if is_reference_step(step, L) and "reference" in ctx.active:
        out = rasterize(mesh, front_pose(ctx.camera))
        ref = reference_view_loss(out.rgb, out.mask, ctx.ref_image.to(mesh.dtype), ctx.ref_mask.to(mesh.dtype),
                                  L.lambda_rgb, L.lambda_mask)
        loss = loss + ref
        metrics["kind"] = "reference"
        metrics["reference_loss"] = float(ref.detach())
    elif not is_reference_step(step, L) and ({"guidance", "normal"} & ctx.active):
        pose = sample_novel_pose(ctx.rng, ctx.camera)
        out = rasterize(mesh, pose)
        metrics["kind"] = "novel"
        if "guidance" in ctx.active:
            t = sample_noise_level(3, step, ctx.bands, ctx.rng, ctx.schedule.T)
            eps = torch.as_tensor(ctx.rng.standard_normal(tuple(out.rgb.shape)), dtype=mesh.dtype)
            g = refine_gradient(ctx.lora, ctx.backend, out.rgb, t, ctx.prompt, pose, ctx.schedule, eps=eps)
            loss = loss + L.lambda_guidance * distill_loss(out.rgb, g)
            metrics["t"] = t
            metrics["guidance_norm"] = float(g.norm())
        if "normal" in ctx.active:
            lam = schedule_value(L.normal_schedule(ctx.total_steps), step)
            sm = normal_smoothness(out.normal, ctx.rng, mask=out.mask)
            loss = loss + lam * sm
            metrics["lambda_normal"] = lam
            metrics["normal_loss"] = float(sm.detach())
    else:
        metrics["kind"] = "regularizer"
    if "offset" in ctx.active and L.lambda_offset > 0:
        pen = offset_penalty(mesh.offsets)
        loss = loss + L.lambda_offset * pen
        metrics["offset_penalty"] = float(pen.detach())
    if loss.requires_grad:
        loss.backward()
        optimizer.step()
    metrics["loss"] = float(loss.detach())
    if not math.isfinite(metrics["loss"]):
        raise FloatingPointError(f"non-finite stage-3 loss at step {step}")
    return metrics


def make_optimizer(mesh: RefinableMesh, lr: float = 1e-4, texture_lr: float | None = None) -> torch.optim.Optimizer:
    """Adam with the texture in its own group; ``texture_lr=None`` uses ``lr`` for every parameter."""
    geometry = [p for name, p in mesh.named_parameters() if name != "texture"]
    return torch.optim.Adam(
        [{"params": geometry, "lr": lr}, {"params": [mesh.texture], "lr": lr if texture_lr is None else texture_lr}]
    )
