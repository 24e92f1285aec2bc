"""Three-stage orchestration: coarse field + adapter, joint refinement, mesh refinement.

Stage 1 alternates reference-view steps (photometric loss on the input) and
novel-view steps (text and view-conditioned distillation plus normal
smoothness) while an adapter learns from the input and the renders with
high noise levels.  Stage 2 replaces text distillation by the adapter-based
variant and lowers the adapter's noise band.  Stage 3 extracts a textured
mesh and refines it against the frozen adapter.

All mutable training state lives in :class:`PipelineState`, which
:func:`save_checkpoint` / :func:`load_checkpoint` round-trip exactly, so an
interrupted run resumes on the same trajectory.
"""

from __future__ import annotations

import importlib
import math
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .camera import CameraPose, front_pose, orbit_pose, pose_delta, sample_novel_pose
from .checkpoint import (
    CheckpointError,
    optimizer_from_arrays,
    optimizer_to_arrays,
    read_blob,
    unflatten_state_dict,
    write_blob,
)
from .config import Config, make_config
from .field import HashGridField, density_grid, render_pose
from .guidance import (
    DiffusionSchedule,
    LoraModule,
    OracleBackend,
    distill_loss,
    lora_loss,
    make_backend,
    resize_image,
    sample_noise_level,
    sds3d_gradient,
    sds_gradient,
    vsd_gradient,
)
from .mesh_refine import (
    RefinableMesh,
    Stage3Context,
    make_optimizer,
    rasterize,
    render_textured_mesh,
    stage3_step,
)
from .meshing import TexturedMesh, extract_textured_mesh
from .objective import normal_smoothness, reference_view_loss, schedule_value
from .scenes import oracle_scene

STATE_VERSION = 1


class StageOrderError(RuntimeError):
    """A stage was started without the output of the stage before it."""


@dataclass
class Backends:
    """Text-conditioned and view-conditioned noise predictors (may be the same object)."""

    text: object
    view: object

    @property
    def schedule(self) -> DiffusionSchedule:
        return self.text.schedule


def _load_factory(path: str):
    if ":" not in path:
        raise ValueError(f"guidance.external must look like 'package.module:factory', got {path!r}")
    mod, attr = path.split(":", 1)
    return getattr(importlib.import_module(mod), attr)


def build_backends(cfg: Config) -> Backends:
    g = cfg.guidance
    schedule = DiffusionSchedule.from_name(g.schedule, g.T)
    if g.backend == "oracle":
        ref = front_pose(cfg.camera.build())
        b = OracleBackend(oracle_scene(g.oracle_scene), schedule, ref)
        return Backends(b, b)
    if g.backend == "toy_conv":
        b = make_backend("toy_conv", schedule=schedule, seed=cfg.run.seed, guidance_scale=g.cfg_scale)
        return Backends(b, b)
    if g.backend == "external":
        if not g.external:
            raise ValueError("guidance.backend = 'external' needs guidance.external = 'module:factory'")
        made = _load_factory(g.external)(schedule=schedule, cfg=cfg)
        if isinstance(made, tuple):
            return Backends(*made)
        return Backends(made, made)
    b = make_backend(g.backend, schedule=schedule)
    return Backends(b, b)


@dataclass
class PipelineState:
    cfg: Config
    image: torch.Tensor  # (H, W, 3) input composited over white
    mask: torch.Tensor  # (H, W)
    prompt: str
    field: HashGridField
    lora: LoraModule | None
    rng: np.random.Generator
    field_opt: torch.optim.Optimizer | None = None
    lora_opt: torch.optim.Optimizer | None = None
    stage: int = 0  # last completed stage
    step: int = 0  # steps done inside the running stage
    history: list = dc_field(default_factory=list)
    metrics: dict = dc_field(default_factory=dict)
    timing: dict = dc_field(default_factory=dict)
    mesh: RefinableMesh | None = None
    mesh_opt: torch.optim.Optimizer | None = None
    lora_cold: bool = False

    @property
    def running_stage(self) -> int:
        return self.stage + 1


def init_state(image: torch.Tensor, mask: torch.Tensor, prompt: str, cfg: Config, backends: Backends) -> PipelineState:
    if image.ndim != 3 or image.shape[-1] != 3 or mask.shape != image.shape[:2]:
        raise ValueError("image must be (H, W, 3) with an (H, W) mask")
    if float(mask.max()) <= 0.0:
        raise ValueError("input mask is empty (fully transparent image)")
    seed = cfg.run.seed
    field = HashGridField(cfg.field.build(), seed=seed)
    lora = LoraModule(backends.text, rank=cfg.guidance.lora_rank, seed=seed + 1, radius_scale=cfg.camera.radius)
    state = PipelineState(cfg, image.float(), mask.float(), prompt, field, lora, np.random.default_rng(seed))
    _make_optimizers(state)
    return state


def _stage_lr(cfg: Config, stage: int) -> float:
    return {1: cfg.stage1.lr, 2: cfg.stage2.lr}[stage]


def _make_optimizers(state: PipelineState) -> None:
    stage = max(1, min(state.running_stage, 2))
    state.field_opt = torch.optim.Adam(state.field.parameters(), lr=_stage_lr(state.cfg, stage), eps=1e-15)
    state.lora_opt = torch.optim.Adam(state.lora.parameters(), lr=state.cfg.guidance.lora_lr)


def psnr(a, b, cap: float = 99.0) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give ``cap``."""
    a = torch.as_tensor(a).detach().to(torch.float64)
    b = torch.as_tensor(b).detach().to(torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def _reference(state: PipelineState, res: int) -> tuple[torch.Tensor, torch.Tensor]:
    img = resize_image(state.image, res, res)
    m = resize_image(state.mask[..., None], res, res)[..., 0]
    return img, m


def _pose(state: PipelineState, res: int) -> CameraPose:
    return front_pose(state.cfg.camera.build(res, res))


@torch.no_grad()
def front_psnr(state: PipelineState, res: int | None = None) -> float:
    res = res or state.cfg.run.eval_resolution
    out = render_pose(state.field, _pose(state, res), state.cfg.field.samples_per_ray, normals=False)
    return psnr(out.rgb, _reference(state, res)[0])


def heldout_poses(cfg: Config, res: int) -> list[CameraPose]:
    cam = cfg.camera.build(res, res)
    return [orbit_pose(cam, p, a) for p, a in cfg.run.heldout_poses]


@torch.no_grad()
def heldout_psnr(state: PipelineState, backends: Backends, res: int | None = None, renderer=None) -> float | None:
    """Mean PSNR against ground-truth views; only defined when the backend knows the scene."""
    if not hasattr(backends.text, "target"):
        return None
    res = res or state.cfg.run.eval_resolution
    vals = []
    for pose in heldout_poses(state.cfg, res):
        if renderer is None:
            img = render_pose(state.field, pose, state.cfg.field.samples_per_ray, normals=False).rgb
        else:
            img = renderer(pose)
        vals.append(psnr(img, backends.text.target(pose, res, res)))
    return float(np.mean(vals))


def _check_finite(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite {what} at step {step}")


def _lambda(cfg: Config, name: str, global_step: int) -> float:
    return schedule_value(cfg.loss.schedule(name, 0, cfg.ramp_steps()), global_step)


def _adapter_step(state: PipelineState, backends: Backends, stage: int, image: torch.Tensor,
                  pose: CameraPose) -> tuple[float, int]:
    rng = state.rng
    t_lora = sample_noise_level(stage, state.step, state.cfg.guidance.bands(), rng, backends.schedule.T)
    eps = torch.as_tensor(rng.standard_normal(tuple(backends.text.encode(image).shape)), dtype=image.dtype)
    state.lora_opt.zero_grad(set_to_none=True)
    loss = lora_loss(state.lora, image.detach(), t_lora, state.prompt, pose, eps, backends.schedule)
    loss.backward()
    state.lora_opt.step()
    return float(loss.detach()), t_lora


def _field_step(state: PipelineState, backends: Backends, stage: int) -> dict:
    """One stage-1 or stage-2 step."""
    cfg = state.cfg
    sc = cfg.stage1 if stage == 1 else cfg.stage2
    step = state.step
    gstep = step if stage == 1 else cfg.stage1.steps + step
    rng = state.rng
    schedule = backends.schedule
    reference = sc.reference_every > 0 and step % sc.reference_every == 0
    if stage == 1:
        res_novel = sc.resolution(step)
        res_ref = sc.reference_resolution or res_novel
    else:
        res_novel, res_ref = sc.novel_resolution, sc.reference_resolution
    rec = {"stage": stage, "step": step}
    state.field_opt.zero_grad(set_to_none=True)
    if reference:
        pose = _pose(state, res_ref)
        out = render_pose(state.field, pose, cfg.field.samples_per_ray, rng=rng, normals=False)
        I0, M0 = _reference(state, res_ref)
        loss = reference_view_loss(out.rgb, out.mask, I0, M0, _lambda(cfg, "lambda_rgb", gstep),
                                   _lambda(cfg, "lambda_mask", gstep))
        rec.update(kind="reference", resolution=res_ref, loss=float(loss.detach()))
        adapter_image, adapter_pose = (I0, pose) if cfg.guidance.lora_source != "render" else (out.rgb, pose)
    else:
        cam = cfg.camera.build(res_novel, res_novel)
        pose = sample_novel_pose(rng, cam)
        out = render_pose(state.field, pose, cfg.field.samples_per_ray, rng=rng, normals=True)
        x0 = out.rgb
        t = sample_noise_level(stage, step, cfg.guidance.bands(), rng, schedule.T)
        eps = torch.as_tensor(rng.standard_normal(tuple(backends.text.encode(x0.detach()).shape)), dtype=x0.dtype)
        I0_ref = _reference(state, res_novel)[0]
        delta = pose_delta(pose, _pose(state, res_novel))
        w = cfg.guidance.w_schedule
        g3d = sds3d_gradient(backends.view, x0, t, I0_ref, delta, schedule, w, eps=eps)
        lam_3d = _lambda(cfg, "lambda_3d", gstep)
        if stage == 1:
            g2d = sds_gradient(backends.text, x0, t, state.prompt, schedule, w, eps=eps, pose=pose)
            lam_2d = _lambda(cfg, "lambda_sds", gstep)
        else:
            g2d = vsd_gradient(backends.text, state.lora, x0, t, state.prompt, pose, schedule, w, eps=eps)
            lam_2d = _lambda(cfg, "lambda_vsd", gstep)
        lam_n = _lambda(cfg, "lambda_normal", gstep)
        n_loss = normal_smoothness(out.normal, rng, mask=out.mask)
        loss = lam_2d * distill_loss(x0, g2d) + lam_3d * distill_loss(x0, g3d) + lam_n * n_loss
        rec.update(kind="novel", resolution=res_novel, t=t, loss=float(loss.detach()), normal_loss=float(n_loss.detach()),
                   grad_2d=float(g2d.norm()), grad_3d=float(g3d.norm()))
        adapter_image, adapter_pose = (
            (I0_ref, _pose(state, res_novel)) if cfg.guidance.lora_source == "input" else (x0, pose)
        )
    _check_finite(rec["loss"], f"stage-{stage} loss", step)
    loss.backward()
    state.field_opt.step()
    if state.lora is not None and state.lora_opt is not None:
        lval, t_lora = _adapter_step(state, backends, stage, adapter_image, adapter_pose)
        _check_finite(lval, "adapter loss", step)
        rec.update(lora_loss=lval, t_lora=t_lora)
    return rec


def _finish_field_stage(state: PipelineState, backends: Backends, stage: int) -> None:
    prefix = f"stage{stage}"
    recs = [r for r in state.history if r["stage"] == stage]
    m = state.metrics
    m[f"{prefix}.steps"] = len(recs)
    for kind in ("reference", "novel"):
        last = [r for r in recs if r["kind"] == kind]
        if last:
            m[f"{prefix}.final_{kind}_loss"] = last[-1]["loss"]
    lora = [r["lora_loss"] for r in recs if "lora_loss" in r]
    if lora:
        m[f"{prefix}.final_lora_loss"] = lora[-1]
    m[f"{prefix}.front_psnr"] = front_psnr(state)
    h = heldout_psnr(state, backends)
    if h is not None:
        m[f"{prefix}.heldout_psnr"] = h
    if state.lora is not None:
        m[f"{prefix}.lora_digest"] = state.lora.parameter_digest()[:16]
    state.stage = stage
    state.step = 0


def _run_field_stage(state: PipelineState, backends: Backends, stage: int, until: int | None, callback) -> PipelineState:
    steps = (state.cfg.stage1 if stage == 1 else state.cfg.stage2).steps
    stop = steps if until is None else min(until, steps)
    t0 = time.perf_counter()
    while state.step < stop:
        rec = _field_step(state, backends, stage)
        state.history.append(rec)
        state.step += 1
        if callback is not None:
            callback(state, rec)
    key = f"stage{stage}.seconds"
    state.timing[key] = state.timing.get(key, 0.0) + time.perf_counter() - t0
    if state.step >= steps:
        _finish_field_stage(state, backends, stage)
    return state


def run_stage1(state: PipelineState, backends: Backends, until: int | None = None, callback=None) -> PipelineState:
    """Coarse field + adapter.  ``until`` stops early (resumable) after that many steps."""
    if state.stage >= 1:
        raise StageOrderError("stage 1 already completed for this state")
    return _run_field_stage(state, backends, 1, until, callback)


def run_stage2(state: PipelineState, backends: Backends, until: int | None = None, callback=None) -> PipelineState:
    """Joint refinement with the adapter handed over from stage 1."""
    cfg = state.cfg
    if state.stage >= 2:
        raise StageOrderError("stage 2 already completed for this state")
    if state.stage < 1 and not cfg.stage2.allow_cold_lora:
        raise StageOrderError("stage 2 needs a stage-1 checkpoint (or stage2.allow_cold_lora = true)")
    if state.stage < 1:
        # ablation: stage 2 straight from an untrained field
        state.stage, state.step = 1, 0
    if cfg.stage2.allow_cold_lora and not state.lora_cold:
        state.lora = LoraModule(backends.text, rank=cfg.guidance.lora_rank, seed=cfg.run.seed + 2,
                                radius_scale=cfg.camera.radius)
        state.lora_cold = True
    if state.step == 0:
        _make_optimizers(state)
    return _run_field_stage(state, backends, 2, until, callback)


def _stage3_context(state: PipelineState, backends: Backends) -> Stage3Context:
    cfg = state.cfg
    res = cfg.refine.resolution
    I0, M0 = _reference(state, res)
    return Stage3Context(
        backend=backends.text,
        lora=state.lora,
        schedule=backends.schedule,
        ref_image=I0,
        ref_mask=M0,
        prompt=state.prompt,
        camera=cfg.camera.build(res, res),
        bands=cfg.guidance.bands(),
        losses=cfg.stage3_losses(),
        total_steps=cfg.refine.steps,
        rng=state.rng,
    )


def extract_mesh(state: PipelineState) -> TexturedMesh:
    cfg = state.cfg
    grid = density_grid(state.field, cfg.refine.extract_resolution)
    return extract_textured_mesh(state.field, grid, cfg.refine.threshold, state.field.bounds,
                                 texture_size=cfg.refine.texture_size)


def run_stage3(state: PipelineState, backends: Backends, until: int | None = None, callback=None,
               snapshot_dir=None) -> TexturedMesh:
    """Extract, bake and refine the mesh; returns the refined mesh."""
    cfg = state.cfg
    if state.stage < 2:
        raise StageOrderError("stage 3 needs a stage-2 checkpoint")
    if state.stage >= 3:
        return state.mesh.export()
    t0 = time.perf_counter()
    if state.mesh is None:
        base = extract_mesh(state)
        state.mesh = RefinableMesh(base, seed=cfg.run.seed)
        state.mesh_opt = make_optimizer(state.mesh, cfg.refine.lr, cfg.refine.texture_lr)
        res = cfg.refine.resolution
        state.metrics["stage3.baked_front_psnr"] = psnr(
            render_textured_mesh(base, _pose(state, res)).rgb, _reference(state, res)[0]
        )
    if state.lora is not None:
        state.lora.requires_grad_(False)
    ctx = _stage3_context(state, backends)
    stop = cfg.refine.steps if until is None else min(until, cfg.refine.steps)
    while state.step < stop:
        rec = stage3_step(state.mesh, state.mesh_opt, state.step, ctx)
        rec["stage"] = 3
        state.history.append(rec)
        state.step += 1
        if callback is not None:
            callback(state, rec)
        if snapshot_dir is not None and cfg.refine.snapshot_every > 0 and state.step % cfg.refine.snapshot_every == 0:
            from .io import save_image

            with torch.no_grad():
                img = rasterize(state.mesh, _pose(state, cfg.refine.resolution)).rgb
            save_image(Path(snapshot_dir) / f"stage3_step{state.step:05d}.png", img)
    state.timing["stage3.seconds"] = state.timing.get("stage3.seconds", 0.0) + time.perf_counter() - t0
    if state.step >= cfg.refine.steps:
        _finish_stage3(state, backends)
    return state.mesh.export()


def _finish_stage3(state: PipelineState, backends: Backends) -> None:
    cfg = state.cfg
    mesh = state.mesh.export()
    res = cfg.refine.resolution
    m = state.metrics
    recs = [r for r in state.history if r["stage"] == 3]
    m["stage3.steps"] = len(recs)
    ref = [r for r in recs if r["kind"] == "reference"]
    if ref:
        m["stage3.final_reference_loss"] = ref[-1]["reference_loss"]
    m["stage3.front_psnr"] = psnr(render_textured_mesh(mesh, _pose(state, res)).rgb, _reference(state, res)[0])
    h = heldout_psnr(state, backends, res, renderer=lambda p: render_textured_mesh(mesh, p).rgb)
    if h is not None:
        m["stage3.heldout_psnr"] = h
    m["mesh.vertices"] = int(len(mesh.vertices))
    m["mesh.faces"] = int(len(mesh.faces))
    m["mesh.max_offset"] = float(state.mesh.offsets.detach().norm(dim=1).max()) if len(mesh.vertices) else 0.0
    state.stage = 3
    state.step = 0


def run_all(state: PipelineState, backends: Backends, snapshot_dir=None, callback=None) -> TexturedMesh:
    if state.stage < 1:
        run_stage1(state, backends, callback=callback)
    if state.stage < 2:
        run_stage2(state, backends, callback=callback)
    return run_stage3(state, backends, callback=callback, snapshot_dir=snapshot_dir)


def loss_trace(state: PipelineState) -> list[tuple]:
    return [(r["stage"], r["step"], r["loss"], r.get("lora_loss")) for r in state.history]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(state: PipelineState, path) -> None:
    arrays = {"input/image": state.image, "input/mask": state.mask}
    arrays.update({f"field/{k}": v for k, v in state.field.state_dict().items()})
    meta = {
        "kind": "pipeline_state",
        "state_version": STATE_VERSION,
        "package_version": __version__,
        "config": state.cfg.to_dict(),
        "prompt": state.prompt,
        "stage": state.stage,
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "history": state.history,
        "metrics": state.metrics,
        "timing": state.timing,
        "lora_cold": state.lora_cold,
        "has_lora": state.lora is not None,
        "has_mesh": state.mesh is not None,
        "field_resolutions": state.field.resolutions,
        "field_bounds": list(state.field.bounds),
    }
    a, meta["field_opt"] = optimizer_to_arrays("field_opt", state.field_opt)
    arrays.update(a)
    if state.lora is not None:
        arrays.update({f"lora/{k}": v for k, v in state.lora.state_dict().items()})
        a, meta["lora_opt"] = optimizer_to_arrays("lora_opt", state.lora_opt)
        arrays.update(a)
    if state.mesh is not None:
        base = state.mesh.base
        arrays.update({
            "mesh_base/vertices": base.vertices, "mesh_base/faces": base.faces, "mesh_base/uv": base.uv,
            "mesh_base/uv_faces": base.uv_faces, "mesh_base/texture": base.texture,
        })
        if base.vertex_colors is not None:
            arrays["mesh_base/vertex_colors"] = base.vertex_colors
        arrays.update({f"mesh/{k}": v for k, v in state.mesh.state_dict().items()})
        a, meta["mesh_opt"] = optimizer_to_arrays("mesh_opt", state.mesh_opt)
        arrays.update(a)
    write_blob(path, arrays, meta)


def load_checkpoint(path, backends: Backends | None = None) -> tuple[PipelineState, Backends]:
    arrays, meta = read_blob(path)
    if meta.get("kind") != "pipeline_state":
        raise CheckpointError(f"{path}: not a pipeline checkpoint")
    if meta.get("state_version") != STATE_VERSION:
        raise CheckpointError(
            f"{path}: pipeline state version {meta.get('state_version')} != supported {STATE_VERSION}"
        )
    cfg = make_config(meta["config"]["run"]["profile"],
                      overrides={f"{s}.{k}": v for s, sec in meta["config"].items() for k, v in sec.items()})
    backends = backends or build_backends(cfg)
    field = HashGridField(cfg.field.build(), seed=cfg.run.seed)
    field.load_state_dict(unflatten_state_dict("field", arrays))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = PipelineState(
        cfg,
        torch.from_numpy(arrays["input/image"]),
        torch.from_numpy(arrays["input/mask"]),
        meta["prompt"],
        field,
        None,
        rng,
        stage=meta["stage"],
        step=meta["step"],
        history=meta["history"],
        metrics=meta["metrics"],
        timing=meta["timing"],
        lora_cold=meta["lora_cold"],
    )
    state.field_opt = torch.optim.Adam(field.parameters(), lr=1.0, eps=1e-15)
    optimizer_from_arrays("field_opt", state.field_opt, arrays, meta["field_opt"])
    if meta["has_lora"]:
        state.lora = LoraModule(backends.text, rank=cfg.guidance.lora_rank, radius_scale=cfg.camera.radius)
        state.lora.load_state_dict(unflatten_state_dict("lora", arrays))
        state.lora_opt = torch.optim.Adam(state.lora.parameters(), lr=1.0)
        optimizer_from_arrays("lora_opt", state.lora_opt, arrays, meta["lora_opt"])
    if meta["has_mesh"]:
        base = TexturedMesh(
            arrays["mesh_base/vertices"], arrays["mesh_base/faces"], arrays["mesh_base/uv"],
            arrays["mesh_base/uv_faces"], arrays["mesh_base/texture"], arrays.get("mesh_base/vertex_colors"),
        )
        state.mesh = RefinableMesh(base, seed=cfg.run.seed)
        state.mesh.load_state_dict(unflatten_state_dict("mesh", arrays))
        state.mesh_opt = make_optimizer(state.mesh, cfg.refine.lr, cfg.refine.texture_lr)
        optimizer_from_arrays("mesh_opt", state.mesh_opt, arrays, meta["mesh_opt"])
    return state, backends
