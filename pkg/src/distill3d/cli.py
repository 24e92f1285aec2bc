"""``distill3d`` command line: stage1 | stage2 | stage3 | run-all | preview | metrics."""

from __future__ import annotations

import argparse
import json
import sys
import time
from datetime import datetime
from pathlib import Path

import torch

from . import io
from .camera import orbit_pose
from .checkpoint import CheckpointError
from .config import PROFILES, make_config, parse_assignment, profile_from_env, write_config
from .pipeline import (
    StageOrderError,
    build_backends,
    init_state,
    load_checkpoint,
    psnr,
    run_stage1,
    run_stage2,
    run_stage3,
    save_checkpoint,
)

COMMANDS = ("stage1", "stage2", "stage3", "run-all", "preview", "metrics")
_EXPECTED = (ValueError, KeyError, FileNotFoundError, StageOrderError, CheckpointError, FloatingPointError, TypeError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distill3d", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--image", help="RGBA PNG (or RGB with --mask / <stem>_mask.png); default: bundled oracle scene")
        s.add_argument("--mask", help="mask PNG for inputs without alpha")
        s.add_argument("--prompt", help="text prompt describing the object")
        s.add_argument("--config", help="TOML config file")
        s.add_argument("--out", help="output directory (default: runs/<timestamp>)")
        s.add_argument("--seed", type=int)
        s.add_argument("--profile", choices=PROFILES, help="defaults profile (env DISTILL3D_PROFILE)")
        s.add_argument("--resume", help="checkpoint to continue from")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--checkpoint-every", type=int, default=0, help="also save latest.ckpt every N steps")
        s.add_argument("--quiet", action="store_true")
        if name == "run-all":
            s.add_argument("--turntable", type=int, default=8, help="turntable views of the final mesh (0: none)")
        if name == "preview":
            s.add_argument("--polar", type=float, default=90.0)
            s.add_argument("--azimuth", type=float, default=0.0)
            s.add_argument("--strength", type=float, default=0.5)
            s.add_argument("--steps", type=int, default=20)
            s.add_argument("--resolution", type=int, default=64)
        if name == "metrics":
            s.add_argument("--mesh", help="OBJ to evaluate at the front pose")
    return p


def _out_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        base = Path("runs") / datetime.now().strftime("%Y%m%d-%H%M%S")
        out, k = base, 1
        while out.exists():
            out, k = Path(f"{base}-{k}"), k + 1
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args):
    overrides = dict(parse_assignment(s) for s in args.set)
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    return make_config(profile_from_env(args.profile), args.config, overrides)


def _input(args):
    if args.image:
        if not args.prompt:
            raise ValueError("--prompt is required with --image")
        image, mask = io.load_input(args.image, args.mask)
        return image, mask, args.prompt
    image, mask = io.load_input(io.bundled_input_path())
    return image, mask, args.prompt or io.BUNDLED_PROMPT


def _log(args):
    if args.quiet:
        return None
    t0 = time.perf_counter()

    def cb(state, rec):
        if rec["step"] % max(state.cfg.run.log_every, 1) == 0:
            print(f"stage {rec['stage']} step {rec['step']:5d} {rec['kind']:<9} loss {rec['loss']:.5g} "
                  f"[{time.perf_counter() - t0:.0f}s]", flush=True)

    return cb


def _callback(args, out: Path):
    log = _log(args)

    def cb(state, rec):
        if log is not None:
            log(state, rec)
        if args.checkpoint_every and state.step % args.checkpoint_every == 0:
            save_checkpoint(state, out / "latest.ckpt")

    return cb


def _state(args, need_stage: int | None):
    """Resume from --resume / the stage checkpoint in --out, or start fresh."""
    ckpt = Path(args.resume) if args.resume else None
    if ckpt is None and need_stage and args.out:
        cand = Path(args.out) / f"stage{need_stage}.ckpt"
        ckpt = cand if cand.exists() else None
    if ckpt is None:
        if need_stage:
            raise StageOrderError(f"this command needs a stage-{need_stage} checkpoint; pass --resume <path>")
        cfg = _config(args)
        backends = build_backends(cfg)
        image, mask, prompt = _input(args)
        return init_state(image, mask, prompt, cfg, backends), backends
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    state, backends = load_checkpoint(ckpt)
    if args.set:
        raise ValueError("--set cannot change the configuration of a resumed run")
    if need_stage and state.stage < need_stage:
        raise StageOrderError(f"{ckpt} holds a stage-{state.stage} state; stage-{need_stage} output is required")
    return state, backends


def _write_outputs(state, backends, out: Path, mesh=None, turntable_views: int = 0) -> None:
    metrics = dict(state.metrics)
    metrics["run.seed"] = state.cfg.run.seed
    metrics["run.profile"] = state.cfg.run.profile
    metrics["run.backend"] = state.cfg.guidance.backend
    metrics["run.completed_stage"] = state.stage
    io.write_metrics(out / "metrics.json", metrics)
    (out / "timing.json").write_text(json.dumps(state.timing, sort_keys=True, indent=1) + "\n")
    write_config(state.cfg, out / "config.toml")
    res = state.cfg.run.eval_resolution
    cam = state.cfg.camera.build(res, res)
    io.turntable(state.field, 1, out, cam, samples_per_ray=state.cfg.field.samples_per_ray, prefix="field_front")
    if mesh is not None:
        from .meshing import write_obj

        write_obj(mesh, out / "mesh.obj")
        if turntable_views:
            r = state.cfg.refine.resolution
            io.turntable(mesh, turntable_views, out / "turntable", state.cfg.camera.build(r, r))


def cmd_stage(args, stage: int) -> int:
    out = _out_dir(args)
    state, backends = _state(args, stage - 1 if stage > 1 else None)
    if stage == 1 and state.stage >= 1:
        raise StageOrderError("checkpoint already holds a completed stage 1")
    cb = _callback(args, out)
    mesh = None
    if stage == 1:
        run_stage1(state, backends, callback=cb)
    elif stage == 2:
        run_stage2(state, backends, callback=cb)
    else:
        mesh = run_stage3(state, backends, callback=cb, snapshot_dir=out / "snapshots")
    save_checkpoint(state, out / f"stage{stage}.ckpt")
    _write_outputs(state, backends, out, mesh)
    print(f"stage {stage} done -> {out}")
    return 0


def cmd_run_all(args) -> int:
    out = _out_dir(args)
    state, backends = _state(args, None)
    cb = _callback(args, out)
    if state.stage < 1:
        run_stage1(state, backends, callback=cb)
        save_checkpoint(state, out / "stage1.ckpt")
    if state.stage < 2:
        run_stage2(state, backends, callback=cb)
        save_checkpoint(state, out / "stage2.ckpt")
    mesh = run_stage3(state, backends, callback=cb, snapshot_dir=out / "snapshots")
    save_checkpoint(state, out / "stage3.ckpt")
    _write_outputs(state, backends, out, mesh, args.turntable)
    m = state.metrics
    print(f"done -> {out}  front PSNR: field {m.get('stage2.front_psnr', float('nan')):.2f} dB, "
          f"mesh {m.get('stage3.front_psnr', float('nan')):.2f} dB")
    return 0


@torch.no_grad()
def cmd_preview(args) -> int:
    from .field import render_pose
    from .guidance import lora_preview

    if not args.resume:
        raise ValueError("preview needs --resume <checkpoint>")
    state, backends = _state(args, None)
    if state.lora is None:
        raise ValueError("checkpoint holds no adapter")
    out = _out_dir(args)
    cam = state.cfg.camera.build(args.resolution, args.resolution)
    pose = orbit_pose(cam, args.polar, args.azimuth)
    base = render_pose(state.field, pose, state.cfg.field.samples_per_ray, normals=False).rgb
    img = lora_preview(backends.text, state.lora, base, state.prompt, pose, args.strength, args.steps)
    tag = f"p{args.polar:g}_a{args.azimuth:g}_s{args.strength:g}"
    io.save_image(out / f"preview_base_{tag}.png", base)
    path = io.save_image(out / f"preview_{tag}.png", img)
    print(path)
    return 0


@torch.no_grad()
def cmd_metrics(args) -> int:
    from .camera import front_pose
    from .guidance import resize_image
    from .mesh_refine import render_textured_mesh
    from .meshing import read_obj

    if not args.mesh:
        raise ValueError("metrics needs --mesh <file.obj>")
    cfg = _config(args)
    image, mask, _ = _input(args)
    mesh = read_obj(args.mesh)
    res = cfg.refine.resolution
    rgb = render_textured_mesh(mesh, front_pose(cfg.camera.build(res, res))).rgb
    metrics = {
        "mesh.front_psnr": psnr(rgb, resize_image(image, res, res)),
        "mesh.vertices": int(len(mesh.vertices)),
        "mesh.faces": int(len(mesh.faces)),
    }
    if args.out:
        io.write_metrics(Path(args.out) / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cli_run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("stage1", "stage2", "stage3"):
            return cmd_stage(args, int(args.command[-1]))
        if args.command == "run-all":
            return cmd_run_all(args)
        if args.command == "preview":
            return cmd_preview(args)
        return cmd_metrics(args)
    except _EXPECTED as exc:
        text = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        msg = text.splitlines()[0] if text else type(exc).__name__
        print(f"distill3d {args.command}: error: {msg}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_run())


if __name__ == "__main__":
    main()
