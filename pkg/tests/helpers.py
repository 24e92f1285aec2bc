"""Tiny configurations shared by the pipeline, CLI and acceptance tests."""

from __future__ import annotations

TINY = {
    "field.levels": 4,
    "field.log2_table_size": 12,
    "field.samples_per_ray": 16,
    # dense enough at init that a tiny run still extracts a surface
    "field.blob_density": 20.0,
    "stage1.steps": 6,
    "stage1.resolution_schedule": [[0, 16], [4, 24]],
    "stage1.lr": 1e-2,
    "stage2.steps": 4,
    "stage2.novel_resolution": 16,
    "stage2.reference_resolution": 16,
    "stage2.lr": 1e-2,
    "refine.steps": 4,
    "refine.resolution": 32,
    "refine.extract_resolution": 20,
    "refine.texture_size": 256,
    "refine.snapshot_every": 2,
    "run.eval_resolution": 16,
    "guidance.lora_lr": 1e-3,
}


def tiny(backend: str = "toy_conv", **extra) -> dict:
    out = dict(TINY)
    out["guidance.backend"] = backend
    out.update(extra)
    return out


def set_args(overrides: dict) -> list[str]:
    args = []
    for k, v in overrides.items():
        args += ["--set", f"{k}={v}"]
    return args
