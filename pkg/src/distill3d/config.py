"""Run configuration: typed sections, desk/paper profiles, TOML files and dotted overrides.

Every setting has a dotted key ``section.name``.  A config file is TOML with
one table per section::

    [stage1]
    steps = 300

    [loss]
    lambda_rgb = [100.0, 1000.0]

and ``--set stage1.steps=300`` overrides a single key from the command line.
"""

from __future__ import annotations

import ast
import dataclasses
import os
from dataclasses import dataclass, field as dc_field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .camera import CameraConfig
from .field import FieldConfig
from .guidance.schedule import NoiseBand, NoiseBands
from .mesh_refine import Stage3Losses
from .objective import WeightSchedule

PROFILES = ("desk", "paper")
PROFILE_ENV = "DISTILL3D_PROFILE"


@dataclass
class CameraSection:
    radius: float = 2.0
    fov_deg: float = 49.1
    polar_min: float = 60.0
    polar_max: float = 150.0
    width: int = 64
    height: int = 64

    def build(self, width: int | None = None, height: int | None = None) -> CameraConfig:
        return CameraConfig(self.radius, self.fov_deg, self.polar_min, self.polar_max,
                            width or self.width, height or width or self.height)


@dataclass
class FieldSection:
    levels: int = 8
    base_resolution: int = 16
    per_level_scale: float = 1.5
    log2_table_size: int = 15
    feature_dim: int = 2
    hidden: int = 32
    geo_features: int = 15
    bound: float = 1.0
    blob_density: float = 5.0
    blob_std: float = 0.5
    samples_per_ray: int = 64

    def build(self) -> FieldConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(FieldConfig)}
        return FieldConfig(**kw)


@dataclass
class GuidanceSection:
    backend: str = "oracle"
    # "module.path:factory" called as factory(schedule=..., cfg=...) when backend = "external"
    external: str = ""
    oracle_scene: str = "blob_pair"
    schedule: str = "linear"
    T: int = 1000
    t_band_stage1: list = dc_field(default_factory=lambda: [0.5, 0.98])
    t_band_stage23: list = dc_field(default_factory=lambda: [0.02, 0.45])
    w_schedule: str = "one_minus_alpha_bar"
    cfg_scale: float = 1.0
    lora_rank: int = 4
    lora_lr: float = 1e-4
    # adapter examples: "both" alternates input image and render, or "render" / "input"
    lora_source: str = "both"

    def bands(self) -> NoiseBands:
        return NoiseBands(NoiseBand(*map(float, self.t_band_stage1)), NoiseBand(*map(float, self.t_band_stage23)))


@dataclass
class LossSection:
    """[start, end] pairs; lambda_rgb/mask/normal ramp over stages 1 and 2 together."""

    lambda_rgb: list = dc_field(default_factory=lambda: [100.0, 1000.0])
    lambda_mask: list = dc_field(default_factory=lambda: [50.0, 500.0])
    lambda_normal: list = dc_field(default_factory=lambda: [0.0, 100.0])
    lambda_normal_refine: list = dc_field(default_factory=lambda: [100.0, 10.0])
    lambda_sds: list = dc_field(default_factory=lambda: [0.2, 0.2])
    lambda_3d: list = dc_field(default_factory=lambda: [1.0, 1.0])
    lambda_vsd: list = dc_field(default_factory=lambda: [1.0, 1.0])
    lambda_offset: list = dc_field(default_factory=lambda: [1.0, 1.0])
    lambda_refine_guidance: list = dc_field(default_factory=lambda: [1.0, 1.0])

    def schedule(self, name: str, start_step: int, end_step: int) -> WeightSchedule:
        a, b = getattr(self, name)
        return WeightSchedule(name, float(a), float(b), start_step, end_step)


@dataclass
class Stage1Section:
    steps: int = 1500
    # [[from_step, resolution], ...]
    resolution_schedule: list = dc_field(default_factory=lambda: [[0, 64], [500, 128]])
    reference_resolution: int = 0  # 0: same as the novel-view resolution
    lr: float = 1e-4
    reference_every: int = 2  # 2 gives reference:novel = 1:1

    def resolution(self, step: int) -> int:
        res = int(self.resolution_schedule[0][1])
        for start, r in self.resolution_schedule:
            if step >= int(start):
                res = int(r)
        return res


@dataclass
class Stage2Section:
    steps: int = 3500
    novel_resolution: int = 256
    reference_resolution: int = 512
    lr: float = 1e-4
    reference_every: int = 2
    allow_cold_lora: bool = False


@dataclass
class RefineSection:
    steps: int = 2000
    resolution: int = 800
    lr: float = 1e-4
    texture_lr: float = 1e-4
    extract_resolution: int = 512
    threshold: float = 10.0
    texture_size: int = 1024
    reference_every: int = 2
    snapshot_every: int = 500
    offset_cap: float = 0.05


@dataclass
class RunSection:
    seed: int = 0
    profile: str = "paper"
    heldout_poses: list = dc_field(default_factory=lambda: [[75.0, 45.0], [75.0, 135.0], [105.0, 225.0], [105.0, 315.0]])
    eval_resolution: int = 64
    log_every: int = 50


@dataclass
class Config:
    camera: CameraSection = dc_field(default_factory=CameraSection)
    field: FieldSection = dc_field(default_factory=FieldSection)
    guidance: GuidanceSection = dc_field(default_factory=GuidanceSection)
    loss: LossSection = dc_field(default_factory=LossSection)
    stage1: Stage1Section = dc_field(default_factory=Stage1Section)
    stage2: Stage2Section = dc_field(default_factory=Stage2Section)
    refine: RefineSection = dc_field(default_factory=RefineSection)
    run: RunSection = dc_field(default_factory=RunSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def flat(self) -> dict:
        return {f"{s}.{k}": v for s, sec in self.to_dict().items() for k, v in sec.items()}

    def stage3_losses(self) -> Stage3Losses:
        L = self.loss
        return Stage3Losses(
            lambda_rgb=float(L.lambda_rgb[1]),
            lambda_mask=float(L.lambda_mask[1]),
            lambda_normal_start=float(L.lambda_normal_refine[0]),
            lambda_normal_end=float(L.lambda_normal_refine[1]),
            lambda_guidance=float(L.lambda_refine_guidance[0]),
            lambda_offset=float(L.lambda_offset[0]),
            reference_every=self.refine.reference_every,
        )

    def ramp_steps(self) -> int:
        """Global-step span of the stage 1+2 ramps."""
        return self.stage1.steps + self.stage2.steps


# desk profile: minutes on one CPU core
DESK_OVERRIDES = {
    "field.levels": 6,
    "field.log2_table_size": 14,
    "field.samples_per_ray": 48,
    "stage1.steps": 300,
    "stage1.resolution_schedule": [[0, 64], [500, 128]],
    "stage1.lr": 1e-2,
    "stage2.steps": 500,
    "stage2.novel_resolution": 64,
    "stage2.reference_resolution": 128,
    "stage2.lr": 5e-3,
    "guidance.lora_lr": 1e-3,
    "refine.steps": 200,
    "refine.resolution": 128,
    "refine.lr": 3e-5,
    "refine.texture_lr": 3e-3,
    "refine.extract_resolution": 64,
    "refine.texture_size": 1024,
    "refine.snapshot_every": 100,
    "run.profile": "desk",
}


def _coerce(current, value):
    if isinstance(value, str) and not isinstance(current, str):
        try:
            value = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            if value.lower() in ("true", "false") and isinstance(current, bool):
                return value.lower() == "true"
            raise ValueError(f"cannot parse {value!r}") from None
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ValueError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ValueError(f"expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if isinstance(value, tuple):
            value = list(value)
        if not isinstance(value, list):
            raise ValueError(f"expected a list, got {value!r}")
        return value
    if isinstance(current, str):
        value = str(value)
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            value = value[1:-1]
        return value
    return value


def set_key(cfg: Config, key: str, value) -> None:
    """Assign ``section.name`` with type checking against the current value."""
    if key.count(".") != 1:
        raise KeyError(f"config keys look like 'section.name', got {key!r}")
    section, name = key.split(".")
    sec = getattr(cfg, section, None)
    if sec is None or not dataclasses.is_dataclass(sec):
        raise KeyError(f"unknown config section {section!r}")
    if name not in {f.name for f in dataclasses.fields(sec)}:
        raise KeyError(f"unknown config key {key!r}")
    try:
        setattr(sec, name, _coerce(getattr(sec, name), value))
    except ValueError as exc:
        raise ValueError(f"{key}: {exc}") from None


def apply_overrides(cfg: Config, overrides: dict) -> Config:
    for k, v in overrides.items():
        set_key(cfg, k, v)
    return cfg


def parse_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ValueError(f"override must look like key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    flat = {}
    for section, values in data.items():
        if not isinstance(values, dict):
            raise ValueError(f"{path}: top-level key {section!r} must be a [section] table")
        for k, v in values.items():
            flat[f"{section}.{k}"] = v
    return flat


def make_config(profile: str | None = None, path=None, overrides: dict | None = None) -> Config:
    """Profile defaults, then the file, then explicit overrides."""
    profile = profile or "desk"
    if profile not in PROFILES:
        raise ValueError(f"profile must be one of {PROFILES}, got {profile!r}")
    cfg = Config()
    if profile == "desk":
        apply_overrides(cfg, DESK_OVERRIDES)
    if path is not None:
        apply_overrides(cfg, load_toml(path))
    if overrides:
        apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def profile_from_env(cli_value: str | None) -> str:
    return cli_value or os.environ.get(PROFILE_ENV) or "desk"


def validate(cfg: Config) -> None:
    for name in ("stage1", "stage2", "refine"):
        if getattr(cfg, name).steps < 0:
            raise ValueError(f"{name}.steps must be >= 0")
    for res in [r for _, r in cfg.stage1.resolution_schedule] + [
        cfg.stage2.novel_resolution, cfg.stage2.reference_resolution, cfg.refine.resolution,
        cfg.refine.extract_resolution, cfg.refine.texture_size,
    ]:
        if int(res) <= 0:
            raise ValueError("resolutions must be positive")
    if cfg.refine.extract_resolution < 2:
        raise ValueError("refine.extract_resolution must be >= 2")
    if cfg.guidance.lora_source not in ("both", "render", "input"):
        raise ValueError("guidance.lora_source must be 'both', 'render' or 'input'")
    cfg.guidance.bands()
    for name in ("lambda_rgb", "lambda_mask", "lambda_normal", "lambda_normal_refine", "lambda_sds", "lambda_3d",
                 "lambda_vsd", "lambda_offset", "lambda_refine_guidance"):
        if len(getattr(cfg.loss, name)) != 2:
            raise ValueError(f"loss.{name} must be a [start, end] pair")


def dump_toml(cfg: Config) -> str:
    """Config as TOML text (round-trips through :func:`load_toml`)."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {fmt(v)}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: Config, path) -> None:
    Path(path).write_text(dump_toml(cfg))
