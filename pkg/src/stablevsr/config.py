"""Declarative run configuration: one JSON file with six optional sections.

Every field has a module default; unknown sections or keys are rejected, all
at once, so a typo never silently falls back to a default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .alignment import FLOW_BACKENDS, GUIDANCE_MODES
from .codec import CODEC_MODES, LatentCodec
from .dataio import MOTIONS, TEXTURES, DataConfig
from .denoiser import DenoiserConfig
from .metrics import DISTANCES
from .sampler import STRATEGIES, SamplerConfig
from .schedule import SIGMA_MODES
from .training import TRAIN_GUIDANCE_MODES, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_mode: str = "beta_tilde"


@dataclass
class ModelSection:
    codec_mode: str = "space_to_depth"
    base_channels: int = 64
    depth: int = 3
    channel_mult: list[int] = field(default_factory=lambda: [1, 1, 2, 2])
    step_embed_dim: int = 128
    groups: int = 8
    sigma_data: float = 0.5


@dataclass
class TrainSection:
    batch_size: int = 8
    patch: int = 64
    flip_prob: float = 0.5
    grad_clip: float = 1.0
    base_steps: int = 2000
    base_lr_rate: float = 1e-3
    tcm_steps: int = 2000
    tcm_lr_rate: float = 1e-3
    tcm_batch_size: int = 64
    flow_backend: str = "oracle"
    guidance_mode: str = "proposed"
    log_wall_time: bool = False


@dataclass
class SampleSection:
    strategy: str = "bidirectional"
    T_inference: int = 50
    flow_backend: str = "block_matching"
    guidance_mode: str = "proposed"
    block: int = 8
    radius: int = 4
    ablation_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    sweep_steps: list[int] = field(default_factory=lambda: [10, 30, 50, 100])


@dataclass
class EvalSection:
    distance: str = "laplacian_pyramid_l1"
    tof_block: int = 8
    tof_radius: int = 8
    profile_row: int = -1  # -1: middle row


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived module configs -------------------------------------------

    def codec(self) -> LatentCodec:
        return LatentCodec(self.model.codec_mode)

    def denoiser_config(self) -> DenoiserConfig:
        codec = self.codec()
        m = self.model
        return DenoiserConfig(
            latent_channels=codec.latent_channels,
            base_channels=m.base_channels,
            depth=m.depth,
            channel_mult=list(m.channel_mult),
            step_embed_dim=m.step_embed_dim,
            num_train_steps=self.schedule.T,
            beta_start=self.schedule.beta_start,
            beta_end=self.schedule.beta_end,
            sigma_data=m.sigma_data,
            guidance_scale=codec.scale,
            groups=m.groups,
        )

    def train_config(self, phase: str, guidance_mode: str | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            phase=phase,
            batch_size=t.batch_size if phase == "base" else t.tcm_batch_size,
            lr_rate=t.base_lr_rate if phase == "base" else t.tcm_lr_rate,
            grad_clip=t.grad_clip,
            max_steps=t.base_steps if phase == "base" else t.tcm_steps,
            patch=t.patch,
            flip_prob=t.flip_prob,
            T=self.schedule.T,
            beta_start=self.schedule.beta_start,
            beta_end=self.schedule.beta_end,
            seed=self.seed,
            flow_backend=t.flow_backend,
            guidance_mode=guidance_mode or t.guidance_mode,
            codec_mode=self.model.codec_mode,
            log_wall_time=t.log_wall_time,
        )

    def sampler_config(self, **overrides) -> SamplerConfig:
        s = self.sample
        kw = dict(
            strategy=s.strategy,
            T_inference=s.T_inference,
            seed=self.seed,
            flow_backend=s.flow_backend,
            codec_mode=self.model.codec_mode,
            guidance_mode=s.guidance_mode,
            block=s.block,
            radius=s.radius,
        )
        kw.update(overrides)
        return SamplerConfig(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = ("data", "schedule", "model", "train", "sample", "eval")


def _field_types(cls) -> dict[str, Any]:
    return {f.name: f for f in fields(cls)}


def _coerce(value: Any, default: Any, where: str, errors: list[str]):
    """Check ``value`` against the type of the field default."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, (list, tuple)):
        if isinstance(value, (list, tuple)):
            return list(value)
    else:
        return value
    errors.append(f"{where}: expected {type(default).__name__}, got {value!r}")
    return default


def from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig, reporting every unknown key and type error together."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    errors: list[str] = []
    cfg = RunConfig()
    for key, value in raw.items():
        if key == "seed":
            cfg.seed = _coerce(value, 0, "seed", errors)
            continue
        if key not in SECTIONS:
            errors.append(f"unknown section {key!r} (expected one of {', '.join(SECTIONS)})")
            continue
        if not isinstance(value, dict):
            errors.append(f"section {key!r} must be an object")
            continue
        section = getattr(cfg, key)
        known = _field_types(type(section))
        for k, v in value.items():
            if k not in known:
                errors.append(f"unknown key {key}.{k}")
                continue
            setattr(section, k, _coerce(v, getattr(section, k), f"{key}.{k}", errors))
    errors += _check_choices(cfg)
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


def _check_choices(cfg: RunConfig) -> list[str]:
    choices = [
        ("schedule.sigma_mode", [cfg.schedule.sigma_mode], SIGMA_MODES),
        ("model.codec_mode", [cfg.model.codec_mode], CODEC_MODES),
        ("train.flow_backend", [cfg.train.flow_backend], FLOW_BACKENDS),
        ("train.guidance_mode", [cfg.train.guidance_mode], TRAIN_GUIDANCE_MODES),
        ("sample.strategy", [cfg.sample.strategy], STRATEGIES),
        ("sample.flow_backend", [cfg.sample.flow_backend], FLOW_BACKENDS),
        ("sample.guidance_mode", [cfg.sample.guidance_mode], GUIDANCE_MODES),
        ("eval.distance", [cfg.eval.distance], tuple(DISTANCES)),
        ("data.textures", cfg.data.textures, TEXTURES),
        ("data.motions", cfg.data.motions, MOTIONS),
    ]
    errors = [
        f"{where}: {v!r} is not one of {', '.join(allowed)}"
        for where, values, allowed in choices
        for v in values
        if v not in allowed
    ]
    positive = [
        ("schedule.T", cfg.schedule.T), ("sample.T_inference", cfg.sample.T_inference),
        ("train.batch_size", cfg.train.batch_size), ("train.tcm_batch_size", cfg.train.tcm_batch_size),
        ("data.num_frames", cfg.data.num_frames),
    ]  # fmt: skip
    errors += [f"{where}: must be positive, got {v}" for where, v in positive if v < 1]
    errors += [f"sample.sweep_steps: {v} is not a positive int" for v in cfg.sample.sweep_steps if not (isinstance(v, int) and v > 0)]
    return errors


def parse_override(text: str) -> tuple[list[str], Any]:
    """``section.key=value``; the value is read as JSON, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip().split("."), parsed


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = json.loads(json.dumps(raw))
    for text in overrides:
        path, value = parse_override(text)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {part!r} is not a section")
        node[path[-1]] = value
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: not valid JSON ({exc})") from exc
    raw = apply_overrides(raw, list(overrides))
    if seed is not None:
        raw["seed"] = seed
    return from_dict(raw)


def section_defaults() -> dict:
    """The fully resolved default config, handy as a template."""
    return RunConfig().to_dict()
