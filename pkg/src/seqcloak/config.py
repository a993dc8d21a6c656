"""Run configuration: one JSON or TOML file mirroring every module's defaults.

Unknown sections or keys are rejected so typos fail loudly instead of being
silently ignored.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .detector import ToyDetectorConfig
from .evalkit import MetricsConfig
from .optimizer import AttackConfig
from .pipeline import ScenePipeline, coverage_sigma
from .renderer import BackgroundPool, SceneConfig
from .texture_gen import GeneratorConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TextureSection:
    k: int = 6
    p_max: int = 600
    texture_size: int = 256  # side of the procedural starting texture when no image is given


@dataclass(frozen=True)
class SceneSection:
    frames_per_interval: int = 12
    garments: tuple = ("upper", "lower")
    mesh_resolution: tuple = (48, 28)
    body_resolution: tuple = (8, 2)
    n_backgrounds: int = 64
    background_palette: str = "outdoor"
    background_dir: str = ""


@dataclass(frozen=True)
class EvalSection:
    n_videos: int = 32
    split: str = "test"
    seed: int = 0


@dataclass(frozen=True)
class PathsSection:
    texture: str = ""
    mask: str = ""
    output: str = "runs"


SECTIONS = {
    "texture": TextureSection,
    "generator": GeneratorConfig,
    "render": SceneConfig,
    "scene": SceneSection,
    "detector": ToyDetectorConfig,
    "attack": AttackConfig,
    "metrics": MetricsConfig,
    "eval": EvalSection,
    "paths": PathsSection,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    texture: TextureSection = field(default_factory=TextureSection)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    render: SceneConfig = field(default_factory=SceneConfig)
    scene: SceneSection = field(default_factory=SceneSection)
    detector: ToyDetectorConfig = field(default_factory=ToyDetectorConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def replace(self, section=None, **kw):
        """Copy with top-level fields or one section's fields overridden."""
        if section is None:
            return dataclasses.replace(self, **kw)
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **kw)})

    def pipeline(self) -> ScenePipeline:
        sc = self.scene
        if sc.background_dir:
            pools = [BackgroundPool.from_directory(sc.background_dir)]
        else:
            pools = [BackgroundPool.procedural(sc.n_backgrounds, sc.background_palette)]
        return ScenePipeline(scene_cfg=self.render, pools=pools, frames_per_interval=sc.frames_per_interval,
                             garment_ids=tuple(sc.garments), mesh_resolution=tuple(sc.mesh_resolution),
                             body_resolution=tuple(sc.body_resolution), gen_cfg=self.generator,
                             det_cfg=self.detector)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(cls, values, where):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kw = {}
    for k, v in values.items():
        default = getattr(cls(), k) if _has_defaults(cls) else None
        if isinstance(default, tuple):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def _has_defaults(cls):
    return all(f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING
               for f in dataclasses.fields(cls))


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    unknown = sorted(set(d) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kw = {}
    if "seed" in d:
        if not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        kw["seed"] = d["seed"]
    for name, cls in SECTIONS.items():
        if name in d:
            if not isinstance(d[name], dict):
                raise ConfigError(f"[{name}] must be a table")
            kw[name] = _coerce(cls, d[name], name)
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        try:
            data = tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    else:
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    return from_dict(data)


def smoke_config() -> RunConfig:
    """The desk-scale configuration shipped as ``configs/smoke.toml``."""
    from .pipeline import SMOKE_GARMENTS, SMOKE_K, SMOKE_P_MAX, SMOKE_TEXTURE_SIZE, smoke_scene_config

    n = SMOKE_K * SMOKE_P_MAX
    return RunConfig(
        seed=0,
        texture=TextureSection(k=SMOKE_K, p_max=SMOKE_P_MAX, texture_size=SMOKE_TEXTURE_SIZE),
        generator=GeneratorConfig(field_sigma=float(round(coverage_sigma(n), 3)), smooth_weight=0.0),
        render=smoke_scene_config(128),
        scene=SceneSection(frames_per_interval=2, garments=SMOKE_GARMENTS, mesh_resolution=(24, 12),
                           n_backgrounds=64),
        attack=AttackConfig(sigma_ctrl=float(round(coverage_sigma(n) / 2, 4)), mc_sequences=2, epochs=300,
                            optimize_texture=True),
        eval=EvalSection(n_videos=32),
    )
