"""Run configuration: a "desk" or "paper" profile plus per-section overrides.

Config files are JSON, e.g.::

    {"profile": "desk", "codec": {"epochs": 5}, "eval": {"max_iters": 20}}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..codec import CodecConfig
from ..fusion import FusionConfig
from ..narrator import NarratorConfig
from ..tracker import EnergyConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 256
    n_test: int = 24
    T: int = 64
    fps: float = 30.0
    noise: tuple = (0.0, 0.0)


@dataclass
class EvalConfig:
    clips_per_setup: int = 2
    max_iters: int = 50  # tracker iterations per clip in the harness
    combos: tuple = ("imu", "imu+image", "imu+text", "imu+image+text", "imu+gentext", "imu+image+gentext")
    svg: bool = False


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig.desk)
    fusion: FusionConfig = field(default_factory=FusionConfig.desk)
    narrator: NarratorConfig = field(default_factory=NarratorConfig.desk)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)


def _override(obj, values: dict, section: str):
    names = {f.name for f in fields(obj)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    conv = {}
    for k, v in values.items():
        conv[k] = tuple(v) if isinstance(v, list) else v
    return replace(obj, **conv)


def profile(name: str) -> RunConfig:
    if name == "desk":
        return RunConfig()
    if name == "paper":
        return RunConfig(profile="paper", data=DataConfig(T=120), codec=CodecConfig.paper(),
                         fusion=FusionConfig.paper(), narrator=NarratorConfig.paper(),
                         eval=EvalConfig(max_iters=1000))
    raise ConfigError(f"unknown profile {name!r} (expected desk or paper)")


def load_config(path=None, seed: int | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(p)
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: {e}") from e
    cfg = profile(raw.pop("profile", "desk"))
    if "seed" in raw:
        cfg = replace(cfg, seed=int(raw.pop("seed")))
    for section in ("data", "codec", "fusion", "narrator", "energy", "eval"):
        if section in raw:
            cfg = replace(cfg, **{section: _override(getattr(cfg, section), raw.pop(section), section)})
    if raw:
        raise ConfigError(f"unknown config sections: {sorted(raw)}")
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    # one seed drives every stage
    return replace(cfg, codec=replace(cfg.codec, seed=cfg.seed), fusion=replace(cfg.fusion, seed=cfg.seed),
                   narrator=replace(cfg.narrator, seed=cfg.seed))
