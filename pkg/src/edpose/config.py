"""Run configuration: typed dataclasses and a flat, sectioned INI text format.

Example::

    [model]
    d_model = 64
    num_queries = 100

    [optim]
    lr = 0.0002

Every key is optional; omitted keys take the defaults below (which follow the
full-scale training recipe).  ``desk_config()`` returns the small-scale preset
used by the tests and examples.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_keypoints: int = 17
    d_model: int = 256
    num_queries: int = 900
    num_select: int = 100
    enc_layers: int = 2
    human_layers: int = 2
    hk_layers: int = 4
    n_heads: int = 8
    n_points: int = 4
    n_levels: int = 3
    d_ffn: int = 1024
    dropout: float = 0.0
    mask_strategy: str = "ours"
    size_init: str = "learned"
    pe_temperature: float = 10000.0


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_decay_epoch: int = 55
    lr_decay_factor: float = 0.1
    epochs: int = 60
    max_steps: int = 0
    batch_size: int = 16
    seed: int = 42
    grad_clip: float = 0.1
    eval_every: int = 0


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    val_path: str = ""
    image_root: str = ""
    seed: int = 0
    n_images: int = 64
    n_val_images: int = 16
    people_min: int = 2
    people_max: int = 3
    image_size: int = 128
    augment: bool = False
    flip_prob: float = 0.5
    crop_prob: float = 0.5
    resize_min: int = 96
    resize_max: int = 128
    max_size: int = 192
    oks_constants: str = "coco"


@dataclass
class LossConfig:
    mu: float = 5.0
    beta: float = 2.0
    lam: float = 2.0
    omega: float = 10.0
    theta: float = 4.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    cost_class: float = 2.0
    cost_box: float = 5.0
    cost_giou: float = 2.0
    cost_kpt: float = 10.0
    cost_oks: float = 4.0
    human_det_supervision: bool = True
    encoder_supervision: bool = True


@dataclass
class EvalSection:
    max_detections: int = 20
    score_threshold: float = 0.0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "RunConfig":
        m = self.model
        if m.num_select > m.num_queries:
            raise ConfigError(f"model.num_select={m.num_select} exceeds model.num_queries={m.num_queries}")
        if m.d_model % 8 or m.d_model % m.n_heads:
            raise ConfigError("model.d_model must be divisible by 8 and by model.n_heads")
        if m.mask_strategy not in ("ours", "full", "no_hk", "no_hh"):
            raise ConfigError(f"model.mask_strategy: unknown value {m.mask_strategy!r}")
        if m.size_init not in ("none", "min", "max", "ffn", "learned"):
            raise ConfigError(f"model.size_init: unknown value {m.size_init!r}")
        if m.num_keypoints not in (14, 17):
            raise ConfigError("model.num_keypoints must be 14 or 17")
        if self.data.source not in ("synthetic", "coco_json"):
            raise ConfigError(f"data.source: unknown value {self.data.source!r}")
        if self.data.people_min < 1 or self.data.people_max < self.data.people_min:
            raise ConfigError("data.people_min/people_max out of order")
        if self.optim.batch_size < 1:
            raise ConfigError("optim.batch_size must be positive")
        for name in ("mu", "beta", "lam", "omega", "theta"):
            if getattr(self.loss, name) <= 0:
                raise ConfigError(f"loss.{name} must be positive")
        return self

    def replace(self, **sections: dict[str, Any]) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``cfg.replace(model={"num_select": 50})``."""
        kw = {}
        for f in fields(self):
            sec = getattr(self, f.name)
            kw[f.name] = dataclasses.replace(sec, **sections.get(f.name, {}))
        unknown = set(sections) - set(kw)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        return RunConfig(**kw)


def _convert(section: str, key: str, raw: str, typ):
    try:
        if typ is bool or typ == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"unknown config section [{name}]")
        sec = sections[name]
        types = {f.name: f.type for f in fields(sec)}
        for key, raw in parser.items(name):
            if key not in types:
                raise ConfigError(f"unknown config key {name}.{key}")
            setattr(sec, key, _convert(name, key, raw, types[key]))
    return cfg.validate()


def serialize_config(cfg: RunConfig) -> str:
    out = io.StringIO()
    for f in fields(cfg):
        sec = getattr(cfg, f.name)
        out.write(f"[{f.name}]\n")
        for sf in fields(sec):
            out.write(f"{sf.name} = {_format(getattr(sec, sf.name))}\n")
        out.write("\n")
    return out.getvalue()


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def desk_config() -> RunConfig:
    """Small preset that trains on one CPU core in minutes."""
    return RunConfig(
        model=ModelConfig(d_model=64, num_queries=60, num_select=10, enc_layers=1,
                          n_heads=4, n_points=4, d_ffn=128),
        # full-batch steps on the 16-image split; decay for the last quarter of the 2000-step budget
        optim=OptimConfig(lr=8e-4, weight_decay=1e-4, lr_decay_epoch=1500, epochs=10_000,
                          max_steps=2000, batch_size=16, grad_clip=0.1),
        data=DataConfig(n_images=16, image_size=128, oks_constants="uniform:0.1"),
    ).validate()
