"""Run configuration: nested dataclasses read from an INI-style ``key = value`` file."""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .backbones import STAGES


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    image_size: int = 128
    train_samples: int = 500
    eval_samples: int = 100
    classes_per_image: tuple[int, int] = (1, 3)
    instances_per_class: tuple[int, int] = (1, 2)
    radius: tuple[int, int] = (14, 28)
    novel_count: int = 6
    seed: int = 0  # benchmark seed: vocabulary split and rendered samples


@dataclass
class ModelConfig:
    widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    text_embed_dim: int = 64
    num_queries: int = 16
    mask_dim: int = 32
    head_layers: int = 2
    heads: int = 4
    cdt_depth: int = 2
    temperature: float = 0.07


@dataclass
class LossConfig:
    rc_grids: tuple[int, ...] = (1, 2, 4)
    lambda_ma: float = 1.0
    lambda_rc: float = 0.1
    w_bce: float = 1.0
    w_dice: float = 1.0


@dataclass
class OptimConfig:
    lr_backbone: float = 1e-4  # a tenth of lr_other
    lr_other: float = 1e-3
    weight_decay: float = 0.05
    steps: int = 2000
    batch_size: int = 4


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 0.01
    temperature: float = 0.07
    eval_count: int = 190


@dataclass
class AblationConfig:
    use_cdt: bool = True
    use_rc: bool = True
    freeze_backbone: bool = False
    panoptic_mode: bool = False
    frozen_stages: tuple[str, ...] = ()
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass
class RunConfig:
    seed: int = 0
    log_every: int = 100
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> None:
        if self.loss.lambda_ma < 0 or self.loss.lambda_rc < 0:
            raise ConfigError("loss weights must be non-negative")
        bad = set(self.ablation.frozen_stages) - set(STAGES)
        if bad:
            raise ConfigError(f"unknown stages in frozen_stages: {sorted(bad)}")
        if self.data.image_size % 32:
            raise ConfigError("image_size must be a multiple of 32")
        if self.model.widths[-1] % self.model.heads:
            raise ConfigError("embedding width must be divisible by the head count")

    @property
    def frozen_stages(self) -> tuple[str, ...]:
        return STAGES if self.ablation.freeze_backbone else tuple(self.ablation.frozen_stages)

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``replace(ablation={"use_cdt": False})``."""
        out = dataclasses.replace(self)
        for name, overrides in sections.items():
            if isinstance(overrides, dict):
                setattr(out, name, dataclasses.replace(getattr(self, name), **overrides))
            else:
                setattr(out, name, overrides)
        return out


SECTIONS = ("data", "model", "loss", "optim", "pretrain", "ablation")
TOP_LEVEL = ("seed", "log_every")


def _convert(raw: str, typ, where: str):
    raw = raw.strip()
    origin = getattr(typ, "__origin__", None)
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if origin is tuple:
            args = typ.__args__
            items = [s.strip() for s in raw.split(",") if s.strip()]
            elem = args[0]
            vals = tuple(_convert(s, elem, where) for s in items)
            if len(args) == 2 and args[1] is Ellipsis:
                return vals
            if len(vals) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return vals
        if typ is str:
            return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from None
    raise ConfigError(f"{where}: unsupported type {typ}")


def _line_of(text: str, section: str | None, key: str) -> int:
    current = None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            current = m.group(1).strip()
            continue
        if current == section and re.match(rf"{re.escape(key)}\s*=", s, re.IGNORECASE):
            return no
    return 0


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None
    )
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"line {lineno - 1}: malformed entry {line.strip()!r}") from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"line {exc.lineno - 1}: duplicate key {exc.option!r}") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"line {exc.lineno - 1}: duplicate section {exc.section!r}") from None
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig()
    for section in parser.sections():
        if section == "run":
            target, hints, allowed = cfg, get_type_hints(RunConfig), TOP_LEVEL
        elif section in SECTIONS:
            target = getattr(cfg, section)
            hints = get_type_hints(type(target))
            allowed = tuple(hints)
        else:
            raise ConfigError(f"line {_unknown_section_line(text, section)}: unknown section [{section}]")
        for key, raw in parser.items(section):
            sec = None if section == "run" else section
            if key not in allowed:
                raise ConfigError(f"line {_line_of(text, sec, key)}: unknown key {key!r} in [{section}]")
            where = f"line {_line_of(text, sec, key)}"
            setattr(target, key, _convert(raw, hints[key], where))
    cfg.validate()
    return cfg


def _unknown_section_line(text: str, section: str) -> int:
    for no, line in enumerate(text.splitlines(), start=1):
        if line.strip() == f"[{section}]":
            return no
    return 0


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{k} = {_fmt(getattr(cfg, k))}" for k in TOP_LEVEL]
    for section in SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
