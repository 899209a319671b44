"""INI configuration with sections [sim], [skills], [cvae], [dqn], [eval].

Every key is optional; missing keys keep the defaults below. The output
directory comes from ``--out``, else the ``OCCGRASP_OUT`` environment
variable, else ``runs``.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields

from .cvae import CvaeConfig
from .high import PENALTY_RULES, DqnConfig
from .skills import SacConfig

OUT_ENV = "OCCGRASP_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class SimSection:
    n_points: int = 64
    cloud_sigma: float = 0.003


@dataclass
class CvaeSection:
    per_skill_count: int = 3000
    n_samples: int = 32


@dataclass
class DqnSection:
    penalty_rule: str = "literal"


@dataclass
class EvalSection:
    episodes_per_cell: int = 30
    wall_lengths: tuple = (0.1, 0.2, 0.3, 0.4)
    objects: tuple = ("large", "small", "long", "short", "gear")
    unseen_wall_length: float = 0.2
    accessible: bool = False
    workers: int = 1


@dataclass
class Config:
    sim: SimSection = field(default_factory=SimSection)
    sac: SacConfig = field(default_factory=SacConfig)
    cvae_section: CvaeSection = field(default_factory=CvaeSection)
    cvae: CvaeConfig = field(default_factory=CvaeConfig)
    dqn_section: DqnSection = field(default_factory=DqnSection)
    dqn: DqnConfig = field(default_factory=DqnConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    out_dir: str = "runs"


# which dataclasses each INI section feeds
_SECTIONS = {
    "sim": ("sim",),
    "skills": ("sac",),
    "cvae": ("cvae_section", "cvae"),
    "dqn": ("dqn_section", "dqn"),
    "eval": ("eval",),
}


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _apply(obj, values: dict, section: str):
    known = {f.name: f for f in fields(obj)}
    for key, raw in values.items():
        if key not in known:
            return key
        setattr(obj, key, _convert(raw, getattr(obj, key), f"[{section}] {key}"))
    return None


def load_config(path=None, out_dir=None) -> Config:
    cfg = Config()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}") from None
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            values = dict(parser.items(section))
            for attr in _SECTIONS[section]:
                target = getattr(cfg, attr)
                mine = {k: v for k, v in values.items() if k in {f.name for f in fields(target)}}
                _apply(target, mine, section)
                for k in mine:
                    values.pop(k)
            if values:
                raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(values))}")
    if cfg.dqn_section.penalty_rule not in PENALTY_RULES:
        raise ConfigError(f"penalty_rule must be one of {PENALTY_RULES}")
    try:
        cfg.sac.__post_init__()
        cfg.dqn.__post_init__()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    cfg.out_dir = out_dir or os.environ.get(OUT_ENV) or cfg.out_dir
    return cfg


def with_seed(cfg: Config, seeds: dict) -> Config:
    """Copy per-stage seeds into the training configs."""
    cfg.sac.seed = seeds["pivot"]
    cfg.cvae.seed = seeds["cvae"]
    cfg.dqn.seed = seeds["high"]
    return cfg
