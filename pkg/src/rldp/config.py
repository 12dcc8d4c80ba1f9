"""Run configuration: one YAML document with sections env, data, repr, bfm, eval, diag, paths.

Parsing is strict: unknown keys and ill-typed values abort with the dotted
path of the offending entry.  Every section may be omitted, in which case
its defaults apply.  Component seeds are never configured directly; they
are derived from ``env.seed`` (see :func:`rldp._io.derive_seed`).
"""
from __future__ import annotations

import copy
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

import yaml

from rldp.bfm import BfmConfig
from rldp.replearn import ReprConfig
from rldp.zeroshot import RewardSpec


class ConfigError(ValueError):
    pass


@dataclass
class EnvSection:
    id: str = "fourroom"
    layout: str = ""
    obs_mode: str = "onehot"
    seed: int = 0


@dataclass
class DataSection:
    policy: str = "count_bonus"
    episodes: int = 100
    episode_len: int = 100
    epsilon: float = 0.1


@dataclass
class EvalSection:
    tasks: list = field(default_factory=list)
    episodes: int = 50
    episode_len: int = 100
    N: int = 10000
    inference: str = "mean"
    ridge: float = 0.0
    rescale_z: bool = True


@dataclass
class DiagSection:
    heatmaps: list = field(default_factory=list)
    lemma_policy: str = "uniform"
    lemma: bool = True


@dataclass
class PathsSection:
    dataset: str = "data/dataset.bin"
    checkpoints: str = "checkpoints"
    metrics: str = "metrics"


@dataclass
class BfmSection(BfmConfig):
    mode: str = "frozen_features"


@dataclass
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    data: DataSection = field(default_factory=DataSection)
    repr: ReprConfig = field(default_factory=ReprConfig)
    bfm: BfmSection = field(default_factory=BfmSection)
    eval: EvalSection = field(default_factory=EvalSection)
    diag: DiagSection = field(default_factory=DiagSection)
    paths: PathsSection = field(default_factory=PathsSection)
    base_dir: Path = field(default_factory=Path.cwd)

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else self.base_dir / p

    def tasks(self) -> list[RewardSpec]:
        out = []
        for i, t in enumerate(self.eval.tasks):
            if not isinstance(t, dict) or "kind" not in t:
                raise ConfigError(f"eval.tasks[{i}]: each task needs a 'kind'")
            try:
                out.append(RewardSpec.from_dict(t))
            except ValueError as exc:
                raise ConfigError(f"eval.tasks[{i}]: {exc}") from None
        return out

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "base_dir":
                continue
            section = asdict(getattr(self, f.name))
            if f.name in DERIVED_SEED_SECTIONS:
                section.pop("seed", None)
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out


SECTIONS = {"env": EnvSection, "data": DataSection, "repr": ReprConfig, "bfm": BfmSection,
            "eval": EvalSection, "diag": DiagSection, "paths": PathsSection}
# seeds of these sections are derived from env.seed
DERIVED_SEED_SECTIONS = ("repr", "bfm")


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool)
                                                           for v in value):
            raise ConfigError(f"{where}: expected a list of integers, got {value!r}")
        return tuple(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return copy.deepcopy(value)
    return value


def _section(name: str, cls, raw) -> object:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    if name in DERIVED_SEED_SECTIONS:
        known.pop("seed", None)
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            hint = " (seeds derive from env.seed)" if key == "seed" else ""
            raise ConfigError(f"{name}.{key}: unknown key{hint}")
        f = known[key]
        default = f.default if f.default is not MISSING else f.default_factory()
        kwargs[key] = _coerce(value, default, f"{name}.{key}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config(raw, base_dir=None) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping of sections")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"{key}: unknown section (expected one of {sorted(SECTIONS)})")
    cfg = RunConfig(**{name: _section(name, cls, raw.get(name)) for name, cls in SECTIONS.items()})
    cfg.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    if cfg.env.id not in ("fourroom", "pointmass"):
        raise ConfigError(f"env.id: unknown environment {cfg.env.id!r}")
    if cfg.eval.inference not in ("mean", "regression"):
        raise ConfigError(f"eval.inference: expected 'mean' or 'regression', got {cfg.eval.inference!r}")
    if cfg.bfm.mode not in ("frozen_features", "fb_joint"):
        raise ConfigError(f"bfm.mode: expected 'frozen_features' or 'fb_joint', got {cfg.bfm.mode!r}")
    if cfg.diag.lemma_policy not in ("uniform", "random"):
        raise ConfigError(f"diag.lemma_policy: expected 'uniform' or 'random', got {cfg.diag.lemma_policy!r}")
    cfg.tasks()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(raw, base_dir=path.parent)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
