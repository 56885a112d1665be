"""INI-style run configuration.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` and
``;`` start comments. Sections and keys::

    [model]       arch
    [data]        source (mnist|synthetic), dir, n, dims, classes, separation, seed
    [train]       lr, scheduler, gamma, milestones, epochs, batch_size,
                  weight_decay, init, dropout, seed
    [attack]      attack_size, goals, budget, mask, heuristic, candidates,
                  eval_subsample, seed
    [experiment]  name, train_seeds, attack_seeds

Lists are comma-separated. ``mask = all`` selects every layer. The only
environment override is ``BFALAB_DATA_DIR`` for the data directory.
"""
from __future__ import annotations

import configparser
import hashlib
import os
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .attack import AttackConfig
from .models import ARCH_MLP, parse_arch
from .train import ConfigError, TrainingConfig

DATA_DIR_ENV = "BFALAB_DATA_DIR"


@dataclass(frozen=True)
class DataConfig:
    source: str = "mnist"
    dir: Optional[str] = None
    n: int = 1000
    dims: tuple = (16,)
    classes: int = 2
    separation: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("mnist", "synthetic"):
            raise ConfigError(f"unknown data source {self.source!r}; expected mnist or synthetic", "source")


@dataclass(frozen=True)
class ExperimentPlan:
    arch: str = ARCH_MLP
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    train_seeds: tuple = (1, 2, 3, 4, 5)
    attack_seeds: tuple = (1, 2, 3, 4, 5)
    name: str = "experiment"

    def __post_init__(self):
        for key in ("train_seeds", "attack_seeds"):
            seeds = tuple(getattr(self, key))
            if not seeds:
                raise ConfigError(f"{key} must not be empty", key)
            if len(set(seeds)) != len(seeds):
                raise ConfigError(f"{key} must be distinct", key)

    def training_config(self, seed: int) -> TrainingConfig:
        return replace(self.train, seed=seed)

    def attack_config(self, seed: int) -> AttackConfig:
        return replace(self.attack, seed=seed)


def _ints(v: str) -> tuple:
    return tuple(int(t) for t in v.replace(" ", "").split(",") if t)


def _floats(v: str) -> tuple:
    return tuple(float(t) for t in v.replace(" ", "").split(",") if t)


def _mask(v: str):
    return None if v.strip().lower() in ("all", "none", "") else _ints(v)


def _bool_free_opt(v: str):
    return None if v.strip() == "" else v.strip()


SCHEMA = {
    "model": {"arch": str},
    "data": {"source": str, "dir": _bool_free_opt, "n": int, "dims": _ints, "classes": int,
             "separation": float, "seed": int},
    "train": {"lr": float, "scheduler": str, "gamma": float, "milestones": _ints, "epochs": int,
              "batch_size": int, "weight_decay": float, "init": str, "dropout": float, "seed": int},
    "attack": {"attack_size": int, "goals": _floats, "budget": int, "mask": _mask, "heuristic": str,
               "candidates": int, "eval_subsample": int, "seed": int},
    "experiment": {"name": str, "train_seeds": _ints, "attack_seeds": _ints},
}


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number."""
    out, section = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip().lower()
            out[(section, None)] = n
            continue
        m = re.match(r"^([A-Za-z0-9_\-]+)\s*[=:]", s)
        if m and section:
            out[(section, m.group(1).lower())] = n
    return out


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse and type-check; returns {section: {key: value}}."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"{source}: {exc}", None, line) from None
    lines = _line_index(text)
    out = {}
    for section in cp.sections():
        sec = section.lower()
        if sec not in SCHEMA:
            raise ConfigError(f"{source}:{lines.get((sec, None), '?')}: unknown section [{section}]",
                              section, lines.get((sec, None)))
        out[sec] = {}
        for key, raw in cp.items(section):
            where = lines.get((sec, key))
            conv = SCHEMA[sec].get(key)
            if conv is None:
                raise ConfigError(f"{source}:{where}: unknown field {sec}.{key}", f"{sec}.{key}", where)
            try:
                out[sec][key] = conv(raw)
            except ValueError:
                raise ConfigError(f"{source}:{where}: field {sec}.{key}: cannot parse {raw!r}",
                                  f"{sec}.{key}", where) from None
    out["_lines"] = lines
    return out


def _build(cls, sec: str, values: dict, lines: dict, source: str, **extra):
    kwargs = {k: v for k, v in values.items() if k in {f.name for f in fields(cls)}}
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        key = exc.field.split(".")[-1] if exc.field else None
        where = lines.get((sec, key))
        raise ConfigError(f"{source}:{where if where else '?'}: field {sec}.{key}: {exc}", f"{sec}.{key}", where) from None


def plan_from_text(text: str, source: str = "<config>") -> ExperimentPlan:
    cfg = parse_config(text, source)
    lines = cfg.pop("_lines")
    data = _build(DataConfig, "data", cfg.get("data", {}), lines, source)
    train = _build(TrainingConfig, "train", cfg.get("train", {}), lines, source)
    attack = _build(AttackConfig, "attack", cfg.get("attack", {}), lines, source)
    exp = cfg.get("experiment", {})
    arch = cfg.get("model", {}).get("arch", ARCH_MLP)
    try:
        parse_arch(arch)
    except ValueError as exc:
        where = lines.get(("model", "arch"))
        raise ConfigError(f"{source}:{where}: field model.arch: {exc}", "model.arch", where) from None
    return _build(ExperimentPlan, "experiment", exp, lines, source, arch=arch, data=data, train=train, attack=attack)


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return plan_from_text(text, str(path))


def _fmt(v) -> str:
    if v is None:
        return "all"
    if isinstance(v, (tuple, list)):
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def plan_to_text(plan: ExperimentPlan) -> str:
    """Canonical, fully resolved rendering (what goes into plan.lock)."""
    parts = ["[model]", f"arch = {plan.arch}", "", "[data]"]
    for f in fields(DataConfig):
        v = getattr(plan.data, f.name)
        if f.name == "dir":
            continue  # machine-specific; recorded in the manifest instead
        parts.append(f"{f.name} = {_fmt(v)}")
    parts += ["", "[train]"]
    parts += [f"{f.name} = {_fmt(getattr(plan.train, f.name))}" for f in fields(TrainingConfig)]
    parts += ["", "[attack]"]
    parts += [f"{f.name} = {_fmt(getattr(plan.attack, f.name))}" for f in fields(AttackConfig)]
    parts += ["", "[experiment]", f"name = {plan.name}", f"train_seeds = {_fmt(plan.train_seeds)}",
              f"attack_seeds = {_fmt(plan.attack_seeds)}"]
    return "\n".join(parts) + "\n"


def plan_hash(plan: ExperimentPlan) -> str:
    return hashlib.sha256(plan_to_text(plan).encode()).hexdigest()


def resolve_data_dir(plan: ExperimentPlan, override: Optional[str] = None) -> Optional[str]:
    return override or os.environ.get(DATA_DIR_ENV) or plan.data.dir
