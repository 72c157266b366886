"""Run configuration files.

A config is INI-style text with one section per concern::

    [run]
    seed = 3
    variants = AE, AVAE, SA-AVAE
    k = 10
    seeds = 0, 1, 2

    [synthetic]
    n = 2000
    noise_std = 0.3

    [train]
    lr = 0.001
    batch_size = 20

    [weights]
    mu5 = 0.1

Values are coerced to the type of the matching dataclass field; unknown
sections or keys are rejected. Command-line flags override file values, which
override ``SAVAE_SEED`` (seed only), which overrides the built-in defaults.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SyntheticSpec
from .errors import ConfigError
from .evaluation import PrepConfig
from .losses import LossWeights
from .networks import VARIANTS
from .training import TrainConfig

SEED_ENV = "SAVAE_SEED"

_RUN_KEYS = {"seed", "out_dir", "variants", "k", "seeds", "jobs", "max_folds"}
_SECTIONS = ("run", "data", "synthetic", "features", "train", "weights")


@dataclass
class RunConfig:
    """Everything a CLI run needs: data source, preprocessing, training and the run matrix."""

    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec | None = None
    data_path: str | None = None
    prep: PrepConfig = field(default_factory=PrepConfig)
    out_dir: str = "runs"
    variants: tuple[str, ...] = ("AE", "AAE", "VAE", "AVAE", "SA-AVAE")
    k: int = 10
    seeds: tuple[int, ...] = (0,)
    seed: int = 0
    jobs: int = 1
    max_folds: int | None = None
    # whether ``seed`` came from a config file (it then outranks SAVAE_SEED)
    seed_from_file: bool = field(default=False, repr=False, compare=False)

    def validate(self, need_data: bool = True) -> "RunConfig":
        if need_data and (self.synthetic is None) == (self.data_path is None):
            raise ConfigError("give exactly one data source: a [data] path or a [synthetic] section")
        if self.synthetic is not None:
            self.synthetic.validate()
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.max_folds is not None and self.max_folds < 1:
            raise ConfigError("max_folds must be at least 1")
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "synthetic": None if self.synthetic is None else json.loads(self.synthetic.to_json()),
            "data_path": self.data_path,
            "prep": {"n_features": self.prep.n_features, "n_features2": self.prep.n_features2,
                     "scorer": self.prep.scorer},
            "variants": list(self.variants),
            "k": self.k,
            "seeds": list(self.seeds),
            "seed": self.seed,
            "max_folds": self.max_folds,
        }

    def digest(self) -> str:
        """Hash of the settings that determine results (output location and worker count excluded)."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# value coercion


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_int(text: str) -> int | None:
    t = text.strip().lower()
    return None if t in ("", "none", "all") else int(t)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _coercer(tp):
    """Parser for a dataclass field annotation (given as a string under postponed evaluation)."""
    if isinstance(tp, str):
        tp = tp.replace(" ", "")
        table = {
            "int": int, "float": float, "str": str, "bool": _parse_bool,
            "int|None": _parse_optional_int,
            "tuple[int,...]": _int_list,
            "tuple[str,...]": _str_list,
        }
        if tp in table:
            return table[tp]
        raise TypeError(f"no parser for field type {tp}")
    if tp is bool:
        return _parse_bool
    if tp in (int, float, str):
        return tp
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType) and type(None) in typing.get_args(tp):
        return _parse_optional_int
    raise TypeError(f"no parser for field type {tp}")


def _section_values(section, cls, skip=()) -> dict:
    known = {f.name: f for f in fields(cls) if f.name not in skip}
    out = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        try:
            out[key] = _coercer(known[key].type)(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# loading


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Build a :class:`RunConfig` from config-file text."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {' '.join(str(exc).split())}") from None
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {', '.join(sorted(unknown))}")

    cfg = RunConfig()
    if parser.has_section("weights"):
        weights = LossWeights(**_section_values(parser["weights"], LossWeights))
    else:
        weights = LossWeights()
    train_kw = _section_values(parser["train"], TrainConfig, skip=("weights",)) if parser.has_section("train") else {}
    cfg.train = replace(TrainConfig(), weights=weights, **train_kw)

    if parser.has_section("synthetic"):
        cfg.synthetic = SyntheticSpec(**_section_values(parser["synthetic"], SyntheticSpec))
    if parser.has_section("data"):
        data = dict(parser["data"])
        extra = set(data) - {"path"}
        if extra:
            raise ConfigError(f"[data] unknown key(s) {', '.join(sorted(extra))}")
        cfg.data_path = data.get("path") or None
    if parser.has_section("features"):
        cfg.prep = PrepConfig(**_section_values(parser["features"], PrepConfig))

    if parser.has_section("run"):
        run = parser["run"]
        extra = set(run) - _RUN_KEYS
        if extra:
            raise ConfigError(f"[run] unknown key(s) {', '.join(sorted(extra))}")
        try:
            if "seed" in run:
                cfg.seed = int(run["seed"])
            if "out_dir" in run:
                cfg.out_dir = run["out_dir"]
            if "variants" in run:
                cfg.variants = _str_list(run["variants"])
            if "k" in run:
                cfg.k = int(run["k"])
            if "seeds" in run:
                cfg.seeds = _int_list(run["seeds"])
            if "jobs" in run:
                cfg.jobs = int(run["jobs"])
            if "max_folds" in run:
                cfg.max_folds = _parse_optional_int(run["max_folds"])
        except ValueError as exc:
            raise ConfigError(f"[run] {exc}") from None
        cfg.seed_from_file = "seed" in run
    return cfg


def load_config(path) -> tuple[RunConfig, bytes]:
    """Read a config file; returns the parsed config and the raw bytes (for the echo)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not UTF-8 text") from None
    return parse_config(text, str(path)), raw


def resolve_seed(flag: int | None, cfg: RunConfig, environ=None) -> int:
    """Seed precedence: flag, then config file, then ``SAVAE_SEED``, then the default."""
    if flag is not None:
        return int(flag)
    if cfg.seed_from_file:
        return cfg.seed
    env = (os.environ if environ is None else environ).get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return cfg.seed


def dump_config(cfg: RunConfig) -> str:
    """Config-file text that parses back to ``cfg`` (used when no file was given)."""
    lines = ["[run]", f"seed = {cfg.seed}", f"out_dir = {cfg.out_dir}",
             f"variants = {', '.join(cfg.variants)}", f"k = {cfg.k}",
             f"seeds = {', '.join(str(s) for s in cfg.seeds)}", f"jobs = {cfg.jobs}",
             f"max_folds = {'none' if cfg.max_folds is None else cfg.max_folds}", ""]
    if cfg.data_path is not None:
        lines += ["[data]", f"path = {cfg.data_path}", ""]
    if cfg.synthetic is not None:
        lines.append("[synthetic]")
        lines += [f"{f.name} = {_fmt(getattr(cfg.synthetic, f.name))}" for f in fields(cfg.synthetic)]
        lines.append("")
    lines.append("[features]")
    lines += [f"{f.name} = {_fmt(getattr(cfg.prep, f.name))}" for f in fields(cfg.prep)]
    lines += ["", "[train]"]
    lines += [f"{f.name} = {_fmt(getattr(cfg.train, f.name))}" for f in fields(cfg.train) if f.name != "weights"]
    lines += ["", "[weights]"]
    lines += [f"{f.name} = {_fmt(getattr(cfg.train.weights, f.name))}" for f in fields(LossWeights)]
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)
