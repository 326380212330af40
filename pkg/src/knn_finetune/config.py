"""Flat ``key = value`` experiment configuration.

Blank lines and lines starting with ``#`` are ignored.  Relative paths are
resolved against the directory holding the config file.  Unknown keys and
out-of-range values raise :class:`~knn_finetune.trainer.ConfigError` naming
the offending field.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import FeaturizerConfig
from .trainer import ConfigError, TrainConfig

FORMAT_VERSION = 1


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    train_path: str = ""
    test_path: str = ""
    num_classes: int = 2
    feature_dim: int = 1024
    ngram_orders: tuple[int, ...] = (1, 2)
    hash_seed: int = 0
    # training
    lam: float = 0.5
    tau: float = 0.07
    momentum: float = 0.999
    n_most: int = 10
    n_least: int = 5
    queue_capacity: int = 4096
    batch_size: int = 8
    lr: float = 1e-3
    epochs: int = 5
    hidden_dim: int = 64
    embed_dim: int = 32
    k: int = 10
    phi: float = 0.5
    weighted_vote: bool = False
    anchor_source: str = "query"
    seeds: tuple[int, ...] = (1,)
    few_shot_n: int = 0
    # attack
    lexicon_path: str = ""
    attack_size: int = 100
    max_sub_fraction: float = 0.3
    attack_phis: tuple[float, ...] = (0.0, 0.5, 1.0)
    out_dir: str = "out"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds", "seeds must be non-negative")
        if self.num_classes < 1:
            raise ConfigError("num_classes", f"must be positive, got {self.num_classes}")
        if self.few_shot_n < 0:
            raise ConfigError("few_shot_n", f"must be >= 0, got {self.few_shot_n}")
        if self.attack_size < 1:
            raise ConfigError("attack_size", f"must be positive, got {self.attack_size}")
        if not 0.0 <= self.max_sub_fraction <= 1.0:
            raise ConfigError("max_sub_fraction", f"must lie in [0, 1], got {self.max_sub_fraction}")
        for p in self.attack_phis:
            if not 0.0 <= p <= 1.0:
                raise ConfigError("attack_phis", f"values must lie in [0, 1], got {p}")
        try:
            self.featurizer
        except ValueError as e:
            raise ConfigError("feature_dim", str(e)) from None
        self.train  # validates the training fields

    @property
    def featurizer(self) -> FeaturizerConfig:
        return FeaturizerConfig(self.feature_dim, self.ngram_orders, self.hash_seed)

    @property
    def train(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{n: getattr(self, n) for n in names})

    def with_values(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def echo(self) -> str:
        """Canonical ``key = value`` text; parsing it gives back an equal config."""
        lines = [f"# format_version = {FORMAT_VERSION}"]
        for f in fields(self):
            lines.append(f"{_key_for(f.name)} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


# ``lambda`` is a Python keyword, so the field is ``lam``
_ALIASES = {"lambda": "lam"}


def _key_for(name: str) -> str:
    return "lambda" if name == "lam" else name


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_PARSERS = {int: int, float: float, str: str, bool: _bool}


def _parser_for(name: str):
    f = next(f for f in fields(ExperimentConfig) if f.name == name)
    t = f.type
    if t == "tuple[int, ...]":
        return _ints
    if t == "tuple[float, ...]":
        return _floats
    return _PARSERS[{"int": int, "float": float, "str": str, "bool": bool}[t]]


_PATH_KEYS = ("train_path", "test_path", "lexicon_path", "out_dir")


def parse_config(text: str, base_dir=None, overrides=None) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    items = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        items.append((key.strip(), val.strip()))
    items += list((overrides or {}).items())
    for key, val in items:
        name = _ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(key, "unknown configuration key")
        try:
            values[name] = _parser_for(name)(val) if isinstance(val, str) else val
        except ValueError as e:
            raise ConfigError(key, f"cannot parse {val!r}: {e}") from None
    if base_dir is not None:
        for k in _PATH_KEYS:
            if values.get(k) and not Path(values[k]).is_absolute():
                values[k] = str((Path(base_dir) / values[k]).resolve())
    return ExperimentConfig(**values)


def load_config(path, overrides=None) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent, overrides=overrides)
