"""Experiment configuration: one flat mapping, validated, hashed into every artifact."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .scene import SceneSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    n_s: int = 200
    n_t: int = 2000
    n_test: int = 150
    n_val: int = 50
    k_s: int = 8
    k_t: int = 30
    k_test: int = 30
    num_categories: int = 10
    novel_categories: tuple = (7, 8, 9)
    grid_size: int = 64
    water_fraction: float = 0.3
    # objective and label correction
    gamma: float = 0.5
    alpha: float = 0.4
    lambda1: float = 0.5
    lambda2: float = 0.1
    use_unlabeled: bool = True
    use_sim: bool = True
    use_dom: bool = True
    label_correction: bool = True
    # schedule
    lr: float = 5e-4
    lr_halve_every: int = 10
    pretrain_epochs: int = 40
    correction_period: int = 5
    rounds: int = 4
    pairs_per_batch: int = 2
    max_sim_pairs: int = 12
    # model
    style: str = "sopa"
    feature_dim: int = 32
    resolution: int = 32
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "novel_categories", tuple(sorted(int(c) for c in self.novel_categories)))
        checks = [
            (self.n_s >= 1 and self.n_t >= 1 and self.n_test >= 1, "n_s, n_t and n_test must be >= 1"),
            (min(self.k_s, self.k_t, self.k_test) >= 1, "k_s, k_t and k_test must be >= 1"),
            (0.0 < self.gamma < 1.0, "gamma must lie in (0, 1)"),
            (0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]"),
            (self.lambda1 >= 0 and self.lambda2 >= 0, "lambda1 and lambda2 must be non-negative"),
            (self.lr > 0, "lr must be positive"),
            (self.lr_halve_every >= 1, "lr_halve_every must be >= 1"),
            (self.correction_period >= 1, "correction_period must be >= 1"),
            (self.rounds >= 0 and self.pretrain_epochs >= 0, "rounds and pretrain_epochs must be >= 0"),
            (self.pairs_per_batch >= 1, "pairs_per_batch must be >= 1"),
            (self.style in ("sopa", "fopa"), "style must be 'sopa' or 'fopa'"),
            (all(0 <= c < self.num_categories for c in self.novel_categories),
             "novel_categories must be valid category ids"),
            (len(self.novel_categories) < self.num_categories, "novel_categories may not cover every category"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["novel_categories"] = list(self.novel_categories)
        return d

    def settings(self) -> dict:
        """Everything that affects results; the output location is left out."""
        d = self.to_dict()
        d.pop("output_dir")
        return d

    def config_hash(self) -> str:
        d = self.settings()
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()[:16]

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(grid_size=self.grid_size, num_categories=self.num_categories,
                         water_fraction=self.water_fraction, seed=self.seed)

    @property
    def effective_lambda1(self) -> float:
        return self.lambda1 if (self.use_sim and self.use_unlabeled) else 0.0

    @property
    def effective_lambda2(self) -> float:
        return self.lambda2 if (self.use_dom and self.use_unlabeled) else 0.0

    def pretrain_key(self) -> str:
        """Hash of the settings that determine the supervised warm-up alone."""
        keys = ("n_s", "k_s", "n_test", "k_test", "num_categories", "novel_categories", "grid_size", "water_fraction", "lr",
                "lr_halve_every", "pretrain_epochs", "pairs_per_batch", "style", "feature_dim", "resolution",
                "seed")
        d = {k: self.to_dict()[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **overrides)


def _coerce(name: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return tuple(int(v) for v in value)
    try:
        return type(default)(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot read {value!r} as {type(default).__name__}") from None


def coerce_overrides(overrides: dict) -> dict:
    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return {k: _coerce(k, v, defaults[k]) for k, v in overrides.items()}


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Defaults, then a flat YAML/JSON mapping from ``path``, then ``overrides``."""
    values = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a flat key-value mapping")
        nested = [k for k, v in loaded.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{path}: nested sections are not supported ({nested})")
        values.update(coerce_overrides(loaded))
    values.update(coerce_overrides({k: v for k, v in overrides.items() if v is not None}))
    return ExperimentConfig(**values)
