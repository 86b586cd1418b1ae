"""Run configuration: a line-oriented key=value file with [section] headers.

Unknown sections and keys are rejected (typos should fail loudly), duplicate
keys are parse errors with line numbers, and every omitted key falls back to
a documented default. The defaults reproduce the reference training recipes;
desk-scale overrides must be written out explicitly.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .encoder import EncoderConfig
from .mlm import MaskingConfig
from .optim import TrainConfig
from .ensemble import StackerConfig
from .prompt import DEFAULT_NEGATIVE_WORDS, DEFAULT_POSITIVE_WORDS, DEFAULT_TEMPLATE

__all__ = ["ConfigError", "RunConfig", "load_config"]


class ConfigError(ValueError):
    """Raised for unparseable, unknown, or ill-typed configuration input."""


# (type, default); type is one of int/float/str/words. None default = optional.
_SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "paths": {
        "train": ("str", None),
        "test": ("str", None),
        "output": ("str", "out"),
        "vocab": ("str", None),        # default: <output>/vocab.txt
        "pretrained": ("str", None),   # default: <output>/pretrained.ckpt if present
    },
    "encoder": {
        "vocab_size": ("int", 2000),
        "max_len": ("int", 256),
        "d_model": ("int", 64),
        "n_heads": ("int", 4),
        "n_layers": ("int", 2),
        "d_ff": ("int", 128),
        "dropout": ("float", 0.1),
    },
    "masking": {
        "select_fraction": ("float", 0.15),
        "mask_fraction": ("float", 0.80),
        "random_fraction": ("float", 0.10),
        "keep_fraction": ("float", 0.10),
    },
    "pretrain": {
        "steps": ("int", 3000),
        "batch_size": ("int", 64),
        "warmup_steps": ("int", 500),
        "peak_lr": ("float", 1e-4),
        "weight_decay": ("float", 0.01),
        "seed": ("int", 11),
    },
    "finetune": {
        "steps": ("int", 2000),
        "batch_size": ("int", 32),
        "warmup_steps": ("int", 100),
        "peak_lr": ("float", 5e-6),
        "weight_decay": ("float", 0.01),
        "seed": ("int", 12),
    },
    "filter": {
        "steps": ("int", 2000),
        "batch_size": ("int", 32),
        "warmup_steps": ("int", 100),
        "peak_lr": ("float", 5e-6),
        "weight_decay": ("float", 0.01),
        "seed": ("int", 13),
        "threshold": ("float", 0.5),
        "template": ("str", DEFAULT_TEMPLATE),
        "negative_words": ("words", list(DEFAULT_NEGATIVE_WORDS)),
        "positive_words": ("words", list(DEFAULT_POSITIVE_WORDS)),
    },
    "cv": {
        "k": ("int", 5),
        "seed": ("int", 14),
    },
    "snapshot": {
        "steps": ("int", 1500),
        "cycles": ("int", 3),
        "batch_size": ("int", 32),
        "peak_lr": ("float", 5e-6),
        "weight_decay": ("float", 0.01),
        "seed": ("int", 15),
    },
    "stacker": {
        "hidden1": ("int", 64),
        "hidden2": ("int", 32),
        "lr": ("float", 0.01),
        "steps": ("int", 400),
        "weight_decay": ("float", 0.0),
        "seed": ("int", 16),
    },
    "models": {
        "specs": ("words", ["m0"]),
    },
}

# per-model override sections ([model.<name>]) may override these keys
_MODEL_KEYS = dict(_SCHEMA["encoder"]) | {"seed": ("int", None)}


def _convert(section: str, key: str, kind: str, raw: str) -> Any:
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "words":
            return [w.strip() for w in raw.split(",") if w.strip()]
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind}") from exc


@dataclass
class RunConfig:
    """Typed view of one configuration file."""

    values: dict[str, dict[str, Any]]
    model_overrides: dict[str, dict[str, Any]]
    source_text: str
    source_path: Optional[Path] = None

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    # -- path helpers --------------------------------------------------

    @property
    def output_dir(self) -> Path:
        return Path(self.get("paths", "output"))

    def path(self, key: str) -> Optional[Path]:
        raw = self.get("paths", key)
        return Path(raw) if raw is not None else None

    @property
    def vocab_path(self) -> Path:
        return self.path("vocab") or self.output_dir / "vocab.txt"

    @property
    def pretrained_path(self) -> Path:
        return self.path("pretrained") or self.output_dir / "pretrained.ckpt"

    # -- section materializers -----------------------------------------

    def encoder_config(self, vocab_size: int, n_classes: int,
                       overrides: Optional[dict[str, Any]] = None) -> EncoderConfig:
        vals = dict(self.values["encoder"])
        if overrides:
            vals.update({k: v for k, v in overrides.items() if k != "seed" and v is not None})
        return EncoderConfig(
            vocab_size=vocab_size, max_len=vals["max_len"], d_model=vals["d_model"],
            n_heads=vals["n_heads"], n_layers=vals["n_layers"], d_ff=vals["d_ff"],
            dropout_rate=vals["dropout"], n_classes=n_classes,
        )

    def masking_config(self) -> MaskingConfig:
        v = self.values["masking"]
        return MaskingConfig(
            select_fraction=v["select_fraction"], mask_fraction=v["mask_fraction"],
            random_fraction=v["random_fraction"], keep_fraction=v["keep_fraction"],
        )

    def train_config(self, section: str) -> TrainConfig:
        v = self.values[section]
        return TrainConfig(
            total_steps=v["steps"], batch_size=v["batch_size"],
            warmup_steps=v.get("warmup_steps", 0), peak_lr=v["peak_lr"],
            weight_decay=v["weight_decay"], seed=v["seed"],
        )

    def stacker_config(self) -> StackerConfig:
        v = self.values["stacker"]
        return StackerConfig(
            hidden1=v["hidden1"], hidden2=v["hidden2"], lr=v["lr"],
            total_steps=v["steps"], weight_decay=v["weight_decay"], seed=v["seed"],
        )

    def model_specs(self) -> list[tuple[str, dict[str, Any], int]]:
        """(name, encoder-key overrides, seed) per configured base model.
        Default seeds are 100 + spec index."""
        out = []
        for i, name in enumerate(self.get("models", "specs")):
            over = dict(self.model_overrides.get(name, {}))
            seed = over.pop("seed", None)
            out.append((name, over, seed if seed is not None else 100 + i))
        return out

    def seeds(self) -> dict[str, int]:
        """Every seed the run may use, for the manifest."""
        seeds = {
            f"{section}.seed": self.values[section]["seed"]
            for section in ("pretrain", "finetune", "filter", "cv", "snapshot", "stacker")
        }
        for name, _, seed in self.model_specs():
            seeds[f"model.{name}.seed"] = seed
        return seeds


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a configuration file.

    Rejects unknown sections/keys and duplicate keys (duplicates are reported
    with their line number by the underlying parser).
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    parser = configparser.ConfigParser(
        strict=True, interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
    )
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc

    values: dict[str, dict[str, Any]] = {}
    model_overrides: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        if section in _SCHEMA:
            schema = _SCHEMA[section]
            bucket = values.setdefault(section, {})
        elif section.startswith("model."):
            schema = _MODEL_KEYS
            bucket = model_overrides.setdefault(section[len("model."):], {})
        else:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
            bucket[key] = _convert(section, key, schema[key][0], raw)

    # apply documented defaults for every omitted key
    for section, schema in _SCHEMA.items():
        bucket = values.setdefault(section, {})
        for key, (_, default) in schema.items():
            bucket.setdefault(key, default)

    cfg = RunConfig(values=values, model_overrides=model_overrides,
                    source_text=text, source_path=path)
    spec_names = cfg.get("models", "specs")
    for name in model_overrides:
        if name not in spec_names:
            raise ConfigError(f"{path}: [model.{name}] has no matching entry in [models] specs")
    return cfg
