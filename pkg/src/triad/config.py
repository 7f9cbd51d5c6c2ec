"""Experiment configuration: a flat record of every knob a run needs.

Configs serialize to a line-oriented ``key:value`` text form; the same
parser backs config files and run-directory snapshots, so a snapshot can
be fed back in to reproduce its run.  Merging follows fixed precedence:
built-in defaults, then a config file, then command-line flags.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

__all__ = [
    "ConfigError", "ExperimentConfig", "ARM_NAMES", "SHIFT_PRESETS",
    "resolve_shift", "parse_config_text", "read_config_file", "save_config",
    "merge_config", "ablation_preset",
]

ARM_NAMES = (
    "pediatric_only",
    "adult_only",
    "joint",
    "pediatric_only_contrastive",
    "adult_only_contrastive",
    "joint_contrastive",
    "triad_full",
)

#: Named domain-shift strengths for the synthetic generator.
SHIFT_PRESETS = {"none": 0.0, "mild": 0.3, "moderate": 0.6, "strong": 1.0}


class ConfigError(ValueError):
    """Invalid configuration value, key, or file."""


@dataclass
class ExperimentConfig:
    # run identity
    arm: str = "triad_full"
    seed: int = 0
    data_seed: int = -1            # -1: reuse `seed`
    run_dir: str = ""              # empty: resolved under the output root

    # optimization
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    folds: int = 4

    # loss hyperparameters
    tau: float = 0.1
    gamma: float = 2.0
    alpha: float = 0.25
    lambda_cls: float = 1.0
    lambda_cont: float = 1.0
    lambda_emb: float = 1.0
    # flips the sign of the pediatric similarity term (comparison variant)
    emb_sim_mixed_sign: bool = False

    # model
    backbone: str = "conv"         # "conv" | "vector"
    embed_dim: int = 16
    hidden_dim: int = 32

    # preprocessing and augmentation
    image_size: int = 32
    pad_fraction: float = 0.0005
    norm_mean: float = 0.0
    norm_std: float = 1.0
    aug_flip: float = 0.5
    aug_brightness: float = 0.2
    aug_contrast: float = 0.2

    # data source: a manifest path, or the synthetic generator
    data_manifest: str = ""
    gen_mode: str = "image"
    gen_n_per_cell: int = 200
    gen_test_per_cell: int = 150
    gen_shift: float = 0.6
    gen_separation: float = 1.0
    gen_noise: float = 0.3
    gen_amp_spread: float = 0.25
    gen_canvas: int = 40
    gen_vector_dim: int = 16

    def __post_init__(self):
        checks = [
            (self.arm in ARM_NAMES,
             f"arm must be one of {ARM_NAMES}, got {self.arm!r}"),
            (self.epochs >= 0, f"epochs must be >= 0, got {self.epochs}"),
            (self.batch_size >= 4 and self.batch_size % 4 == 0,
             f"batch_size must be a positive multiple of 4, got "
             f"{self.batch_size}"),
            (self.lr > 0, f"lr must be > 0, got {self.lr}"),
            (self.weight_decay >= 0,
             f"weight_decay must be >= 0, got {self.weight_decay}"),
            (self.folds >= 1, f"folds must be >= 1, got {self.folds}"),
            (self.tau > 0, f"tau must be > 0, got {self.tau}"),
            (self.gamma >= 0, f"gamma must be >= 0, got {self.gamma}"),
            (0.0 < self.alpha < 1.0,
             f"alpha must be in (0, 1), got {self.alpha}"),
            (self.lambda_cls >= 0 and self.lambda_cont >= 0
             and self.lambda_emb >= 0, "lambda weights must be >= 0"),
            (self.backbone in ("conv", "vector"),
             f"backbone must be conv or vector, got {self.backbone!r}"),
            (self.embed_dim >= 2,
             f"embed_dim must be >= 2, got {self.embed_dim}"),
            (self.hidden_dim >= 1,
             f"hidden_dim must be >= 1, got {self.hidden_dim}"),
            (self.image_size >= 8,
             f"image_size must be >= 8, got {self.image_size}"),
            (self.pad_fraction >= 0,
             f"pad_fraction must be >= 0, got {self.pad_fraction}"),
            (self.norm_std > 0, f"norm_std must be > 0, got {self.norm_std}"),
            (0.0 <= self.aug_flip <= 1.0,
             f"aug_flip must be in [0, 1], got {self.aug_flip}"),
            (self.aug_brightness >= 0 and self.aug_contrast >= 0,
             "augmentation ranges must be >= 0"),
            (self.gen_shift >= 0,
             f"gen_shift must be >= 0, got {self.gen_shift}"),
            (self.gen_amp_spread >= 0,
             f"gen_amp_spread must be >= 0, got {self.gen_amp_spread}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    @property
    def resolved_data_seed(self) -> int:
        return self.seed if self.data_seed < 0 else self.data_seed

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name}:{_format(value)}")
        return "\n".join(lines) + "\n"

    def replace(self, **updates) -> "ExperimentConfig":
        return dataclasses.replace(self, **updates)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, text: str):
    kind = _FIELD_TYPES[name]
    text = text.strip()
    try:
        if kind == "bool":
            lowered = text.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(
            f"config key {name!r}: cannot parse {text!r} as {kind}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key:value`` lines into typed values; ``#`` starts a comment."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key:value, "
                              f"got {line!r}")
        key, value = line.split(":", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key "
                              f"{key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, value)
    return values


def read_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    return parse_config_text(text, source=path)


def save_config(config: ExperimentConfig, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(config.to_text())
    os.replace(tmp, path)


def merge_config(file_values: dict | None = None,
                 flag_values: dict | None = None) -> ExperimentConfig:
    """Build a config with precedence defaults < file < flags."""
    merged: dict = {}
    for layer in (file_values or {}), (flag_values or {}):
        for key, value in layer.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
    return ExperimentConfig(**merged)


def resolve_shift(text: str) -> float:
    """Accept a preset name or a bare number for the shift strength."""
    if text in SHIFT_PRESETS:
        return SHIFT_PRESETS[text]
    try:
        value = float(text)
    except ValueError:
        raise ConfigError(
            f"shift must be a number or one of {sorted(SHIFT_PRESETS)}, "
            f"got {text!r}") from None
    if value < 0:
        raise ConfigError(f"shift must be >= 0, got {value}")
    return value


def ablation_preset(**overrides) -> ExperimentConfig:
    """The desk-scale comparison setup: moderate shift, small budget.

    These values are sized so the full arm ladder (folds x seeds x arms)
    finishes in minutes on one CPU core while leaving clear gaps between
    arms.
    """
    base = dict(
        epochs=10,
        lr=3e-3,
        gen_shift=SHIFT_PRESETS["moderate"],
        gen_n_per_cell=200,
        gen_test_per_cell=150,
        folds=4,
    )
    base.update(overrides)
    return ExperimentConfig(**base)
