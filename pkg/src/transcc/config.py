"""Flat run configuration: one key-value document covering the model, the
training regimen, dataset generation, and paths. Files are JSON objects with
exactly these keys (any subset); unknown keys are rejected so typos fail fast.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from transcc.losses import LossWeights
from transcc.model import ModelConfig
from transcc.trainer import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    """Every tunable in one flat namespace; defaults are the published
    full-scale setting. image_size feeds both the network input size and the
    generated sample size, so the two can never drift apart."""

    # model
    image_size: int = 256
    base_channels: int = 64
    stage_channels: tuple = (64, 128, 256, 512)
    attention_heads: int = 8
    middle_blocks: int = 1
    projection_dim: int = 512
    width_multiplier: float = 1.0
    # optimization
    epochs: int = 200
    initial_lr: float = 1e-3
    decay_start_epoch: int = 100
    batch_size: int = 1
    checkpoint_interval: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    # loss weights
    w_achromatic: float = 0.1
    w_edge: float = 1.0
    w_l1: float = 1.0
    w_mae: float = 1.0
    w_surf_sim: float = 1.0
    w_contrastive: float = 1.0
    # contrastive and patch sampling
    tau: float = 0.07
    negatives_per_anchor: int = 16
    anchors_per_image: int = 64
    patches_per_image: int = 2
    # data generation
    count: int = 100
    mask_fraction: float = 0.25
    train_ratio: float = 0.7
    val_ratio: float = 0.2
    test_ratio: float = 0.1
    # randomness and paths
    seed: int = 0
    data_dir: str | None = None
    out_dir: str | None = None

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=self.image_size,
            base_channels=self.base_channels,
            stage_channels=tuple(self.stage_channels),
            attention_heads=self.attention_heads,
            middle_blocks=self.middle_blocks,
            projection_dim=self.projection_dim,
            width_multiplier=self.width_multiplier,
        )

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            initial_lr=self.initial_lr,
            decay_start_epoch=self.decay_start_epoch,
            batch_size=self.batch_size,
            image_size=self.image_size,
            loss_weights=LossWeights(
                achromatic=self.w_achromatic,
                edge=self.w_edge,
                l1=self.w_l1,
                mae=self.w_mae,
                surf_sim=self.w_surf_sim,
                contrastive=self.w_contrastive,
            ),
            tau=self.tau,
            negatives_per_anchor=self.negatives_per_anchor,
            anchors_per_image=self.anchors_per_image,
            patches_per_image=self.patches_per_image,
            seed=self.seed,
            checkpoint_interval=self.checkpoint_interval,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_epsilon=self.adam_epsilon,
        )

    def ratios(self) -> tuple[float, float, float]:
        return (self.train_ratio, self.val_ratio, self.test_ratio)

    def validated(self) -> "RunConfig":
        """Run every derived-config constructor so a bad value fails here,
        before any work starts."""
        self.to_model_config()
        self.to_train_config()
        if self.count < 1:
            raise ValueError(f"count must be positive, got {self.count}")
        if not 0 <= self.mask_fraction <= 1:
            raise ValueError(f"mask_fraction must lie in [0, 1], got {self.mask_fraction}")
        for name in ("train_ratio", "val_ratio", "test_ratio"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw):
    """Coerce a JSON value or override string to the field's declared type."""
    if name not in _FIELDS:
        known = ", ".join(sorted(_FIELDS))
        raise ValueError(f"unknown config key {name!r}; known keys: {known}")
    if name in ("data_dir", "out_dir"):
        return None if raw in (None, "") else str(raw)
    try:
        if name == "stage_channels":
            if isinstance(raw, str):
                raw = raw.split(",")
            return tuple(int(v) for v in raw)
        default = _FIELDS[name].default
        if isinstance(default, int):
            value = int(raw) if not isinstance(raw, str) else int(raw, 10)
            if isinstance(raw, float) and raw != value:
                raise ValueError("fractional value")
            return value
        if isinstance(default, float):
            return float(raw)
        return raw
    except (TypeError, ValueError):
        raise ValueError(f"config key {name!r} cannot take the value {raw!r}") from None


def from_mapping(mapping: dict) -> RunConfig:
    values = {name: _coerce(name, raw) for name, raw in mapping.items()}
    return RunConfig(**values).validated()


def load_run_config(path) -> RunConfig:
    """Read a JSON run-config file, rejecting unknown keys."""
    path = Path(path)
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(document, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return from_mapping(document)


def apply_overrides(config: RunConfig, overrides) -> RunConfig:
    """Apply KEY=VALUE strings on top of a config; values are coerced to the
    field's type and the result is re-validated."""
    updates = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValueError(f"override {item!r} is not of the form KEY=VALUE")
        updates[key] = _coerce(key, value)
    return dataclasses.replace(config, **updates).validated()


def save_run_config(config: RunConfig, path) -> None:
    doc = dataclasses.asdict(config)
    doc["stage_channels"] = list(doc["stage_channels"])
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
