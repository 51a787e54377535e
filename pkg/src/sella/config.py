"""Run configuration: every knob of the pipeline with documented defaults.

Configs load from plain key=value files (one pair per line, `#` comments)
and can be overridden key-by-key from the command line.  Unknown keys are
rejected rather than ignored so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    """All pipeline hyperparameters.

    Data fields describe the synthetic generator; `data_dir` (when set)
    points at an ingested/saved dataset directory and takes precedence.
    Epoch counts and batch sizes are this implementation's defaults — they
    are recorded in run manifests, not inherited from any reference setup.
    """

    # data: either a directory or a synthetic spec
    data_dir: str = ""
    n_users: int = 200
    n_items: int = 300
    rank: int = 4
    density: float = 0.05
    noise: float = 0.1
    cold_frac: float = 0.08

    # backbone
    d_l: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 256
    lora_r: int = 8
    lora_alpha: float = 16.0

    # stage 1: task adaptation (LoRA only)
    stage1_lr: float = 1e-3
    stage1_epochs: int = 12
    stage1_batch: int = 32
    stage1_patience: int = 5

    # stage 2: collaborative training with contrastive pre-alignment
    stage2_lr: float = 1e-3
    stage2_epochs: int = 200
    stage2_batch: int = 256
    stage2_patience: int = 25
    stage2_weight_decay: float = 3.0
    d_c: int = 32
    lam: float = 0.1
    tau: float = 0.07

    # stage 3: hybrid projection training through the frozen backbone
    stage3_lr: float = 1e-4
    stage3_epochs: int = 8
    stage3_batch: int = 32
    stage3_patience: int = 5

    # prompts, seeding, artifacts
    k_history: int = 10
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        if self.d_l % self.n_heads:
            raise ConfigError(
                f"d_l {self.d_l} not divisible by n_heads {self.n_heads}")
        for name in ("n_users", "n_items", "rank", "d_l", "n_layers",
                     "n_heads", "max_len", "lora_r", "d_c", "k_history",
                     "stage1_epochs", "stage2_epochs", "stage3_epochs",
                     "stage1_batch", "stage2_batch", "stage3_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("stage1_lr", "stage2_lr", "stage3_lr", "tau"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lam < 0 or self.stage2_weight_decay < 0:
            raise ConfigError("lam and stage2_weight_decay must be >= 0")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key].type
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"config key {key}: {e}") from e
    return raw


def apply_overrides(config: RunConfig, overrides: dict[str, str]
                    ) -> RunConfig:
    """New config with string overrides coerced onto `config`."""
    unknown = sorted(set(overrides) - set(_FIELDS))
    if unknown:
        raise ConfigError(
            f"unknown config keys: {', '.join(unknown)}; valid keys: "
            + ", ".join(sorted(_FIELDS)))
    coerced = {k: _coerce(k, v) for k, v in overrides.items()}
    return dataclasses.replace(config, **coerced)


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    """Parse a key=value file on top of `base` (or the defaults)."""
    pairs: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key=value, "
                                  f"got {text!r}")
            key, value = (part.strip() for part in text.split("=", 1))
            pairs[key] = value
    return apply_overrides(base if base is not None else RunConfig(), pairs)


def config_dict(config: RunConfig) -> dict:
    """Plain dict for manifests (stable key order)."""
    return {f.name: getattr(config, f.name) for f in fields(RunConfig)}
