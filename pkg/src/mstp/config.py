"""Flat key=value run configuration.

One RunConfig drives everything: generation, model construction, both
training stages, and evaluation. Files are line oriented `key=value` with
`#` comments; unknown keys are rejected by name, and the resolved config
(every accepted key) is echoed into each run directory for provenance.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional

from .errors import ConfigError


@dataclasses.dataclass
class RunConfig:
    seed: int = 0

    # dataset geometry
    volume_extent: int = 48
    spacing_mm: float = 1.5
    n_train: int = 200
    n_val: int = 0
    n_test: int = 50

    # model
    patch_extent: int = 32
    base_channels: int = 4
    depth: int = 3
    token_dim: int = 64
    n_classes: int = 4            # tumor classes + background
    attn_dim: int = 16
    prompt_dim: int = 64
    vocab_size: int = 512

    # mixture of experts
    moe_rank: int = 4
    moe_alpha: float = 8.0
    moe_k: int = 2
    moe_k1: int = 2
    moe_k2: int = 4

    # component toggles
    use_tp: bool = True
    use_ap: bool = True
    use_dmoe: bool = True

    # schedule
    pretrain_epochs: int = 40
    finetune_epochs: int = 20
    batch_size: int = 4
    tumor_patch_prob: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_ce: float = 1.0

    # optional file paths (empty string = unset)
    prompts_path: str = ""
    embeddings_path: str = ""

    def validate(self) -> "RunConfig":
        if self.patch_extent % (2 ** self.depth) != 0:
            raise ConfigError(
                f"patch_extent {self.patch_extent} must be divisible by 2^depth = {2 ** self.depth}"
            )
        if self.n_classes < 2:
            raise ConfigError("n_classes counts background plus at least one tumor class")
        if not (1 <= self.moe_k <= self.moe_k1 + self.moe_k2):
            raise ConfigError(f"moe_k {self.moe_k} out of range for pool size {self.moe_k1 + self.moe_k2}")
        if self.moe_k > self.moe_k2:
            raise ConfigError(f"moe_k {self.moe_k} exceeds the generic expert count {self.moe_k2}")
        if not (1 <= self.moe_rank < self.token_dim):
            raise ConfigError(f"moe_rank must lie in [1, token_dim), got {self.moe_rank}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not (0.0 <= self.tumor_patch_prob <= 1.0):
            raise ConfigError("tumor_patch_prob must lie in [0, 1]")
        if self.patch_extent > self.volume_extent:
            raise ConfigError(
                f"patch_extent {self.patch_extent} exceeds volume_extent {self.volume_extent}"
            )
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw: str):
    field = _FIELDS[name]
    raw = raw.strip()
    if field.type in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {name!r}: expected a boolean, got {raw!r}")
    try:
        if field.type in ("int", int):
            return int(raw)
        if field.type in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        setattr(cfg, key, _parse_value(key, value))
    return cfg


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config(text, base)


def config_text(cfg: RunConfig) -> str:
    """Canonical serialization: every accepted key, in declaration order."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def write_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(config_text(cfg))
