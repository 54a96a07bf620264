"""Flat ``key = value`` run configuration files.

Lines are ``key = value``; ``#`` starts a comment; blank values mean "unset"
for the path keys. Unknown keys are rejected. Relative paths resolve against
the directory holding the config file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import get_type_hints

from .model import ConfigError, ModelConfig
from .tokenizer import TOKENIZER_MODES

PATH_KEYS = ("vocab", "corpus", "couplet_first", "couplet_second", "checkpoint_in", "checkpoint_out", "loss_log")


@dataclass
class RunConfig:
    # model
    embed_size: int = 768
    num_heads: int = 12
    head_size: int = 64
    hidden_size: int = 768
    ffn_size: int = 3072
    num_layers: int = 12
    max_seq_len: int = 128
    vocab_size: int = 30522
    variant: str = "psdp"
    # training
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 8
    steps: int = 1000
    checkpoint_interval: int = 500
    min_words: int = 10
    tokenizer: str = "wordpiece"
    # sampling
    k: int = 10
    retries: int = 3
    max_new_tokens: int = 100
    temperature: float = 1.0
    # paths
    vocab: str | None = None
    corpus: str | None = None
    couplet_first: str | None = None
    couplet_second: str | None = None
    checkpoint_in: str | None = None
    checkpoint_out: str | None = None
    loss_log: str | None = None
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            embed_size=self.embed_size, num_heads=self.num_heads, head_size=self.head_size,
            hidden_size=self.hidden_size, ffn_size=self.ffn_size, num_layers=self.num_layers,
            max_seq_len=self.max_seq_len, vocab_size=self.vocab_size, variant=self.variant,
        )

    def validate(self) -> None:
        self.model_config()
        if self.tokenizer not in TOKENIZER_MODES:
            raise ConfigError(f"tokenizer must be one of {TOKENIZER_MODES}, got {self.tokenizer!r}")
        for name in ("batch_size", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("steps", "retries", "max_new_tokens", "checkpoint_interval", "min_words"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if value is None else value}")
        return "\n".join(lines) + "\n"


_TYPES = get_type_hints(RunConfig)


def _convert(key: str, raw: str, base: Path | None):
    kind = _TYPES[key]
    if key in PATH_KEYS:
        if raw == "":
            return None
        path = Path(os.path.expanduser(raw))
        if base is not None and not path.is_absolute():
            path = base / path
        return str(path)
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None
    return raw


def parse_config(text: str, base: Path | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw, base)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def shipped_configs() -> list[str]:
    root = resources.files("psdp") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".conf"))


def resolve_config_path(name_or_path: str) -> Path:
    """A filesystem path, or the name of a config shipped with the package."""
    path = Path(name_or_path)
    if path.is_file():
        return path
    shipped = resources.files("psdp") / "configs" / f"{name_or_path}.conf"
    if shipped.is_file():
        return Path(str(shipped))
    raise ConfigError(f"no config file {name_or_path!r} (shipped: {', '.join(shipped_configs())})")


def load_config(name_or_path: str) -> RunConfig:
    path = resolve_config_path(name_or_path)
    return parse_config(path.read_text(encoding="utf-8"), base=path.parent.resolve())
