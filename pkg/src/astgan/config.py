"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

REGIMES = ("mle", "gan", "gan_pretrain")
RATES = ("dropout", "dis_dropout", "dis_unk_rate")  # keys that may be 0


class ConfigError(ValueError):
    pass


def asset(name: str) -> str:
    return str(resources.files("astgan") / "assets" / name)


@dataclass
class Config:
    hidden_size: int = 128
    embed_size: int = 64
    beam_width: int = 5
    max_steps: int = 200
    max_input_len: int = 40
    min_freq: int = 2
    batch_size: int = 16
    d_batch_size: int = 32
    lr_gen: float = 3e-3
    lr_dis: float = 1e-3
    lr_pg: float = 1e-4
    epochs: int = 60  # MLE epochs of the mle regime
    pretrain_epochs: int = 30  # MLE epochs before adversarial training in gan_pretrain
    d_pretrain_steps: int = 1000
    gan_epochs: int = 10
    g_steps: int = 1
    d_steps: int = 1
    regime: str = "mle"
    seed: int = 0
    dis_encoder: str = "tree"
    readout: str = "attentional"
    dropout: float = 0.3  # generator dropout during MLE updates
    dis_dropout: float = 0.3
    dis_unk_rate: float = 0.25  # shared-token masking while training D
    grammar: str = ""
    train: str = ""
    dev: str = ""
    metrics: str = "metrics.tsv"

    def __post_init__(self):
        self.grammar = self.grammar or asset("jobs.grammar")
        self.train = self.train or asset("train.jsonl")
        self.dev = self.dev or asset("dev.jsonl")

    def validate(self) -> "Config":
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and f.name not in ("seed",) + RATES and not v > 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")
        for key in RATES:
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError(f"{key} must lie in [0, 1), got {getattr(self, key)}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {', '.join(REGIMES)}, got {self.regime!r}")
        if self.dis_encoder not in ("tree", "sequence"):
            raise ConfigError(f"dis_encoder must be 'tree' or 'sequence', got {self.dis_encoder!r}")
        if self.readout not in ("state", "attentional"):
            raise ConfigError(f"readout must be 'state' or 'attentional', got {self.readout!r}")
        return self

    def set(self, key: str, raw: str) -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            value = {"int": int, "float": float, "str": str}[types[key]](raw.strip())
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw.strip()!r} as {types[key]}") from None
        setattr(self, key, value)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d) -> "Config":
        cfg = cls()
        for k, v in d.items():
            cfg.set(k, str(v))
        return cfg


def parse_config(text: str, base: Config | None = None) -> Config:
    cfg = base or Config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        try:
            cfg.set(key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path) -> Config:
    return parse_config(Path(path).read_text(encoding="utf-8"))
