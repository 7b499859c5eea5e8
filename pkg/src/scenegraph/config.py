"""Training configuration and its flat ``key=value`` text form."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 6
    max_iterations: int = 500
    lr_decay_factor: float = 10.0
    plateau_patience: int = 3
    max_decays: int = 2
    seed: int = 0
    bigru: bool = True
    transformer: bool = True
    fs_ba: bool = True
    heads: int = 8
    bigru_layers: int = 1
    eval_interval: int = 50
    neg_ratio: int = 3
    d_model: int = 512
    d_ff: int = 2048
    n_blocks: int = 6
    d_fuse: int = 2048

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.heads not in (1, 2, 6, 8):
            raise ConfigError("heads must be one of 1, 2, 6, 8")
        if self.bigru_layers not in (1, 2, 6):
            raise ConfigError("bigru_layers must be one of 1, 2, 6")
        if self.max_decays < 0 or self.plateau_patience < 1 or self.eval_interval < 1:
            raise ConfigError("max_decays >= 0, plateau_patience >= 1 and eval_interval >= 1 required")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_heads=self.heads, d_ff=self.d_ff, n_blocks=self.n_blocks,
                           d_fuse=self.d_fuse, bigru_layers=self.bigru_layers, bigru=self.bigru,
                           transformer=self.transformer, fs_ba=self.fs_ba)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_text(cls, text: str) -> TrainConfig:
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            kw[key] = value
        return cls.from_dict(kw)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(types)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _parse(types[k], v, k) for k, v in d.items()})


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def _parse(type_name: str, value, key: str):
    if not isinstance(value, str):
        return value
    try:
        if type_name == "bool":
            if value.lower() in ("true", "1", "yes", "on"):
                return True
            if value.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if type_name == "int":
            return int(value)
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type_name}") from None
