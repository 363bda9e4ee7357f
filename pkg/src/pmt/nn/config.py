from __future__ import annotations

from dataclasses import asdict, dataclass, fields


def _from_dict(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class ModelConfig:
    """Transformer dimensions: embedding D, feed-forward H, layers L, heads A."""

    D: int = 128
    H: int = 256
    L: int = 4
    A: int = 4
    V_out: int = 100
    dropout: float = 0.1
    # uniform init bound is init_scale / sqrt(fan_in)
    init_scale: float = 1.0
    # standard deviation of the uniform spatial-embedding init; None means 1/sqrt(D)
    embedding_init_std: float | None = None

    def __post_init__(self):
        for name in ("D", "H", "L", "A", "V_out"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.D % self.A:
            raise ValueError(f"D={self.D} is not divisible by A={self.A}")
        if self.D % 8:
            raise ValueError(f"D={self.D} must be a multiple of 8 for the temporal encoding")
        if self.embedding_init_std is not None and not self.embedding_init_std > 0:
            raise ValueError("embedding_init_std must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def vocab_size(self) -> int:
        """Input rows: regions plus MISSING and MASK."""
        return self.V_out + 2

    @property
    def missing_token(self) -> int:
        return self.V_out

    @property
    def mask_token(self) -> int:
        return self.V_out + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return _from_dict(cls, data)


@dataclass(frozen=True)
class TrainingConfig:
    label_smoothing: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-9
    warmup_steps: int = 1000
    c: float = 1.0
    lr_cap: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    schedule: str = "damped_warmup"
    # None trains on whole sequences; otherwise on chunks of this many inputs
    context_length: int | None = None
    mask_prob: float = 0.5
    eval_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not self.lr_cap > 0:
            raise ValueError("lr_cap must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.schedule not in ("damped_warmup", "standard"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.context_length is not None and self.context_length < 1:
            raise ValueError("context_length must be >= 1")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        return _from_dict(cls, data)
