from dataclasses import dataclass, asdict

from ..errors import ConfigError


@dataclass(frozen=True)
class BlockConfig:
    """Architecture hyperparameters of one transformer stack."""

    model_dim: int
    num_heads: int
    ff_dim: int
    num_layers: int
    max_seq_len: int
    vocab_size: int

    def __post_init__(self):
        for field in ("model_dim", "num_heads", "ff_dim", "max_seq_len", "vocab_size"):
            if getattr(self, field) < 1:
                raise ConfigError(f"BlockConfig.{field} must be positive, got {getattr(self, field)}")
        if self.num_layers < 0:
            raise ConfigError(f"BlockConfig.num_layers must be >= 0, got {self.num_layers}")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BlockConfig":
        return cls(**data)
