"""Model configuration and the BERT-size presets."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

ENCODER_CHANNELS = (64, 128, 256, 512)

# name: (blocks, heads, hidden)
PRESETS = {
    "tiny": (2, 2, 128),
    "mini": (4, 4, 256),
    "medium": (6, 8, 512),
    "base": (12, 12, 768),
    "roberta_base": (12, 12, 768),
}


@dataclass(frozen=True)
class EncoderConfig:
    hidden: int
    block_channels: tuple[int, ...] = ENCODER_CHANNELS
    input_mels: int = 64
    dropout: float = 0.2

    def __post_init__(self):
        chans = tuple(self.block_channels)
        if len(chans) != 4 or any(b <= a for a, b in zip(chans, chans[1:])):
            raise ValueError(f"encoder needs 4 strictly increasing block widths, got {chans}")
        object.__setattr__(self, "block_channels", chans)


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int
    num_heads: int
    hidden: int
    vocab_size: int
    ffn_dim: int = 0  # 0 -> 4 * hidden
    max_len: int = 50
    max_positions: int = 512
    dropout: float = 0.2
    preset: str = "custom"
    encoder_channels: tuple[int, ...] = field(default=ENCODER_CHANNELS)

    def __post_init__(self):
        if self.hidden % self.num_heads:
            raise ValueError(f"hidden {self.hidden} not divisible by {self.num_heads} heads")
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden)
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))

    @classmethod
    def from_preset(cls, name: str, vocab_size: int, **overrides) -> "ModelConfig":
        """Preset shape plus overrides; overriding the shape relabels it "custom"."""
        try:
            blocks, heads, hidden = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
        shape = {"num_blocks": blocks, "num_heads": heads, "hidden": hidden}
        changed = any(k in overrides and overrides[k] != v for k, v in shape.items())
        fields = {**shape, "preset": "custom" if changed else name, **overrides}
        return cls(vocab_size=vocab_size, **fields)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.hidden, self.encoder_channels, dropout=self.dropout)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "encoder_channels": tuple(d.get("encoder_channels", ENCODER_CHANNELS))})

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)
