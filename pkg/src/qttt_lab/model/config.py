from __future__ import annotations

from dataclasses import asdict, dataclass

# byte-level vocabulary: 0..255 are raw bytes, then four specials
N_BYTES = 256
PAD = 256
BOS = 257
EOS = 258
ANS = 259  # answer marker; the token after it starts the answer
VOCAB_SIZE = 260


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    mlp_ratio: int = 4
    vocab: int = VOCAB_SIZE
    rope_enabled: bool = True
    max_T: int = 4096
    rope_base: float = 10000.0
    tied_embeddings: bool = False
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("need at least one layer and one head")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be >= 1")
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.d_head % 2:
            raise ValueError(f"head dim {self.d_head} must be even for rotary embeddings")
        if self.tied_embeddings:
            raise ValueError("tied embeddings are not supported; unembed is a separate tensor")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return self.mlp_ratio * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)

    def replace(self, **changes) -> "ModelConfig":
        data = self.to_dict()
        data.update(changes)
        return ModelConfig(**data)
