from .config import ANS, BOS, EOS, PAD, VOCAB_SIZE, ModelConfig
from .transformer import (
    OTHER,
    QUERY,
    DecodeSession,
    KVCache,
    ModelParams,
    SamplerConfig,
    Span,
    apply_rope,
    decode,
    frozen_forward,
    full_forward_logits,
    grad_wq_span,
    init_params,
    prefill_and_cache,
    rope_rotate,
    span_forward_frozen_kv,
)
from .training import TrainConfig, TrainingDiverged, train_base_model

__all__ = [
    "ANS",
    "BOS",
    "EOS",
    "PAD",
    "VOCAB_SIZE",
    "ModelConfig",
    "OTHER",
    "QUERY",
    "DecodeSession",
    "KVCache",
    "ModelParams",
    "SamplerConfig",
    "Span",
    "apply_rope",
    "decode",
    "frozen_forward",
    "full_forward_logits",
    "grad_wq_span",
    "init_params",
    "prefill_and_cache",
    "rope_rotate",
    "span_forward_frozen_kv",
    "TrainConfig",
    "TrainingDiverged",
    "train_base_model",
]
