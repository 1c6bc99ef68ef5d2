"""Query-only test-time training against a single frozen prefill cache."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import torch

from ..model import KVCache, ModelParams, Span, prefill_and_cache, span_forward_frozen_kv
from ..numeric import Rng

log = logging.getLogger(__name__)

OPTIMIZERS = ("adamw", "sgd")


@dataclass(frozen=True)
class AdaptationConfig:
    n_steps: int = 32
    span_len: int = 128
    lr: float = 1e-5
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.span_len < 1:
            raise ValueError("span_len must be >= 1")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")

    @classmethod
    def from_dict(cls, data: dict) -> "AdaptationConfig":
        return cls(**data)


@dataclass
class StepRecord:
    step: int
    span_start: int
    span_len: int
    loss_before: float
    loss_after: float
    grad_norm: float
    cache_fingerprint: str


@dataclass
class AdaptationTrace:
    """Per-step evidence of one adaptation run.

    JSON form (``to_json``)::

        {"config": {...AdaptationConfig...},
         "context_len": int,
         "initial_fingerprint": "<sha256 hex>",
         "aborted": bool,
         "steps": [{"step", "span_start", "span_len", "loss_before",
                    "loss_after", "grad_norm", "cache_fingerprint"}, ...]}
    """

    config: AdaptationConfig
    context_len: int
    initial_fingerprint: str
    steps: list[StepRecord] = field(default_factory=list)
    aborted: bool = False

    def __len__(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "context_len": self.context_len,
            "initial_fingerprint": self.initial_fingerprint,
            "aborted": self.aborted,
            "steps": [asdict(s) for s in self.steps],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> "AdaptationTrace":
        return cls(
            config=AdaptationConfig.from_dict(data["config"]),
            context_len=data["context_len"],
            initial_fingerprint=data["initial_fingerprint"],
            steps=[StepRecord(**s) for s in data["steps"]],
            aborted=data["aborted"],
        )

    @classmethod
    def from_json(cls, text: str) -> "AdaptationTrace":
        return cls.from_dict(json.loads(text))

    def losses(self) -> list[float]:
        return [s.loss_before for s in self.steps]


class AdaptationDiverged(RuntimeError):
    """Span loss went non-finite; carries the last finite parameters and the trace."""

    def __init__(self, params: ModelParams, trace: AdaptationTrace, step: int):
        super().__init__(f"span loss became non-finite at step {step}")
        self.params = params
        self.trace = trace
        self.step = step


def sample_span(rng: Rng, T: int, k: int) -> Span:
    """Uniform start over the legal range ``[1, T - k]``."""
    return Span(rng.integers(1, T - k + 1), k)


def _make_optimizer(cfg: AdaptationConfig, leaves: list[torch.Tensor]):
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(
            leaves, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
        )
    return torch.optim.SGD(leaves, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _assemble(params: ModelParams, query: dict[str, torch.Tensor]) -> ModelParams:
    tensors = {
        n: (query[n].detach().clone() if n in query else t.detach().clone())
        for n, t in params.tensors.items()
    }
    return ModelParams(params.config, tensors, dict(params.metadata))


def run_qttt(
    params: ModelParams,
    tokens,
    config: AdaptationConfig,
    cache: KVCache | None = None,
) -> tuple[ModelParams, AdaptationTrace]:
    """Adapt only the query projections on random context spans.

    A single prefill produces the cache (or ``cache`` is reused if given);
    optimizer state is fresh for every call.
    """
    tok = torch.as_tensor(tokens, dtype=torch.long)
    T = tok.numel()
    k = config.span_len
    if T < k + 1:
        raise ValueError(f"context of {T} tokens is too short for spans of {k}")
    if cache is None:
        cache = prefill_and_cache(params, tok)
    elif cache.T != T:
        raise ValueError(f"cache holds {cache.T} positions, context has {T}")

    trace = AdaptationTrace(config, T, cache.fingerprint)
    if config.n_steps == 0:
        return params.clone(), trace

    rng = Rng(config.seed)
    leaves = {n: params[n].detach().clone().requires_grad_(True) for n in params.query_names()}
    opt = _make_optimizer(config, list(leaves.values()))
    for step in range(config.n_steps):
        span = sample_span(rng, T, k)
        loss, _ = span_forward_frozen_kv(params, cache, tok, span, weights=leaves)
        loss_value = float(loss.detach())
        if not math.isfinite(loss_value):
            trace.aborted = True
            raise AdaptationDiverged(_assemble(params, leaves), trace, step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = float(torch.nn.utils.clip_grad_norm_(list(leaves.values()), config.grad_clip))
        snapshot = {n: t.detach().clone() for n, t in leaves.items()}
        opt.step()
        with torch.no_grad():
            after, _ = span_forward_frozen_kv(params, cache, tok, span, weights=leaves)
        after_value = float(after)
        if not math.isfinite(after_value):
            trace.aborted = True
            raise AdaptationDiverged(_assemble(params, snapshot), trace, step)
        trace.steps.append(
            StepRecord(
                step=step,
                span_start=span.start,
                span_len=span.length,
                loss_before=loss_value,
                loss_after=after_value,
                grad_norm=grad_norm,
                cache_fingerprint=cache.current_fingerprint(),
            )
        )
        log.debug("qttt step %d span %d loss %.4f -> %.4f", step, span.start, loss_value, after_value)
    return _assemble(params, leaves), trace
