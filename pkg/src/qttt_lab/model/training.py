"""Full-parameter next-token pretraining of the base model."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from ..numeric import Rng
from .config import BOS, EOS, PAD, ModelConfig
from .transformer import ModelParams, forward_full, init_params

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    seq_len: int = 256
    batch_size: int = 4
    lr: float = 3e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    warmup_steps: int = 50
    tail_fraction: float = 0.5  # share of windows that end at the document end
    seed: int = 0


def lr_at(step: int, steps: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / max(1, steps - cfg.warmup_steps)
    return cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * progress)))


def sample_batch(corpus: Sequence[Sequence[int]], cfg: TrainConfig, rng: Rng) -> torch.Tensor:
    """``(B, seq_len + 1)`` windows; each document is framed as BOS ... EOS, padded with PAD."""
    n = cfg.seq_len + 1
    rows = []
    for _ in range(cfg.batch_size):
        doc = [BOS, *corpus[rng.integers(0, len(corpus))], EOS]
        if len(doc) <= n:
            window = doc + [PAD] * (n - len(doc))
        elif rng.random() < cfg.tail_fraction:
            window = doc[-n:]
        else:
            start = rng.integers(0, len(doc) - n + 1)
            window = doc[start : start + n]
        rows.append(window)
    return torch.tensor(rows, dtype=torch.long)


def batch_loss(params: ModelParams, batch: torch.Tensor) -> torch.Tensor:
    logits, *_ = forward_full(params, batch[:, :-1])
    targets = batch[:, 1:]
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=PAD
    )


def train_base_model(
    config: ModelConfig,
    corpus: Sequence[Sequence[int]],
    steps: int,
    optimizer_config: TrainConfig = TrainConfig(),
    init_seed: int | None = None,
) -> ModelParams:
    """Train every parameter with AdamW on random corpus windows.

    ``steps == 0`` returns the initialization untouched.  The per-step loss
    history and final loss are stored in ``params.metadata``.
    """
    if not corpus or not any(len(doc) for doc in corpus):
        raise ValueError("corpus is empty")
    cfg = optimizer_config
    seed = cfg.seed if init_seed is None else init_seed
    params = init_params(config, seed)
    if steps == 0:
        return params
    leaves = {n: t.clone().requires_grad_(True) for n, t in params.tensors.items()}
    work = ModelParams(config, leaves)
    decay = [t for n, t in leaves.items() if t.ndim == 2]
    no_decay = [t for n, t in leaves.items() if t.ndim != 2]
    opt = torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
    )
    rng = Rng(cfg.seed).spawn(1)
    losses = []
    for step in range(steps):
        for g in opt.param_groups:
            g["lr"] = lr_at(step, steps, cfg)
        batch = sample_batch(corpus, cfg, rng)
        loss = batch_loss(work, batch)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(list(leaves.values()), cfg.grad_clip)
        opt.step()
        losses.append(value)
        if step % 50 == 0 or step == steps - 1:
            log.info("step %d loss %.4f", step, value)
    tail = losses[-min(20, len(losses)) :]
    metadata = {
        "init_seed": int(seed),
        "train_steps": int(steps),
        "train_config": asdict(cfg),
        "loss_first": losses[0],
        "final_loss": sum(tail) / len(tail),
        "losses": losses,
    }
    tensors = {n: t.detach().clone() for n, t in leaves.items()}
    return ModelParams(config, tensors, metadata)
