"""Pretraining corpus of rendered synthetic tasks for the toy base model."""

from __future__ import annotations

from ..numeric import Rng, derive_seed
from ..tasks import ALL_TYPES, gen_code_needle_task, gen_transaction_task, render_task_tokens


def training_corpus(
    n_docs: int,
    ops_range: tuple[int, int] = (4, 16),
    lines_range: tuple[int, int] = (5, 24),
    code_fraction: float = 0.2,
    prompt_style: str = "compact",
    seed: int = 0,
) -> list[list[int]]:
    """Token documents ``prompt ANS answer`` (BOS/EOS framing is added by the trainer).

    Seeds are drawn from a range disjoint from evaluation seeds
    (``derive_seed(seed, ...)`` values are 64-bit, evaluation uses small ints).
    """
    rng = Rng(derive_seed(seed, 0x7EA1))
    docs = []
    for i in range(n_docs):
        task_seed = derive_seed(seed, i)
        if rng.random() < code_fraction:
            task = gen_code_needle_task(rng.integers(lines_range[0], lines_range[1] + 1), task_seed)
        else:
            n_ops = rng.integers(ops_range[0], ops_range[1] + 1)
            task = gen_transaction_task(n_ops, 2, rng.choice(ALL_TYPES), task_seed, allow_wide=True)
        docs.append(list(render_task_tokens(task, prompt_style).tokens[1:-1]))
    return docs
