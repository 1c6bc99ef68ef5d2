"""Attention-mass measurement, dilution curves and compute-matched condition sweeps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .flops import FlopModel, gen_flops, qttt_partial_flops
from .model import ANS, EOS, DecodeSession, KVCache, ModelParams, SamplerConfig, frozen_forward, prefill_and_cache
from .numeric import Rng, derive_seed, softmax_row
from .qttt import AdaptationConfig, AdaptationTrace, run_qttt
from .tasks import TaskRecord, record_from_task, render_task_tokens, score_answer

MASS_CLIP = 1e-15


# -- attention mass ------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionMassReport:
    """Target mass per (layer, head, output step) and its aggregate."""

    cells: np.ndarray  # (layers, heads, steps)
    target_indices: frozenset[int]

    @property
    def mean(self) -> float:
        return float(self.cells.mean())

    @property
    def std(self) -> float:
        return float(self.cells.std())

    @property
    def margin_mean(self) -> float:
        """Mean over cells of the logit of the target mass."""
        m = np.clip(self.cells, MASS_CLIP, 1.0 - MASS_CLIP)
        return float(np.mean(np.log(m) - np.log1p(-m)))

    def per_layer(self) -> np.ndarray:
        return self.cells.mean(axis=(1, 2))


@torch.no_grad()
def attention_mass(
    params: ModelParams,
    cache: KVCache,
    tokens,
    target_indices: Iterable[int],
    output_steps: Sequence[int],
) -> AttentionMassReport:
    """Summed attention on ``target_indices`` from the queries at ``output_steps``.

    ``output_steps`` are cache positions whose outputs emit answer tokens.  A
    query at position ``p`` sees positions ``<= p``, so targets after ``p``
    contribute nothing at that step.
    """
    targets = sorted(set(int(i) for i in target_indices))
    if not targets:
        raise ValueError("empty target set")
    if targets[0] < 0 or targets[-1] >= cache.T:
        raise ValueError(f"target indices must lie in [0, {cache.T})")
    steps = [int(s) for s in output_steps]
    if not steps:
        raise ValueError("no output steps")
    _, attn = frozen_forward(params, cache, tokens, steps, return_attn=True)
    idx = torch.tensor(targets)
    cells = torch.stack([w[:, :, idx].sum(-1) for w in attn])  # (L, H, P)
    return AttentionMassReport(cells.numpy().copy(), frozenset(targets))


def answer_mass(
    params: ModelParams,
    task,
    prompt_style: str = "compact",
    cache_params: ModelParams | None = None,
) -> AttentionMassReport:
    """Needle mass at the answer-emission steps with the reference answer fed in.

    The sequence is ``prompt + answer + EOS``; the steps are the answer marker
    and every answer token, i.e. the positions whose outputs emit the answer.
    Keys and values come from one prefill with ``cache_params`` (default
    ``params``), so comparing adapted against original weights over the same
    frozen cache isolates the effect of the query projections.
    """
    rendered = render_task_tokens(record_from_task(task), prompt_style)
    if not rendered.target_positions:
        raise ValueError("task has no needle (clean log)")
    tokens = list(rendered.tokens)
    cache = prefill_and_cache(cache_params or params, tokens)
    steps = range(rendered.answer_marker_position, len(tokens) - 1)
    return attention_mass(params, cache, tokens, rendered.target_positions, steps)


@dataclass(frozen=True)
class SweepPoint:
    config: AdaptationConfig
    n: int
    loss_fell: int  # instances whose last-quarter span loss is below the first quarter
    mass_held: int  # instances whose needle mass after adaptation is >= before
    mean_mass_change: float

    def row(self) -> dict:
        return {
            "lr": self.config.lr,
            "span_len": self.config.span_len,
            "n_steps": self.config.n_steps,
            "n": self.n,
            "loss_fell": self.loss_fell,
            "mass_held": self.mass_held,
            "mean_mass_change": self.mean_mass_change,
        }


def adaptation_sweep(
    params: ModelParams, tasks: Sequence, configs: Sequence[AdaptationConfig], prompt_style: str = "compact"
) -> list[SweepPoint]:
    """Score each adaptation config by span-loss descent and needle-mass change.

    Used to pick a learning rate for a given base model; tasks must carry a
    needle (no clean logs).
    """
    before = [answer_mass(params, t, prompt_style).mean for t in tasks]
    out = []
    for cfg in configs:
        fell = held = 0
        changes = []
        for task, m0 in zip(tasks, before):
            context = list(render_task_tokens(record_from_task(task), prompt_style).prompt_tokens[:-1])
            adapted, trace = run_qttt(params, context, cfg)
            losses = trace.losses()
            q = max(1, len(losses) // 4)
            fell += float(np.mean(losses[-q:])) < float(np.mean(losses[:q]))
            m1 = answer_mass(adapted, task, prompt_style, cache_params=params).mean
            held += m1 >= m0
            changes.append(m1 - m0)
        out.append(SweepPoint(cfg, len(tasks), fell, held, float(np.mean(changes))))
    return out


# -- dilution ------------------------------------------------------------------------


@dataclass(frozen=True)
class DilutionPoint:
    T: int
    m: int
    mass_mean: float
    mass_max: float
    bound: float


def dilution_sweep(
    T_values: Sequence[int], c: float, delta: float, trials: int = 16, seed: int = 0
) -> list[DilutionPoint]:
    """Needle mass with ``ceil(c T)`` near-tie distractors versus ``1 / (1 + m e^-delta)``.

    Logits: needle 0, near ties uniform in ``[-delta, 0]``, the remaining
    distractors uniform in ``[-delta - 8, -delta - 1)``.
    """
    if not 0 < c <= 1:
        raise ValueError("c must lie in (0, 1]")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    out = []
    for T in T_values:
        if T < 2:
            raise ValueError("T must be >= 2")
        m = min(math.ceil(c * T), T - 1)
        gen = Rng(derive_seed(seed, T)).numpy()
        masses = []
        for _ in range(trials):
            z = np.empty(T)
            z[0] = 0.0
            z[1 : m + 1] = -delta * gen.random(m)
            z[m + 1 :] = -delta - 1.0 - 7.0 * gen.random(T - 1 - m)
            masses.append(softmax_row(z)[0])
        out.append(
            DilutionPoint(T, m, float(np.mean(masses)), float(np.max(masses)), 1.0 / (1.0 + m * math.exp(-delta)))
        )
    return out


# -- conditions ----------------------------------------------------------------------

IN_CONTEXT, THINKING, QTTT, BON = "in_context", "thinking", "qttt", "bon"
MATCH_TOLERANCE = 0.05


class BudgetMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Condition:
    kind: str
    think_tokens: int = 0
    n_samples: int = 1
    adaptation: AdaptationConfig | None = None
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in (IN_CONTEXT, THINKING, QTTT, BON):
            raise ValueError(f"unknown condition {self.kind!r}")
        if self.kind == QTTT and self.adaptation is None:
            raise ValueError("qttt condition needs an adaptation config")
        if self.kind == BON and self.n_samples < 1:
            raise ValueError("bon needs n_samples >= 1")
        if self.think_tokens < 0:
            raise ValueError("think_tokens must be >= 0")

    @property
    def name(self) -> str:
        if self.kind == THINKING:
            return f"thinking(M={self.think_tokens})"
        if self.kind == QTTT:
            a = self.adaptation
            return f"qttt(k={a.span_len},N={a.n_steps})"
        if self.kind == BON:
            return f"bon(N={self.n_samples},M={self.think_tokens})"
        return IN_CONTEXT

    @property
    def tokens_per_sample(self) -> int:
        return self.think_tokens // self.n_samples if self.kind == BON else self.think_tokens

    def extra_flops(self, model: FlopModel, T: int) -> int:
        """Compute beyond the shared prefill and answer decode."""
        if self.kind == THINKING:
            return gen_flops(model, self.think_tokens, T).flops
        if self.kind == QTTT:
            return qttt_partial_flops(model, self.adaptation.span_len, T, self.adaptation.n_steps).flops
        if self.kind == BON:
            return self.n_samples * gen_flops(model, self.tokens_per_sample, T).flops
        return 0


def validate_budgets(conditions: Sequence[Condition], tolerance: float = MATCH_TOLERANCE) -> None:
    """Every thinking / best-of-N condition must match some qTTT schedule by ``2 N k``.

    Raises ``BudgetMismatch`` before anything runs.  Zero-token thinking is
    the in-context baseline and needs no match.
    """
    refs = [2 * c.adaptation.n_steps * c.adaptation.span_len for c in conditions if c.kind == QTTT]
    for c in conditions:
        if c.kind not in (THINKING, BON) or (c.kind == THINKING and c.think_tokens == 0):
            continue
        if not any(abs(c.think_tokens - r) <= tolerance * r for r in refs):
            raise BudgetMismatch(
                f"{c.name}: {c.think_tokens} tokens match no qTTT schedule (2Nk in {refs}, tol {tolerance:.0%})"
            )
        if c.kind == BON and c.tokens_per_sample < 1:
            raise BudgetMismatch(f"{c.name}: fewer than one token per sample")


# -- running one instance -------------------------------------------------------------


@dataclass
class InstanceResult:
    record_id: str
    task_kind: str
    length_param: int
    condition: str
    seed: int
    correct: bool
    answer_text: str
    mass: AttentionMassReport | None
    flops: int
    trace: AdaptationTrace | None = None


@dataclass
class _Attempt:
    answer_tokens: list[int]
    logprob: float
    session: DecodeSession
    answer_start: int


def _answer_after(session: DecodeSession, answer_budget: int, think: int, sampler, rng) -> _Attempt:
    if think:
        session.generate(think, sampler, rng, feed_last=True)
    session.feed(ANS)
    start = session.length - 1
    ans, lp = session.generate(answer_budget, SamplerConfig(), stop=(EOS,))
    return _Attempt(ans, lp, session, start)


def _text(tokens: list[int]) -> str:
    return bytes(t for t in tokens if t < 256).decode("utf-8", errors="replace")


def _mass(params, attempt: _Attempt, targets) -> AttentionMassReport | None:
    if not targets:
        return None
    cache = attempt.session.cache()
    steps = list(range(attempt.answer_start, cache.T))
    return attention_mass(params, cache, attempt.session.tokens, targets, steps)


def _vote_key(score) -> tuple:
    return tuple(sorted((k, str(v)) for k, v in score.parsed.items()))


def run_instance(
    params: ModelParams,
    task,
    condition: Condition,
    prompt_style: str = "compact",
    answer_budget: int = 64,
    seed: int = 0,
) -> InstanceResult:
    """Answer one task under one condition and measure needle attention mass.

    The context (prompt up to, not including, the answer marker) is
    prefilled once.  Thinking decodes scratch tokens before the marker; qTTT
    adapts the query projections on the frozen cache and then answers with
    the adapted weights; best-of-N splits the thinking budget evenly over
    ``n_samples`` sampled drafts and majority-votes the parsed answers
    (ties go to the highest answer log-probability).
    """
    rec: TaskRecord = record_from_task(task)
    rendered = render_task_tokens(rec, prompt_style)
    context = list(rendered.prompt_tokens[:-1])
    targets = rendered.target_positions
    cache = prefill_and_cache(params, context)
    model = FlopModel(params.config.n_layers, params.config.d_model, params.config.mlp_ratio)
    reserve = condition.think_tokens + answer_budget + 2
    greedy = SamplerConfig()
    trace = None

    if condition.kind == QTTT:
        adapted, trace = run_qttt(params, context, condition.adaptation, cache=cache)
        attempt = _answer_after(DecodeSession(adapted, cache, context, reserve), answer_budget, 0, greedy, None)
        mass_params = adapted
    elif condition.kind == BON:
        sampler = SamplerConfig(temperature=condition.temperature)
        attempts, scores = [], []
        for i in range(condition.n_samples):
            rng = Rng(derive_seed(seed, i))
            a = _answer_after(
                DecodeSession(params, cache, context, reserve), answer_budget, condition.tokens_per_sample, sampler, rng
            )
            attempts.append(a)
            scores.append(score_answer(rec, _text(a.answer_tokens)))
        votes: dict[tuple, list[int]] = {}
        for i, s in enumerate(scores):
            votes.setdefault(_vote_key(s), []).append(i)
        best = max(votes.values(), key=lambda ix: (len(ix), max(attempts[i].logprob for i in ix)))
        attempt = attempts[max(best, key=lambda i: attempts[i].logprob)]
        mass_params = params
    else:
        think = condition.think_tokens if condition.kind == THINKING else 0
        attempt = _answer_after(DecodeSession(params, cache, context, reserve), answer_budget, think, greedy, None)
        mass_params = params

    text = _text(attempt.answer_tokens)
    return InstanceResult(
        record_id=rec.id,
        task_kind=rec.kind,
        length_param=rec.length_param,
        condition=condition.name,
        seed=rec.seed,
        correct=score_answer(rec, text).correct,
        answer_text=text,
        mass=_mass(mass_params, attempt, targets),
        flops=condition.extra_flops(model, len(context)),
        trace=trace,
    )


# -- tables ------------------------------------------------------------------------------

CSV_COLUMNS = (
    "task_kind",
    "length_param",
    "condition",
    "seed",
    "accuracy",
    "needle_mass_mean",
    "needle_mass_std",
    "margin_mean",
    "flops",
)


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.10g}"


def result_row(r: InstanceResult) -> dict:
    return {
        "task_kind": r.task_kind,
        "length_param": r.length_param,
        "condition": r.condition,
        "seed": r.seed,
        "accuracy": _fmt(float(r.correct)),
        "needle_mass_mean": _fmt(r.mass.mean if r.mass else None),
        "needle_mass_std": _fmt(r.mass.std if r.mass else None),
        "margin_mean": _fmt(r.mass.margin_mean if r.mass else None),
        "flops": r.flops,
    }


def rows_to_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def margin_sweep_report(
    params: ModelParams,
    tasks: Sequence,
    conditions: Sequence[Condition],
    prompt_style: str = "compact",
    answer_budget: int = 64,
    seed: int = 0,
) -> list[InstanceResult]:
    """Run every task under every condition after checking budgets match."""
    validate_budgets(conditions)
    results = []
    for i, task in enumerate(tasks):
        for j, cond in enumerate(conditions):
            results.append(
                run_instance(params, task, cond, prompt_style, answer_budget, derive_seed(seed, i, j))
            )
    return results
