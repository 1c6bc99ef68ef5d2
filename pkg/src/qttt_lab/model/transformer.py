"""Pre-norm decoder-only transformer with a frozen-KV query path.

Parameters live in an ordered ``name -> tensor`` dict.  Each tensor carries a
partition flag: the per-layer query projections ``layers.{l}.wq`` are QUERY,
everything else is OTHER.  Projections follow ``y = W x`` (``W`` has shape
``out x in``), so ``wq`` stacks the per-head ``W_Q`` blocks row-wise.

Three forward paths share one set of kernels:

* :func:`prefill_and_cache` runs causal self-attention over the whole
  sequence and stores post-rotary keys and values for every layer.
* :func:`frozen_forward` recomputes hidden states only at chosen positions.
  Each position attends to cached rows ``0..p``; cached rows are never
  refreshed, so positions are independent of each other.
* :class:`DecodeSession` appends new tokens to a private copy of the cache.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..numeric import Rng
from .config import ModelConfig

QUERY = "QUERY"
OTHER = "OTHER"
DTYPE = torch.float64


def layer_param_names(l: int) -> list[str]:
    p = f"layers.{l}."
    return [p + n for n in ("ln1", "wq", "wk", "wv", "wo", "ln2", "w1", "w2")]


def param_names(config: ModelConfig) -> list[str]:
    names = ["embed"]
    for l in range(config.n_layers):
        names += layer_param_names(l)
    return names + ["ln_f", "unembed"]


def param_shape(config: ModelConfig, name: str) -> tuple[int, ...]:
    d, ff, V = config.d_model, config.d_ff, config.vocab
    leaf = name.rsplit(".", 1)[-1]
    return {
        "embed": (V, d),
        "unembed": (V, d),
        "ln_f": (d,),
        "ln1": (d,),
        "ln2": (d,),
        "wq": (d, d),
        "wk": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "w1": (ff, d),
        "w2": (d, ff),
    }[leaf]


def partition_of(name: str) -> str:
    return QUERY if name.endswith(".wq") else OTHER


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, torch.Tensor]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_names(self.config)
        if list(self.tensors) != expected:
            raise ValueError("parameter names/order do not match the config")
        for name, t in self.tensors.items():
            if tuple(t.shape) != param_shape(self.config, name):
                raise ValueError(f"{name}: shape {tuple(t.shape)} != {param_shape(self.config, name)}")

    @property
    def partition(self) -> dict[str, str]:
        return {name: partition_of(name) for name in self.tensors}

    def query_names(self) -> list[str]:
        return [n for n in self.tensors if partition_of(n) == QUERY]

    def other_names(self) -> list[str]:
        return [n for n in self.tensors if partition_of(n) == OTHER]

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def clone(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {n: t.detach().clone() for n, t in self.tensors.items()},
            dict(self.metadata),
        )

    def with_config(self, **changes) -> "ModelParams":
        """Same weights under a modified config (e.g. ``rope_enabled=False``)."""
        return ModelParams(self.config.replace(**changes), dict(self.tensors), dict(self.metadata))

    def tensor_bytes(self, name: str) -> bytes:
        return self.tensors[name].detach().contiguous().numpy().astype("<f8").tobytes()

    def n_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    rng = Rng(seed)
    std = config.init_std
    resid_std = std / math.sqrt(2 * config.n_layers)
    tensors: dict[str, torch.Tensor] = {}
    for name in param_names(config):
        shape = param_shape(config, name)
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("ln"):
            arr = np.ones(shape)
        else:
            s = resid_std if leaf in ("wo", "w2") else std
            arr = rng.normal_array(shape, std=s)
        tensors[name] = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))
    return ModelParams(config, tensors, {"init_seed": int(seed)})


# -- kernels ---------------------------------------------------------------


def rope_angles(positions: torch.Tensor, d_head: int, base: float) -> tuple[torch.Tensor, torch.Tensor]:
    inv_freq = base ** (-torch.arange(0, d_head, 2, dtype=DTYPE) / d_head)
    ang = positions.to(DTYPE)[:, None] * inv_freq[None, :]
    return torch.cos(ang), torch.sin(ang)


def apply_rope(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive pairs ``(x[2i], x[2i+1])`` of the last axis.

    ``x`` has shape ``(..., P, d_head)`` and ``positions`` shape ``(P,)``.
    """
    d_head = x.shape[-1]
    if d_head % 2:
        raise ValueError(f"rotary embedding needs an even head dim, got {d_head}")
    cos, sin = rope_angles(positions, d_head, base)
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope_rotate(x, position: int, enabled: bool = True, base: float = 10000.0) -> torch.Tensor:
    """Rotary rotation of one head vector at one position; identity when disabled."""
    v = torch.as_tensor(x, dtype=DTYPE)
    if v.shape[-1] % 2:
        raise ValueError(f"rotary embedding needs an even head dim, got {v.shape[-1]}")
    if not enabled:
        return v.clone()
    return apply_rope(v[None, :], torch.tensor([position]), base)[0]


def _norm(x: torch.Tensor, gain: torch.Tensor, eps: float) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), weight=gain, bias=None, eps=eps)


def _heads(x: torch.Tensor, H: int) -> torch.Tensor:
    # (..., P, d) -> (..., H, P, d_head)
    *lead, P, d = x.shape
    return x.reshape(*lead, P, H, d // H).transpose(-3, -2)


def _merge(x: torch.Tensor) -> torch.Tensor:
    # (..., H, P, d_head) -> (..., P, d)
    *lead, H, P, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, P, H * dh)


def _mlp(params: ModelParams, l: int, h: torch.Tensor) -> torch.Tensor:
    c = params.config
    m = _norm(h, params[f"layers.{l}.ln2"], c.ln_eps)
    return F.gelu(m @ params[f"layers.{l}.w1"].T) @ params[f"layers.{l}.w2"].T


def _logits(params: ModelParams, h: torch.Tensor) -> torch.Tensor:
    return _norm(h, params["ln_f"], params.config.ln_eps) @ params["unembed"].T


def _check_tokens(config: ModelConfig, tokens) -> torch.Tensor:
    t = torch.as_tensor(tokens, dtype=torch.long)
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= config.vocab):
        bad = t[(t < 0) | (t >= config.vocab)][0].item()
        raise ValueError(f"unknown token id {bad}")
    return t


# -- cache -----------------------------------------------------------------


@dataclass(frozen=True)
class KVCache:
    """Per-layer post-rotary keys and values, shape ``(H, T, d_head)`` each."""

    keys: tuple[torch.Tensor, ...]
    values: tuple[torch.Tensor, ...]
    fingerprint: str

    @classmethod
    def create(cls, keys: Sequence[torch.Tensor], values: Sequence[torch.Tensor]) -> "KVCache":
        keys = tuple(k.detach().clone() for k in keys)
        values = tuple(v.detach().clone() for v in values)
        return cls(keys, values, _fingerprint(keys, values))

    @property
    def T(self) -> int:
        return self.keys[0].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    def current_fingerprint(self) -> str:
        """Hash recomputed from the tensors right now (detects mutation)."""
        return _fingerprint(self.keys, self.values)


def _fingerprint(keys, values) -> str:
    h = hashlib.sha256()
    for k, v in zip(keys, values):
        h.update(np.ascontiguousarray(k.numpy(), dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(v.numpy(), dtype="<f8").tobytes())
    return h.hexdigest()


# -- full causal forward ----------------------------------------------------


def forward_full(params: ModelParams, tokens: torch.Tensor, return_attn: bool = False):
    """Causal forward over ``tokens`` of shape ``(T,)`` or ``(B, T)``.

    Returns ``(logits, keys, values, attn)``; ``keys``/``values`` are per-layer
    lists of ``(..., H, T, d_head)``; ``attn`` is per-layer ``(..., H, T, T)``
    or ``None``.
    """
    c = params.config
    T = tokens.shape[-1]
    pos = torch.arange(T)
    mask = torch.ones(T, T, dtype=torch.bool).triu(1)
    h = params["embed"][tokens]
    keys, values, attns = [], [], []
    for l in range(c.n_layers):
        p = f"layers.{l}."
        a = _norm(h, params[p + "ln1"], c.ln_eps)
        q = _heads(a @ params[p + "wq"].T, c.n_heads)
        k = _heads(a @ params[p + "wk"].T, c.n_heads)
        v = _heads(a @ params[p + "wv"].T, c.n_heads)
        if c.rope_enabled:
            q = apply_rope(q, pos, c.rope_base)
            k = apply_rope(k, pos, c.rope_base)
        s = (q @ k.transpose(-1, -2)) / math.sqrt(c.d_head)
        w = torch.softmax(s.masked_fill(mask, float("-inf")), dim=-1)
        h = h + _merge(w @ v) @ params[p + "wo"].T
        h = h + _mlp(params, l, h)
        keys.append(k)
        values.append(v)
        if return_attn:
            attns.append(w)
    return _logits(params, h), keys, values, (attns if return_attn else None)


def prefill_and_cache(params: ModelParams, tokens) -> KVCache:
    t = _check_tokens(params.config, tokens)
    if t.ndim != 1 or t.numel() == 0:
        raise ValueError("prefill expects a non-empty 1-D token sequence")
    if t.numel() > params.config.max_T:
        raise ValueError(f"sequence length {t.numel()} exceeds max_T={params.config.max_T}")
    with torch.no_grad():
        _, keys, values, _ = forward_full(params, t)
    return KVCache.create(keys, values)


def full_forward_logits(params: ModelParams, tokens) -> torch.Tensor:
    t = _check_tokens(params.config, tokens)
    with torch.no_grad():
        return forward_full(params, t)[0]


# -- frozen-cache forward -----------------------------------------------------


def frozen_forward(
    params: ModelParams,
    cache: KVCache,
    tokens,
    positions,
    return_attn: bool = False,
    weights: dict[str, torch.Tensor] | None = None,
):
    """Recompute hidden states at ``positions`` against the frozen cache.

    ``weights`` optionally overrides entries of ``params`` (used to thread
    autograd leaves through the query projections).  Returns
    ``(logits (P, vocab), attn)`` with ``attn`` a per-layer list of
    ``(H, P, cache.T)`` weight tensors or ``None``.
    """
    c = params.config
    tok = _check_tokens(c, tokens)
    if tok.numel() != cache.T:
        raise ValueError(f"{tok.numel()} tokens but cache holds {cache.T} positions")
    pos = torch.as_tensor(positions, dtype=torch.long)
    if pos.numel() == 0:
        raise ValueError("no positions requested")
    if int(pos.min()) < 0 or int(pos.max()) >= cache.T:
        raise ValueError(f"positions must lie in [0, {cache.T})")

    def W(name):
        if weights is not None and name in weights:
            return weights[name]
        return params[name]

    mask = torch.arange(cache.T)[None, :] > pos[:, None]  # (P, T): True = hidden
    h = W("embed")[tok[pos]]
    attns = []
    for l in range(c.n_layers):
        p = f"layers.{l}."
        a = _norm(h, W(p + "ln1"), c.ln_eps)
        q = _heads(a @ W(p + "wq").T, c.n_heads)  # (H, P, dh)
        if c.rope_enabled:
            q = apply_rope(q, pos, c.rope_base)
        s = (q @ cache.keys[l].transpose(-1, -2)) / math.sqrt(c.d_head)  # (H, P, T)
        w = torch.softmax(s.masked_fill(mask, float("-inf")), dim=-1)
        h = h + _merge(w @ cache.values[l]) @ W(p + "wo").T
        m = _norm(h, W(p + "ln2"), c.ln_eps)
        h = h + F.gelu(m @ W(p + "w1").T) @ W(p + "w2").T
        if return_attn:
            attns.append(w)
    logits = _norm(h, W("ln_f"), c.ln_eps) @ W("unembed").T
    return logits, (attns if return_attn else None)


@dataclass(frozen=True)
class Span:
    """Contiguous span ``x_{start : start + length}`` in 1-based token indexing.

    The loss covers predictions of ``x_{i+1}`` for ``i = start .. start+length-1``,
    so a span is legal iff ``start >= 1`` and ``start + length <= T``.
    """

    start: int
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("span length must be >= 1")
        if self.start < 1:
            raise ValueError("span start must be >= 1")

    def check(self, T: int) -> None:
        if self.start + self.length > T:
            raise ValueError(f"span {self} does not fit in a context of {T} tokens")

    def query_positions(self) -> torch.Tensor:
        # 0-based positions whose next-token predictions enter the loss
        return torch.arange(self.start - 1, self.start - 1 + self.length)


def span_forward_frozen_kv(params: ModelParams, cache: KVCache, tokens, span: Span, weights=None):
    """Summed next-token loss over ``span`` against the frozen cache.

    Returns ``(loss, logits)`` where ``logits`` has one row per span position.
    """
    tok = _check_tokens(params.config, tokens)
    if tok.numel() != cache.T:
        raise ValueError(f"{tok.numel()} tokens but cache holds {cache.T} positions")
    span.check(cache.T)
    pos = span.query_positions()
    logits, _ = frozen_forward(params, cache, tok, pos, weights=weights)
    targets = tok[pos + 1]
    loss = F.cross_entropy(logits, targets, reduction="sum")
    return loss, logits


def grad_wq_span(params: ModelParams, cache: KVCache, tokens, span: Span) -> tuple[float, dict[str, torch.Tensor]]:
    """Span loss and its gradient with respect to every ``wq`` only.

    Cached keys/values and all OTHER tensors enter as constants.
    """
    leaves = {n: params[n].detach().clone().requires_grad_(True) for n in params.query_names()}
    loss, _ = span_forward_frozen_kv(params, cache, tokens, span, weights=leaves)
    grads = torch.autograd.grad(loss, [leaves[n] for n in leaves])
    return float(loss.detach()), {n: g.detach() for n, g in zip(leaves, grads)}


# -- decoding -----------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.0
    top_k: int = 0
    top_p: float = 1.0
    seed: int = 0


def choose_token(logits: torch.Tensor, sampler: SamplerConfig, rng: Rng | None) -> int:
    if sampler.temperature <= 0.0:
        return int(torch.argmax(logits))  # first maximal index on ties
    probs = torch.softmax(logits / sampler.temperature, dim=-1).numpy()
    order = np.argsort(-probs, kind="stable")
    p_sorted = probs[order]
    keep = len(order)
    if sampler.top_k > 0:
        keep = min(keep, sampler.top_k)
    if sampler.top_p < 1.0:
        cum = np.cumsum(p_sorted)
        keep = min(keep, int(np.searchsorted(cum, sampler.top_p)) + 1)
    p_keep = p_sorted[:keep] / p_sorted[:keep].sum()
    u = (rng or Rng(sampler.seed)).random()
    idx = int(np.searchsorted(np.cumsum(p_keep), u, side="right"))
    return int(order[min(idx, keep - 1)])


class DecodeSession:
    """Autoregressive generation on a private, growable copy of a prefill cache."""

    def __init__(self, params: ModelParams, cache: KVCache, tokens, reserve: int = 64):
        c = params.config
        self.params = params
        self.tokens = [int(t) for t in _check_tokens(c, tokens).tolist()]
        if len(self.tokens) != cache.T:
            raise ValueError(f"{len(self.tokens)} tokens but cache holds {cache.T} positions")
        self.length = cache.T
        self._prefill = cache
        cap = cache.T + max(reserve, 1)
        self._k = []
        self._v = []
        for k, v in zip(cache.keys, cache.values):
            kb = torch.zeros(c.n_heads, cap, c.d_head, dtype=DTYPE)
            vb = torch.zeros(c.n_heads, cap, c.d_head, dtype=DTYPE)
            kb[:, : cache.T] = k
            vb[:, : cache.T] = v
            self._k.append(kb)
            self._v.append(vb)
        self._next_logits: torch.Tensor | None = None
        self.attn_log: list[list[torch.Tensor]] = []
        self.record_attn = False

    def _grow(self) -> None:
        for i in range(len(self._k)):
            self._k[i] = torch.cat([self._k[i], torch.zeros_like(self._k[i])], dim=1)
            self._v[i] = torch.cat([self._v[i], torch.zeros_like(self._v[i])], dim=1)

    @torch.no_grad()
    def feed(self, token: int) -> torch.Tensor:
        """Append ``token`` at the next position; return logits for the one after."""
        c = self.params.config
        if self.length >= c.max_T:
            raise ValueError(f"decoding past max_T={c.max_T}")
        if not 0 <= token < c.vocab:
            raise ValueError(f"unknown token id {token}")
        if self.length >= self._k[0].shape[1]:
            self._grow()
        p_idx = self.length
        pos = torch.tensor([p_idx])
        P = self.params
        h = P["embed"][token][None, :]
        step_attn = []
        for l in range(c.n_layers):
            p = f"layers.{l}."
            a = _norm(h, P[p + "ln1"], c.ln_eps)
            q = _heads(a @ P[p + "wq"].T, c.n_heads)
            k = _heads(a @ P[p + "wk"].T, c.n_heads)
            v = _heads(a @ P[p + "wv"].T, c.n_heads)
            if c.rope_enabled:
                q = apply_rope(q, pos, c.rope_base)
                k = apply_rope(k, pos, c.rope_base)
            self._k[l][:, p_idx : p_idx + 1] = k
            self._v[l][:, p_idx : p_idx + 1] = v
            K = self._k[l][:, : p_idx + 1]
            V = self._v[l][:, : p_idx + 1]
            w = torch.softmax((q @ K.transpose(-1, -2)) / math.sqrt(c.d_head), dim=-1)
            h = h + _merge(w @ V) @ P[p + "wo"].T
            h = h + _mlp(P, l, h)
            if self.record_attn:
                step_attn.append(w[:, 0].clone())
        self.length += 1
        self.tokens.append(int(token))
        if self.record_attn:
            self.attn_log.append(step_attn)
        self._next_logits = _logits(P, h)[0]
        return self._next_logits

    def next_logits(self) -> torch.Tensor:
        """Logits for the token after the current sequence."""
        if self._next_logits is None:
            # first call right after prefill: recompute the last position's output
            logits, _ = frozen_forward(self.params, self._prefill, self.tokens, [self.length - 1])
            self._next_logits = logits[0].detach()
        return self._next_logits

    def generate(
        self,
        n_tokens: int,
        sampler: SamplerConfig = SamplerConfig(),
        rng: Rng | None = None,
        stop: Iterable[int] = (),
        feed_last: bool = False,
    ) -> tuple[list[int], float]:
        """Generate up to ``n_tokens``; returns (tokens, summed log-prob).

        Every emitted token except the last is fed back.  With ``feed_last``
        the last one is fed too, so the session can continue from it.
        """
        if n_tokens < 0:
            raise ValueError("n_tokens must be >= 0")
        stop = set(stop)
        rng = rng if rng is not None else Rng(sampler.seed)
        out: list[int] = []
        logprob = 0.0
        for i in range(n_tokens):
            logits = self.next_logits()
            tok = choose_token(logits, sampler, rng)
            logprob += float(torch.log_softmax(logits, dim=-1)[tok])
            out.append(tok)
            last = tok in stop or i == n_tokens - 1
            if not last or feed_last:
                self.feed(tok)
            if last:
                break
        return out, logprob

    def cache(self) -> KVCache:
        return KVCache.create(
            [k[:, : self.length] for k in self._k],
            [v[:, : self.length] for v in self._v],
        )


def decode(
    params: ModelParams,
    cache: KVCache,
    tokens,
    prompt_len: int,
    n_tokens: int,
    sampler: SamplerConfig = SamplerConfig(),
) -> list[int]:
    """Generate ``n_tokens`` after a prefilled prompt; the prefill cache is not mutated."""
    if prompt_len != cache.T:
        raise ValueError(f"prompt_len={prompt_len} but cache holds {cache.T} positions")
    if n_tokens < 0:
        raise ValueError("n_tokens must be >= 0")
    if prompt_len + n_tokens > params.config.max_T:
        raise ValueError(f"decoding {n_tokens} tokens would exceed max_T={params.config.max_T}")
    session = DecodeSession(params, cache, tokens, reserve=n_tokens)
    out, _ = session.generate(n_tokens, sampler)
    return out
