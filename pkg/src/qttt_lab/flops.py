"""Dense-transformer FLOP models for prefill, decoding and query-only updates.

All quantities are Python integers, so budgets near 1e18 compare exactly.

    C_quad = 2 L d                 attention score/value term per (query, key) pair
    C_tok  = (4 + 2r) L d^2        projections + MLP per token
    prefill(T)          = C_quad T^2 + C_tok T
    gen(M; T)           = C_quad (M T + M (M - 1) / 2) + C_tok M
    qttt(k; T) per step = 2 (C_quad k T + (2 + 2r) L k d^2)
                          [+ 2 (C_quad k^2 + 2 L k d^2) with in-span attention]

The factor 2 on a qTTT step counts forward plus a backward of equal cost on
the touched subgraph.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class FlopModel:
    L: int
    d: int
    r: int

    def __post_init__(self):
        for name in ("L", "d", "r"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def c_quad(self) -> int:
        return 2 * self.L * self.d

    @property
    def c_tok(self) -> int:
        return (4 + 2 * self.r) * self.L * self.d**2

    @property
    def c_query_tok(self) -> int:
        # per-token projections touched by a query-only pass: (2 + 2r) L d^2
        return (2 + 2 * self.r) * self.L * self.d**2


@dataclass(frozen=True)
class Budget:
    flops: int
    provenance: str

    def __post_init__(self):
        if self.flops < 0:
            raise ValueError("a budget cannot be negative")


def prefill_flops(model: FlopModel, T: int) -> Budget:
    if T < 1:
        raise ValueError("T must be >= 1")
    return Budget(model.c_quad * T * T + model.c_tok * T, f"prefill(T={T})")


def gen_flops(model: FlopModel, T_think: int, T: int) -> Budget:
    if T_think < 0:
        raise ValueError("T_think must be >= 0")
    quad = T_think * T + T_think * (T_think - 1) // 2
    return Budget(model.c_quad * quad + model.c_tok * T_think, f"gen(T_think={T_think}, T={T})")


def qttt_step_flops(model: FlopModel, k: int, T: int, in_span: bool = False) -> int:
    inner = model.c_quad * k * T + model.c_query_tok * k
    if in_span:
        inner += model.c_quad * k * k + 2 * model.L * k * model.d**2
    return 2 * inner


def qttt_partial_flops(model: FlopModel, k: int, T: int, n_steps: int, in_span: bool = False) -> Budget:
    if not 1 <= k <= T:
        raise ValueError(f"span length k={k} must lie in [1, T={T}]")
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    flops = n_steps * qttt_step_flops(model, k, T, in_span)
    tag = ", in_span" if in_span else ""
    return Budget(flops, f"qttt(k={k}, T={T}, n_steps={n_steps}{tag})")


def full_ttt_step_flops(model: FlopModel, T: int) -> Budget:
    """One full-parameter step: forward plus a 2x backward over all T tokens."""
    return Budget(3 * prefill_flops(model, T).flops, f"full_ttt_step(T={T})")


def _max_tokens_within(model: FlopModel, target: int, T: int) -> int:
    # largest M with gen(M; T) <= target; gen is strictly increasing in M
    lo, hi = 0, 1
    while gen_flops(model, hi, T).flops <= target:
        hi *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if gen_flops(model, mid, T).flops <= target:
            lo = mid
        else:
            hi = mid
    return lo


def full_ttt_equivalent_tokens(model: FlopModel, T: int) -> int:
    """Decode tokens (growing cache after a T-token prefill) costing one full TTT step."""
    return _max_tokens_within(model, full_ttt_step_flops(model, T).flops, T)


def matched_thinking_tokens(
    model: FlopModel, k: int, n_steps: int, T: int, mode: str = "rule_of_thumb", in_span: bool = False
) -> int:
    """Thinking-token count whose decode cost matches ``n_steps`` qTTT updates.

    ``rule_of_thumb`` is ``2 * n_steps * k``.  ``exact`` returns the largest
    ``M`` with ``gen(M) <= qttt budget`` (integer bisection; ``gen`` is
    strictly increasing in ``M``).
    """
    if k < 1 or n_steps < 0:
        raise ValueError("need k >= 1 and n_steps >= 0")
    if mode == "rule_of_thumb":
        return 2 * n_steps * k
    if mode != "exact":
        raise ValueError(f"unknown mode {mode!r}")
    return _max_tokens_within(model, qttt_partial_flops(model, k, T, n_steps, in_span).flops, T)


def matched_bon_trajectories(model: FlopModel, budget: Budget, per_traj_tokens: int, T: int) -> int:
    """How many ``per_traj_tokens``-long decodes fit in ``budget`` (at least 1)."""
    if per_traj_tokens < 1:
        raise ValueError("per_traj_tokens must be >= 1")
    return max(1, budget.flops // gen_flops(model, per_traj_tokens, T).flops)


def relative_gap(a: int, b: int) -> float:
    """``|a - b| / max(a, b)``; 0 when both are 0."""
    top = max(a, b)
    return 0.0 if top == 0 else abs(a - b) / top


def budget_table(L: int, d: int, r: int, T: int, k: int, n_steps: int) -> dict:
    """All budgets for one configuration, as used by the ``flops`` command."""
    model = FlopModel(L, d, r)
    qttt = qttt_partial_flops(model, k, T, n_steps)
    qttt_in = qttt_partial_flops(model, k, T, n_steps, in_span=True)
    m_rule = matched_thinking_tokens(model, k, n_steps, T, "rule_of_thumb")
    m_exact = matched_thinking_tokens(model, k, n_steps, T, "exact")
    return {
        "L": L,
        "d": d,
        "r": r,
        "T": T,
        "k": k,
        "n_steps": n_steps,
        "C_quad": model.c_quad,
        "C_tok": model.c_tok,
        "prefill": prefill_flops(model, T).flops,
        "qttt_partial": qttt.flops,
        "qttt_partial_in_span": qttt_in.flops,
        "T_think_rule_of_thumb": m_rule,
        "T_think_exact": m_exact,
        "gen_at_rule_of_thumb": gen_flops(model, m_rule, T).flops,
        "gen_vs_qttt_relative_gap": relative_gap(gen_flops(model, m_rule, T).flops, qttt.flops),
        "full_ttt_step": full_ttt_step_flops(model, T).flops,
        "full_ttt_step_equivalent_tokens": full_ttt_equivalent_tokens(model, T),
    }
