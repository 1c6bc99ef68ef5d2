"""Single-query softmax attention and executable retrieval/dilution bounds.

Everything here works on one query against a fixed set of keys and values,
represented by :class:`AttentionBlockState`.  The needle index is ground
truth supplied by the caller; it is never inferred from the argmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numeric import as_matrix, as_vector, log_sum_exp, softmax_row


class PreconditionError(ValueError):
    """An operation's stated precondition does not hold for the given state."""


@dataclass(frozen=True)
class AttentionBlockState:
    q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    needle: int
    z: np.ndarray
    alpha: np.ndarray

    @property
    def d_k(self) -> int:
        return self.K.shape[1]

    @property
    def T(self) -> int:
        return self.K.shape[0]

    @property
    def output(self) -> np.ndarray:
        return self.alpha @ self.V

    @classmethod
    def build(cls, q, K, V, needle: int) -> "AttentionBlockState":
        q = as_vector(q, "q")
        K = as_matrix(K, "K")
        V = as_matrix(V, "V")
        z, alpha, _ = attention_forward(q, K, V)
        if not 0 <= needle < K.shape[0]:
            raise ValueError(f"needle {needle} outside [0, {K.shape[0]})")
        return cls(q=q, K=K, V=V, needle=int(needle), z=z, alpha=alpha)

    @classmethod
    def from_logits(cls, z, needle: int, V=None) -> "AttentionBlockState":
        """State whose scaled logits equal ``z`` exactly (d_k = T, K = sqrt(T) * I, q = z)."""
        z = as_vector(z, "z")
        T = z.size
        K = math.sqrt(T) * np.eye(T)
        if V is None:
            V = np.eye(T)
        state = cls.build(z, K, V, needle)
        return cls(q=state.q, K=K, V=state.V, needle=needle, z=z.copy(), alpha=softmax_row(z))

    def with_query(self, q) -> "AttentionBlockState":
        return AttentionBlockState.build(q, self.K, self.V, self.needle)


@dataclass(frozen=True)
class MarginReport:
    gamma: float
    needle_mass: float
    tau: float
    success: bool


def attention_forward(q, K, V, d_k: int | None = None):
    """Return ``(z, alpha, o)`` for one query over T keys/values."""
    q = as_vector(q, "q")
    K = as_matrix(K, "K")
    V = as_matrix(V, "V")
    T = K.shape[0]
    if T == 0:
        raise ValueError("attention over an empty key set")
    if V.shape[0] != T:
        raise ValueError(f"K has {T} rows but V has {V.shape[0]}")
    if d_k is None:
        d_k = K.shape[1]
    if q.size != K.shape[1] or d_k != K.shape[1]:
        raise ValueError(f"query length {q.size}, key width {K.shape[1]}, d_k {d_k} disagree")
    z = (K @ q) / math.sqrt(d_k)
    alpha = softmax_row(z)
    o = alpha @ V
    return z, alpha, o


def distractor_lse(z: np.ndarray, needle: int) -> float:
    return log_sum_exp(np.delete(z, needle))


def margin(state: AttentionBlockState, tau: float = 0.5) -> MarginReport:
    if state.T < 2:
        raise PreconditionError("margin needs at least one distractor (T >= 2)")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    gamma = float(state.z[state.needle] - distractor_lse(state.z, state.needle))
    mass = needle_mass_from_margin(gamma)
    softmax_mass = float(state.alpha[state.needle])
    if not math.isclose(mass, softmax_mass, rel_tol=1e-9, abs_tol=1e-300):
        raise AssertionError(f"margin mass {mass!r} disagrees with softmax mass {softmax_mass!r}")
    by_mass = mass >= tau
    by_margin = gamma >= math.log(tau / (1.0 - tau))
    if by_mass != by_margin:
        # only reachable when both sit on the threshold to within rounding
        by_mass = by_margin = math.isclose(mass, tau, rel_tol=1e-12)
    return MarginReport(gamma=gamma, needle_mass=mass, tau=tau, success=by_margin)


def needle_mass_from_margin(gamma: float) -> float:
    if gamma >= 0:
        return 1.0 / (1.0 + math.exp(-gamma))
    e = math.exp(gamma)
    return e / (1.0 + e)


def count_near_ties(state: AttentionBlockState, delta: float) -> int:
    z_star = state.z[state.needle]
    near = state.z >= z_star - delta
    return int(np.count_nonzero(near)) - 1  # drop the needle itself


def dilution_bound(state: AttentionBlockState, m: int, delta: float) -> float:
    """Upper bound on needle mass given ``m`` distractors within ``delta`` of the needle logit."""
    if m < 1:
        raise PreconditionError("m must be at least 1")
    if delta < 0:
        raise PreconditionError("delta must be non-negative")
    available = count_near_ties(state, delta)
    if available < m:
        raise PreconditionError(f"only {available} distractors lie within {delta} of the needle, need {m}")
    return 1.0 / (1.0 + m * math.exp(-delta))


def required_margin(T: int, eps: float) -> float:
    """Uniform needle-distractor gap that guarantees needle mass >= 1 - eps."""
    if T < 2:
        raise PreconditionError("T must be at least 2")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    return math.log((T - 1) * (1.0 - eps) / eps)


def worst_case_logits(T: int, gap: float, needle: int = 0) -> np.ndarray:
    """Needle at 0, every distractor exactly ``gap`` below it."""
    z = np.full(T, -float(gap))
    z[needle] = 0.0
    return z


def needle_signal_bound(state: AttentionBlockState, u) -> tuple[float, float]:
    u = as_vector(u, "u")
    if u.size != state.V.shape[1]:
        raise ValueError(f"u has length {u.size}, value width is {state.V.shape[1]}")
    proj = state.V @ u
    a = float(state.alpha[state.needle])
    lhs = float(state.output @ u)
    rhs = a * float(proj[state.needle]) + (1.0 - a) * float(np.delete(proj, state.needle).max())
    return lhs, rhs


def specialization_bound(state: AttentionBlockState, u, eps: float) -> tuple[float, float]:
    """Needle-signal bound with ``eps`` substituted for the needle weight.

    Requires ``alpha[needle] <= eps``, checked in margin form.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    u = as_vector(u, "u")
    if u.size != state.V.shape[1]:
        raise ValueError(f"u has length {u.size}, value width is {state.V.shape[1]}")
    gamma = margin(state).gamma
    if gamma > math.log(eps / (1.0 - eps)) + 1e-12:
        raise PreconditionError(f"needle mass {state.alpha[state.needle]:.6g} exceeds eps={eps}")
    proj = state.V @ u
    lhs = float(state.output @ u)
    rhs = eps * float(proj[state.needle]) + (1.0 - eps) * float(np.delete(proj, state.needle).max())
    return lhs, rhs
