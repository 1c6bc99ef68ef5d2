"""Closed-form single-query gradient of the needle loss and its descent step.

The loss is ``-log alpha[needle]`` for one query against fixed keys; its
gradient with respect to the query is ``(mu - k_needle) / sqrt(d_k)`` where
``mu`` is the attention-weighted key mean.
"""

from __future__ import annotations

import math

import numpy as np

from ..attention import AttentionBlockState


def needle_loss(state: AttentionBlockState) -> float:
    """``-log alpha[needle]`` computed from logits, stable for tiny masses."""
    z = state.z
    m = z.max()
    return float(m + math.log(np.sum(np.exp(z - m))) - z[state.needle])


def query_gradient_closed_form(state: AttentionBlockState) -> np.ndarray:
    if state.q.size != state.K.shape[1]:
        raise ValueError("query and key widths differ")
    mu = state.alpha @ state.K
    return (mu - state.K[state.needle]) / math.sqrt(state.d_k)


def query_descent_step(state: AttentionBlockState, eta: float) -> AttentionBlockState:
    if eta < 0:
        raise ValueError("eta must be non-negative")
    grad = query_gradient_closed_form(state)
    return state.with_query(state.q - eta * grad)


def margin_change(state: AttentionBlockState, new_q: np.ndarray) -> float:
    """``log alpha'[needle] - log alpha[needle]`` without cancellation.

    The log-partition difference is ``log E_alpha[exp(dz)]``, evaluated via
    ``log1p(sum alpha * expm1(dz))`` so steps of size 1e-8 keep full relative
    precision.
    """
    dz = (state.K @ (np.asarray(new_q, dtype=np.float64) - state.q)) / math.sqrt(state.d_k)
    shift = float(np.sum(state.alpha * np.expm1(dz)))
    return float(dz[state.needle] - math.log1p(shift))


def margin_gain_check(state: AttentionBlockState, eta: float) -> tuple[float, float]:
    """Return ``(predicted, actual)`` first-order and realized gains of ``log alpha[needle]``."""
    grad = query_gradient_closed_form(state)
    sq = float(grad @ grad)
    if sq == 0.0:
        raise ValueError("zero gradient: margin gain is undefined")
    predicted = eta * sq
    actual = margin_change(state, state.q - eta * grad)
    return predicted, actual
