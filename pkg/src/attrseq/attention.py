"""Additive attention over the encoder's per-region summary vectors.

At each decode step the previous decoder state is scored against every
region summary by a one-hidden-layer feed-forward scorer

    score_i = v_a . tanh(W_a [h_dec_prev ; H_i] + b_a)

the scores are softmax-normalized into weights, and the step context is
the weighted sum of the summaries. The context is therefore a convex
combination of the region summaries, which bounds every component by the
per-component envelope of H.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numerics import Array, Rng, require_finite, softmax


@dataclass
class AttentionParams:
    """Scorer weights: W_a (width x 2d), b_a (width), v_a (width)."""

    W_a: Array
    b_a: Array
    v_a: Array

    @property
    def width(self) -> int:
        return self.v_a.shape[0]

    @property
    def d(self) -> int:
        return self.W_a.shape[1] // 2

    def named_arrays(self):
        yield "W_a", self.W_a
        yield "b_a", self.b_a
        yield "v_a", self.v_a


@dataclass
class AttendTape:
    params: object
    X: Array        # (m x 2d) scorer input, query tiled against each summary
    H: Array
    hidden: Array
    weights: Array
    consumed: bool = field(default=False)

    def consume(self, params) -> None:
        if self.consumed:
            raise ContractError("AttendTape already consumed")
        if params is not self.params:
            raise ContractError("AttendTape does not match the parameters passed to backward")
        self.consumed = True


def init_attention_params(d: int, width: int, rng: Rng) -> AttentionParams:
    r = 1.0 / np.sqrt(d)
    return AttentionParams(
        W_a=rng.uniform(-r, r, (width, 2 * d)),
        b_a=np.zeros(width),
        v_a=rng.uniform(-r, r, width),
    )


def attend(p: AttentionParams, h_query: Array, H: Array):
    """Score the query against each row of H and form the step context.

    H is an (m x d) matrix of region summaries. Returns
    (context, weights, tape) where weights is a probability vector over
    the m regions and context = weights @ H.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] == 0:
        raise ContractError(f"attend: H must be a non-empty (m x d) matrix, got shape {H.shape}")
    m, d = H.shape
    if h_query.shape != (d,):
        raise ContractError(f"attend: query shape {h_query.shape}, expected ({d},)")
    if p.W_a.shape != (p.width, 2 * d):
        raise ContractError(f"attend: scorer shaped {p.W_a.shape} does not fit d={d}")
    require_finite(h_query, "attention query")
    require_finite(H, "attention summaries H")

    # One (m x 2d) input matrix: query tiled against each summary row.
    X = np.concatenate([np.broadcast_to(h_query, (m, d)), H], axis=1)
    hidden = np.tanh(X @ p.W_a.T + p.b_a)
    scores = hidden @ p.v_a
    weights = softmax(scores)
    context = weights @ H
    tape = AttendTape(params=p, X=X, H=H, hidden=hidden, weights=weights)
    return context, weights, tape


def attend_backward(p: AttentionParams, tape: AttendTape, grad_context: Array):
    """Gradients through the convex combination, softmax, and scorer.

    Returns (param_grads, grad_h_query, grad_H).
    """
    tape.consume(p)
    H, w, u, X = tape.H, tape.weights, tape.hidden, tape.X
    m, d = H.shape

    grad_H = np.outer(w, grad_context)
    d_w = H @ grad_context
    # softmax Jacobian applied to d_w
    d_scores = w * (d_w - np.dot(w, d_w))
    d_hidden = np.outer(d_scores, p.v_a) * (1.0 - u ** 2)

    grads = {
        "W_a": d_hidden.T @ X,
        "b_a": d_hidden.sum(axis=0),
        "v_a": u.T @ d_scores,
    }
    dX = d_hidden @ p.W_a
    grad_h_query = dX[:, :d].sum(axis=0)
    grad_H += dX[:, d:]
    return grads, grad_h_query, grad_H
