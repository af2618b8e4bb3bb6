"""Inter-image similarity context: exemplar retrieval and max fusion.

A query image borrows context from its nearest training images: the k
closest exemplars in global-feature space (plain L2) are looked up, their
encoder context vectors are fused into the query's by an element-wise
maximum, and the fused vector seeds the decoder. Exemplar vectors are
treated as constants during backpropagation; only the query branch of the
max carries gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numerics import Array, require_finite


@dataclass
class ExemplarIndex:
    """Immutable pool of training-image global features, searchable by L2 distance."""

    ids: list[str]
    features: Array

    def __post_init__(self):
        if len(self.ids) != len(set(self.ids)):
            raise ContractError("ExemplarIndex: ids must be unique")
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.ids):
            raise ContractError(
                f"ExemplarIndex: features shape {self.features.shape} does not match {len(self.ids)} ids")
        require_finite(self.features, "exemplar features")

    def __len__(self) -> int:
        return len(self.ids)


def knn(index: ExemplarIndex, query: Array, k: int, exclude_id: str | None = None) -> list[str]:
    """Ids of the k nearest pool entries, ascending distance, ties by ascending id."""
    if k < 0:
        raise ContractError(f"knn: k must be >= 0, got {k}")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.features.shape[1],):
        raise ContractError(
            f"knn: query shape {query.shape}, expected ({index.features.shape[1]},)")
    available = len(index) - (1 if exclude_id in index.ids else 0)
    if k > available:
        raise ContractError(f"knn: k={k} exceeds available pool of {available}")
    if k == 0:
        return []
    diffs = index.features - query
    dists = np.einsum("ij,ij->i", diffs, diffs)
    ranked = sorted(
        (float(dists[i]), index.ids[i]) for i in range(len(index)) if index.ids[i] != exclude_id
    )
    return [ident for _, ident in ranked[:k]]


@dataclass
class FuseTape:
    query_wins: Array
    consumed: bool = field(default=False)

    def consume(self) -> None:
        if self.consumed:
            raise ContractError("FuseTape already consumed")
        self.consumed = True


def max_fuse(z: Array, exemplar_zs: list[Array]) -> tuple[Array, FuseTape]:
    """Element-wise maximum of the query context with the exemplar contexts.

    Ties route toward the query, which also makes the empty-exemplar case an
    exact identity (query_wins everywhere).
    """
    z = np.asarray(z, dtype=np.float64)
    require_finite(z, "context vector z")
    if not exemplar_zs:
        return z.copy(), FuseTape(query_wins=np.ones(z.shape, dtype=bool))
    stacked = np.asarray(exemplar_zs, dtype=np.float64)
    if stacked.ndim != 2 or stacked.shape[1] != z.shape[0]:
        raise ContractError(
            f"max_fuse: exemplar vectors shaped {stacked.shape} do not match query of length {z.shape[0]}")
    require_finite(stacked, "exemplar context vectors")
    exemplar_max = stacked.max(axis=0)
    query_wins = z >= exemplar_max
    fused = np.where(query_wins, z, exemplar_max)
    return fused, FuseTape(query_wins=query_wins)


def max_fuse_backward(tape: FuseTape, grad_fused: Array) -> Array:
    """Route the upstream gradient to the query branch where the query won the max."""
    tape.consume()
    if grad_fused.shape != tape.query_wins.shape:
        raise ContractError(
            f"max_fuse_backward: gradient shape {grad_fused.shape} does not match tape {tape.query_wins.shape}")
    return np.where(tape.query_wins, grad_fused, 0.0)
