"""Helper selection: probe-based model embeddings and exact k-NN over them.

Each client model is summarized by its softmax outputs on one fixed
Gaussian probe batch. The server indexes the latest embedding per client
in a KD-tree and answers top-H nearest-peer queries, excluding the
requester itself. Distance ties resolve to the lower client id, which
keeps query results fully deterministic.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import NotEmbeddedError
from .nn import ParamVector, forward


@dataclass(frozen=True)
class ProbeInput:
    """Fixed Gaussian probe batch shared by every embedding in a run."""

    rows: np.ndarray
    seed: int

    @classmethod
    def make(cls, input_dim: int, n_rows: int = 8, seed: int = 0) -> "ProbeInput":
        rng = np.random.default_rng(seed)
        return cls(rows=rng.standard_normal((n_rows, input_dim)), seed=seed)


@dataclass(frozen=True)
class ModelEmbedding:
    """Concatenated softmax rows of one model on the probe."""

    vector: np.ndarray
    client_id: int
    round_tag: int = 0


def embed_model(
    params: ParamVector, probe: ProbeInput, client_id: int = -1, round_tag: int = 0
) -> ModelEmbedding:
    """Row-major concatenation of the model's probe predictions."""
    dist = forward(params, probe.rows)
    return ModelEmbedding(
        vector=dist.rows.ravel().copy(), client_id=client_id, round_tag=round_tag
    )


class _Node:
    __slots__ = ("idx", "axis", "left", "right")

    def __init__(self, idx, axis, left, right):
        self.idx = idx
        self.axis = axis
        self.left = left
        self.right = right


class EmbeddingIndex:
    """Exact nearest-neighbor index over one embedding per client."""

    def __init__(self, embeddings: Sequence[ModelEmbedding]):
        embeddings = list(embeddings)
        if not embeddings:
            raise ValueError("cannot build an index from zero embeddings")
        ids = [e.client_id for e in embeddings]
        if len(set(ids)) != len(ids):
            raise ValueError("one embedding per client expected, got duplicate ids")
        self._ids = np.asarray(ids, dtype=np.int64)
        self._points = np.stack([np.asarray(e.vector, dtype=np.float64) for e in embeddings])
        self._by_id = {cid: row for row, cid in enumerate(ids)}
        self._root = self._build(np.arange(len(ids)), 0)

    def __len__(self) -> int:
        return self._points.shape[0]

    def __contains__(self, client_id: int) -> bool:
        return client_id in self._by_id

    def _build(self, idx: np.ndarray, depth: int) -> Optional[_Node]:
        if idx.size == 0:
            return None
        axis = depth % self._points.shape[1]
        order = idx[np.argsort(self._points[idx, axis], kind="stable")]
        mid = order.size // 2
        return _Node(
            idx=int(order[mid]),
            axis=axis,
            left=self._build(order[:mid], depth + 1),
            right=self._build(order[mid + 1 :], depth + 1),
        )

    def query(self, vec: np.ndarray, k: int, exclude_id: Optional[int] = None) -> list[int]:
        """ids of the k nearest embeddings to vec, nearest first.

        Ordering key is (squared distance, client id); exclude_id is skipped
        entirely during traversal.
        """
        if k < 1:
            raise ValueError("k must be at least 1")
        vec = np.asarray(vec, dtype=np.float64)
        # max-heap of the current k best under (dist^2, id); the negated
        # tuple puts the worst candidate at the root
        best: list[tuple[float, int]] = []

        def visit(node: Optional[_Node]):
            if node is None:
                return
            point = self._points[node.idx]
            cid = int(self._ids[node.idx])
            if cid != exclude_id:
                delta = vec - point
                d2 = float(delta @ delta)
                key = (-d2, -cid)
                if len(best) < k:
                    heapq.heappush(best, key)
                elif key > best[0]:
                    heapq.heapreplace(best, key)
            plane = float(vec[node.axis] - point[node.axis])
            near, far = (node.left, node.right) if plane < 0 else (node.right, node.left)
            visit(near)
            # equal plane distance can still hide a tie that wins on id,
            # so only a strictly larger gap prunes the far side
            if len(best) < k or plane * plane <= -best[0][0]:
                visit(far)

        visit(self._root)
        ordered = sorted(((-d2, -cid) for d2, cid in best))
        return [cid for _, cid in ordered]

    def query_by_id(self, requester: int, k: int) -> list[int]:
        if requester not in self._by_id:
            raise NotEmbeddedError(f"client {requester} has no embedding yet")
        vec = self._points[self._by_id[requester]]
        return self.query(vec, k, exclude_id=requester)


def build_index(embeddings: Sequence[ModelEmbedding]) -> EmbeddingIndex:
    return EmbeddingIndex(embeddings)


def query_helpers(index: EmbeddingIndex, requester: int, h: int) -> list[int]:
    """Up to h nearest peers of the requester, never the requester itself."""
    if h < 1:
        raise ValueError("helper count must be positive")
    return index.query_by_id(requester, h)


def helper_due(round_no: int, period: int = 10) -> bool:
    """Whether helper payloads ship this round (every `period` rounds)."""
    if round_no < 1:
        raise ValueError("rounds are numbered from 1")
    if period < 1:
        raise ValueError("period must be positive")
    return round_no % period == 0
