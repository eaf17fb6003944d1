"""Fixed-capacity FIFO of frozen image embeddings and hard-negative sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NoEligibleCandidateError, ShapeError


@dataclass(frozen=True)
class QueueSnapshot:
    cls: np.ndarray      # [fill, d], oldest first
    ids: np.ndarray      # [fill]
    tokens: np.ndarray   # [fill, N, d]

    def __len__(self) -> int:
        return len(self.ids)


class EmbeddingQueue:
    """Ring buffer of ``(image_id, cls, tokens)`` entries.

    Duplicate ids are allowed; the same image may be enqueued on different
    steps.
    """

    def __init__(self, capacity: int, dim: int, tokens: int):
        if capacity < 1:
            raise ContractError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.ids = np.zeros(capacity, dtype=np.int64)
        self.cls = np.zeros((capacity, dim))
        self.tokens = np.zeros((capacity, tokens, dim))
        self.head = 0  # next write slot
        self.fill = 0

    def __len__(self) -> int:
        return self.fill

    def enqueue_batch(self, ids, cls, tokens) -> None:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        cls = np.asarray(cls, dtype=np.float64)
        tokens = np.asarray(tokens, dtype=np.float64)
        n = len(ids)
        if n == 0:
            return
        if n > self.capacity:
            raise ContractError(f"batch of {n} exceeds queue capacity {self.capacity}")
        if cls.shape != (n,) + self.cls.shape[1:] or tokens.shape != (n,) + self.tokens.shape[1:]:
            raise ShapeError(f"enqueue: cls {cls.shape} / tokens {tokens.shape} do not fit the queue")
        slots = (self.head + np.arange(n)) % self.capacity
        self.ids[slots] = ids
        self.cls[slots] = cls
        self.tokens[slots] = tokens
        self.head = int((self.head + n) % self.capacity)
        self.fill = min(self.fill + n, self.capacity)

    def _order(self) -> np.ndarray:
        start = (self.head - self.fill) % self.capacity
        return (start + np.arange(self.fill)) % self.capacity

    def snapshot(self) -> QueueSnapshot:
        order = self._order()
        return QueueSnapshot(self.cls[order].copy(), self.ids[order].copy(), self.tokens[order].copy())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"ids": self.ids, "cls": self.cls, "tokens": self.tokens}

    @classmethod
    def from_arrays(cls, ids, cls_rows, tokens, head: int, fill: int) -> "EmbeddingQueue":
        q = cls(len(ids), cls_rows.shape[1], tokens.shape[1])
        q.ids[:] = ids
        q.cls[:] = cls_rows
        q.tokens[:] = tokens
        q.head, q.fill = int(head), int(fill)
        return q


def sample_hard_negative(probs, candidate_ids, positive_id: int, rng: np.random.Generator) -> int:
    """Draw one candidate index with probability proportional to ``probs``.

    Every candidate carrying ``positive_id`` is masked out before
    renormalizing, so duplicates of the positive image can never be drawn.
    """
    w = np.where(np.asarray(candidate_ids) == positive_id, 0.0, np.asarray(probs, dtype=np.float64))
    total = w.sum()
    if not total > 0:
        raise NoEligibleCandidateError(f"no candidate with positive mass besides image {positive_id}")
    return int(rng.choice(len(w), p=w / total))


def sample_hard_negatives(p_s2i, candidate_ids, anchor_ids, rng: np.random.Generator) -> np.ndarray:
    """One hard-negative candidate index per row of ``p_s2i``; -1 where none is eligible."""
    p_s2i = np.asarray(p_s2i)
    out = np.full(len(anchor_ids), -1, dtype=np.int64)
    for row, pos in enumerate(anchor_ids):
        try:
            out[row] = sample_hard_negative(p_s2i[row], candidate_ids, int(pos), rng)
        except NoEligibleCandidateError:
            continue
    return out
