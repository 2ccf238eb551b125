"""Contrastive objectives, negative queues and loss bookkeeping.

Every loss returns its value together with analytic gradients for the
query side only; key embeddings and queue entries are treated as
constants (the gradients are never computed, so they are exactly zero).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import numcore as nc
from .encoder import predict, predict_backward
from .matching import CorrespondenceSet

UNIT_TOL = 1e-12


def _logsumexp(x: np.ndarray, axis=-1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


# ---------------------------------------------------------------- queue

@dataclass
class NegativeQueue:
    """Fixed-capacity FIFO stored as a ring buffer.

    ``buffer`` has ``capacity`` rows; the oldest live row sits at
    ``write_cursor`` once the queue is full.
    """

    capacity: int
    buffer: np.ndarray
    size: int = 0
    write_cursor: int = 0

    @classmethod
    def empty(cls, capacity: int, dim: int) -> "NegativeQueue":
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        return cls(capacity, np.zeros((capacity, dim)))

    @property
    def dim(self) -> int:
        return self.buffer.shape[1]

    @property
    def entries(self) -> np.ndarray:
        """Live rows, oldest first."""
        if self.size < self.capacity:
            return self.buffer[: self.size].copy()
        return np.concatenate([self.buffer[self.write_cursor:], self.buffer[: self.write_cursor]])

    def __len__(self) -> int:
        return self.size


def queue_push(queue: NegativeQueue, batch) -> NegativeQueue:
    """Append unit-norm rows in order, evicting the oldest beyond capacity."""
    batch = np.asarray(batch, dtype=np.float64).reshape(-1, queue.dim)
    if batch.shape[0]:
        norms = np.linalg.norm(batch, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            bad = int(np.argmax(np.abs(norms - 1.0)))
            raise ValueError(f"queue entries must be unit norm; row {bad} has norm {norms[bad]!r}")
    buf = queue.buffer.copy()
    cursor, size = queue.write_cursor, queue.size
    for row in batch:
        buf[cursor] = row
        cursor = (cursor + 1) % queue.capacity
        size = min(size + 1, queue.capacity)
    return NegativeQueue(queue.capacity, buf, size, cursor)


def _negatives(queue) -> np.ndarray:
    neg = queue.entries if isinstance(queue, NegativeQueue) else np.asarray(queue, dtype=np.float64)
    if neg.shape[0] == 0:
        raise ValueError("negative queue is empty")
    return neg


# ---------------------------------------------------------------- image level

def info_nce_image(p_q, p_k_pos, queue, tau: float) -> tuple[float, np.ndarray]:
    """InfoNCE for one query against its positive key and the queued negatives."""
    loss, grad = info_nce_batch(np.asarray(p_q)[None], np.asarray(p_k_pos)[None], queue, tau)
    return loss, grad[0]


def info_nce_batch(p_q: np.ndarray, p_k: np.ndarray, queue, tau: float) -> tuple[float, np.ndarray]:
    """Mean InfoNCE over N rows; returns the loss and d loss / d p_q (N x D)."""
    _check_tau(tau)
    neg = _negatives(queue)
    p_q = np.asarray(p_q, dtype=np.float64)
    p_k = np.asarray(p_k, dtype=np.float64)
    n = p_q.shape[0]
    pos = np.sum(p_q * p_k, axis=1, keepdims=True) / tau
    logits = np.concatenate([pos, p_q @ neg.T / tau], axis=1)
    lse = _logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[:, 0]))
    prob = np.exp(logits - lse[:, None])
    # d/dq [lse - pos] = (sum_j prob_j * key_j - positive) / tau
    grad = (prob[:, :1] * p_k + prob[:, 1:] @ neg - p_k) / (tau * n)
    return loss, grad


# ---------------------------------------------------------------- set level

def _normalized_columns(feature_map: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = np.asarray(feature_map, dtype=np.float64)
    cols = raw.reshape(raw.shape[0], -1).T
    return cols, nc.l2_normalize(cols)


def _columns_to_map(d_cols: np.ndarray, shape) -> np.ndarray:
    return np.ascontiguousarray(d_cols.T).reshape(shape)


def set_contrastive_loss(p_q_map, p_k_map, corr: CorrespondenceSet, queue,
                         tau: float) -> tuple[float, np.ndarray]:
    """Set-level InfoNCE averaged over query indices.

    For query i with corresponding key set c_i every member of c_i is a
    positive; the softmax denominator holds all of c_i plus the queued
    negatives. Returns the loss and its gradient w.r.t. the raw query map.
    """
    _check_tau(tau)
    neg = _negatives(queue)
    if not corr.query_indices:
        raise ValueError("correspondence set has no query indices")
    raw_q, q_cols = _normalized_columns(p_q_map)
    _, k_cols = _normalized_columns(p_k_map)
    d_qn = np.zeros_like(q_cols)
    neg_logits_all = q_cols[corr.query_indices] @ neg.T / tau
    total = 0.0
    for row, (i, c_i) in enumerate(zip(corr.query_indices, corr.pairs_per_query)):
        if len(c_i) == 0:
            raise ValueError(f"empty corresponding set for query index {i}")
        q = q_cols[i]
        keys = k_cols[c_i]
        logits = np.concatenate([keys @ q / tau, neg_logits_all[row]])
        lse = _logsumexp(logits, axis=0)
        total += lse - np.mean(logits[: len(c_i)])
        prob = np.exp(logits - lse)
        d_qn[i] += (prob[: len(c_i)] @ keys + prob[len(c_i):] @ neg - keys.mean(axis=0)) / tau
    m = len(corr.query_indices)
    d_qn /= m
    d_raw = nc.l2_normalize_backward(raw_q, d_qn)
    return float(total / m), _columns_to_map(d_raw, np.shape(p_q_map))


def pooled_set_embedding(p_set: np.ndarray) -> np.ndarray:
    """L2-normalized global average of an N x C x H x W set-projector map."""
    return nc.l2_normalize(nc.global_average_pool(p_set))


# ---------------------------------------------------------------- geometry

def geo_consistency_loss(p_q_map, p_k_map, pairs) -> tuple[float, np.ndarray, np.ndarray]:
    """Negative mean cosine over geometrically matched cells; 0 without pairs."""
    pairs = list(getattr(pairs, "pairs", pairs))
    shape_q, shape_k = np.shape(p_q_map), np.shape(p_k_map)
    if not pairs:
        return 0.0, np.zeros(shape_q), np.zeros(shape_k)
    raw_q, q_cols = _normalized_columns(p_q_map)
    raw_k, k_cols = _normalized_columns(p_k_map)
    qi = np.array([i for i, _ in pairs])
    kj = np.array([j for _, j in pairs])
    n = len(pairs)
    loss = -float(np.sum(q_cols[qi] * k_cols[kj])) / n
    d_qn = np.zeros_like(q_cols)
    d_kn = np.zeros_like(k_cols)
    np.add.at(d_qn, qi, -k_cols[kj] / n)
    np.add.at(d_kn, kj, -q_cols[qi] / n)
    d_q = _columns_to_map(nc.l2_normalize_backward(raw_q, d_qn), shape_q)
    d_k = _columns_to_map(nc.l2_normalize_backward(raw_k, d_kn), shape_k)
    return loss, d_q, d_k


# ---------------------------------------------------------------- simsiam

def simsiam_set_loss(p_q_map, p_k_map, params, corr: CorrespondenceSet):
    """Negative mean cosine between predicted query columns and their key columns.

    Returns ``(loss, d_p_q_map, d_p_k_map, predictor_grads)``; the key-map
    gradient is identically zero (stop-gradient).
    """
    raw_q = np.asarray(p_q_map, dtype=np.float64)
    cols_q = raw_q.reshape(raw_q.shape[0], -1).T
    _, k_cols = _normalized_columns(p_k_map)
    idx = list(corr.query_indices)
    pred, cache = predict(params, cols_q[idx])
    n_pairs = sum(len(c) for c in corr.pairs_per_query)
    if n_pairs == 0:
        raise ValueError("correspondence set has no pairs")
    loss = 0.0
    d_pred = np.zeros_like(pred)
    for row, c_i in enumerate(corr.pairs_per_query):
        keys = k_cols[c_i]
        loss -= float(np.sum(keys @ pred[row]))
        d_pred[row] = -keys.sum(axis=0)
    loss /= n_pairs
    d_pred /= n_pairs
    d_sel, pred_grads = predict_backward(params, cache, d_pred)
    d_cols = np.zeros_like(cols_q)
    np.add.at(d_cols, idx, d_sel)
    return loss, _columns_to_map(d_cols, raw_q.shape), np.zeros(np.shape(p_k_map)), pred_grads


def simsiam_image_loss(p_q, p_k, params):
    """Negative mean cosine between predicted query embeddings and key embeddings."""
    p_q = np.asarray(p_q, dtype=np.float64)
    p_k = nc.l2_normalize(np.asarray(p_k, dtype=np.float64))
    pred, cache = predict(params, p_q)
    n = p_q.shape[0]
    loss = -float(np.sum(pred * p_k)) / n
    d_q, pred_grads = predict_backward(params, cache, -p_k / n)
    return loss, d_q, pred_grads


# ---------------------------------------------------------------- combination

def combined_loss(l_img: float, l_set: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return (1.0 - lam) * l_img + lam * l_set


def dense_term(l_set: float, l_geo: float | None) -> float:
    """Set term alone, or the equal mix of set and shifted geo terms."""
    if l_geo is None:
        return l_set
    return 0.5 * l_set + 0.5 * (l_geo + 1.0)


@dataclass
class LossReport:
    l_img: float = 0.0
    l_set: float = 0.0
    l_geo: float = 0.0
    total: float = 0.0
    pair_count: int = 0

    def __add__(self, other: "LossReport") -> "LossReport":
        return LossReport(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def __rmul__(self, scale: float) -> "LossReport":
        # pair_count stays a count of every emitted pair
        return LossReport(scale * self.l_img, scale * self.l_set, scale * self.l_geo,
                          scale * self.total, self.pair_count)


def symmetrized(loss_evaluator, view_q, view_k):
    """Average of the evaluator over both view orders."""
    return 0.5 * (loss_evaluator(view_q, view_k) + loss_evaluator(view_k, view_q))
