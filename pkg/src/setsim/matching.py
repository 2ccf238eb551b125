"""Cross-view matching strategies over attention-selected index sets.

Three pixel-to-pixel strategies (random, sort, hungarian) truncate both
sets to the same size and emit a perfect matching; the two set-level
strategies pair every query index with the whole key set, optionally
extended by the key position nearest in backbone-feature space.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np


class Strategy(str, enum.Enum):
    RANDOM = "random"
    SORT = "sort"
    HUNGARIAN = "hungarian"
    SET2SET = "set2set"
    SET2SET_NN = "set2set_nn"

    @classmethod
    def parse(cls, value: "str | Strategy") -> "Strategy":
        if isinstance(value, Strategy):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown matching strategy {value!r}")


PIXEL_STRATEGIES = (Strategy.RANDOM, Strategy.SORT, Strategy.HUNGARIAN)


@dataclass
class CorrespondenceSet:
    strategy: Strategy
    query_indices: list[int]
    pairs_per_query: list[list[int]]
    # key indices added by nearest-neighbor search and absent from the key set
    nn_added: list[list[int]] = field(default_factory=list)

    def pairs(self) -> list[tuple[int, int]]:
        return [(i, j) for i, c in zip(self.query_indices, self.pairs_per_query) for j in c]

    @property
    def pair_count(self) -> int:
        return sum(len(c) for c in self.pairs_per_query)

    def to_json(self, scene_id: int | None = None) -> str:
        record = {
            "scene_id": scene_id,
            "strategy": self.strategy.value,
            "query_indices": self.query_indices,
            "pairs_per_query": self.pairs_per_query,
            "nn_added": self.nn_added,
            "pairs": [list(p) for p in self.pairs()],
        }
        return json.dumps(record, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CorrespondenceSet":
        record = json.loads(line)
        return cls(Strategy.parse(record["strategy"]), list(record["query_indices"]),
                   [list(c) for c in record["pairs_per_query"]],
                   [list(c) for c in record.get("nn_added", [])])


def _require_nonempty(omega_q, omega_k):
    if len(omega_q) == 0 or len(omega_k) == 0:
        raise ValueError("matching needs non-empty query and key sets")


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between u and v; 0 when either vector is zero."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine between the rows of a and the rows of b."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    an = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
    bn = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
    return np.clip(an @ bn.T, -1.0, 1.0)


def _truncate(omega_q, omega_k):
    k = min(len(omega_q), len(omega_k))
    return list(omega_q[:k]), list(omega_k[:k])


def match_random(omega_q, omega_k, rng_seed: int) -> CorrespondenceSet:
    """Truncate to the top-k of each set and pair with a seeded random permutation."""
    _require_nonempty(omega_q, omega_k)
    q, k = _truncate(omega_q, omega_k)
    perm = np.random.default_rng([int(rng_seed) & 0xFFFFFFFF, 0x4A7]).permutation(len(k))
    return CorrespondenceSet(Strategy.RANDOM, q, [[k[p]] for p in perm])


def _rank(omega, rescaled) -> list[int]:
    flat = np.asarray(rescaled, dtype=np.float64).ravel()
    return sorted(omega, key=lambda j: (-flat[j], j))


def match_sort(omega_q, omega_k, rescaled_q, rescaled_k) -> CorrespondenceSet:
    """Pair the r-th most attended query index with the r-th most attended key index."""
    _require_nonempty(omega_q, omega_k)
    q, k = _truncate(_rank(omega_q, rescaled_q), _rank(omega_k, rescaled_k))
    return CorrespondenceSet(Strategy.SORT, q, [[j] for j in k])


def hungarian_solve(cost) -> list[int]:
    """Minimum-cost perfect assignment of a square matrix; ``result[row] = col``.

    Shortest augmenting path with row/column potentials, O(k^3).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    n = cost.shape[0]
    if n == 0:
        return []
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[col] = row (1-based), 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for row in range(1, n + 1):
        owner[0] = row
        col0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[col0] = True
            r0 = owner[col0]
            free = ~used[1:]
            reduced = cost[r0 - 1] - u[r0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = col0
            cand = np.where(free, minv[1:], np.inf)
            col1 = int(np.argmin(cand)) + 1
            delta = cand[col1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            col0 = col1
            if owner[col0] == 0:
                break
        while col0:
            col1 = way[col0]
            owner[col0] = owner[col1]
            col0 = col1
    assignment = [0] * n
    for col in range(1, n + 1):
        assignment[owner[col] - 1] = col - 1
    return assignment


def assignment_cost(cost, assignment) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[i, j] for i, j in enumerate(assignment)))


def _columns(feature_map: np.ndarray) -> np.ndarray:
    """C x H x W map as (H*W) x C rows."""
    fm = np.asarray(feature_map, dtype=np.float64)
    return fm.reshape(fm.shape[0], -1).T


def match_hungarian(omega_q, omega_k, p_q, p_k) -> CorrespondenceSet:
    """Truncate to top-k and solve the assignment with cosine-distance costs."""
    _require_nonempty(omega_q, omega_k)
    q, k = _truncate(omega_q, omega_k)
    cols_q, cols_k = _columns(p_q), _columns(p_k)
    cost = 1.0 - cosine_matrix(cols_q[q], cols_k[k])
    assignment = hungarian_solve(cost)
    return CorrespondenceSet(Strategy.HUNGARIAN, q, [[k[a]] for a in assignment])


def match_set2set(omega_q, omega_k) -> CorrespondenceSet:
    _require_nonempty(omega_q, omega_k)
    return CorrespondenceSet(Strategy.SET2SET, list(omega_q), [list(omega_k) for _ in omega_q])


def nearest_neighbor(z_q, z_k, i: int) -> int:
    """Key grid position whose backbone feature is most cosine-similar to query position i."""
    cols_q, cols_k = _columns(z_q), _columns(z_k)
    if cols_k.shape[0] < 1:
        raise ValueError("key map has no spatial positions")
    sims = cosine_matrix(cols_q[i : i + 1], cols_k)[0]
    return int(np.argmax(sims))  # argmax keeps the first maximal index


def match_set2set_nn(omega_q, omega_k, z_q, z_k) -> CorrespondenceSet:
    """Each query index pairs with the key set plus its own nearest key position."""
    _require_nonempty(omega_q, omega_k)
    cols_q, cols_k = _columns(z_q), _columns(z_k)
    sims = cosine_matrix(cols_q[list(omega_q)], cols_k)
    key_set = set(omega_k)
    pairs, added = [], []
    for row in range(len(omega_q)):
        n_i = int(np.argmax(sims[row]))
        if n_i in key_set:
            pairs.append(list(omega_k))
            added.append([])
        else:
            pairs.append(list(omega_k) + [n_i])
            added.append([n_i])
    return CorrespondenceSet(Strategy.SET2SET_NN, list(omega_q), pairs, added)


def match(strategy, omega_q, omega_k, *, rescaled_q=None, rescaled_k=None, p_q=None, p_k=None,
          z_q=None, z_k=None, rng_seed: int = 0) -> CorrespondenceSet:
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.RANDOM:
        return match_random(omega_q, omega_k, rng_seed)
    if strategy is Strategy.SORT:
        return match_sort(omega_q, omega_k, rescaled_q, rescaled_k)
    if strategy is Strategy.HUNGARIAN:
        return match_hungarian(omega_q, omega_k, p_q, p_k)
    if strategy is Strategy.SET2SET:
        return match_set2set(omega_q, omega_k)
    return match_set2set_nn(omega_q, omega_k, z_q, z_k)
