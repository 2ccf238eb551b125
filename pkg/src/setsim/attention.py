"""Attention-driven selection of the corresponding set for one view."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AttentionMap:
    raw: np.ndarray
    rescaled: np.ndarray
    selected: list[int]


def attention_map(z: np.ndarray) -> np.ndarray:
    """Channel-wise sum of absolute activations of a C x H x W map."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] < 1:
        raise ValueError(f"expected a C x H x W map with C >= 1, got {z.shape}")
    return np.abs(z).sum(axis=0)


def rescale_minmax(a: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant map becomes all ones."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.ones_like(a)
    out = (a - lo) / (hi - lo)
    # pin the extremes so min is 0 and max is 1 exactly
    out[a == lo] = 0.0
    out[a == hi] = 1.0
    return out


def select_set(rescaled: np.ndarray, delta: float) -> list[int]:
    """Flat indices with value >= delta, highest first, ties by ascending index."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    flat = np.asarray(rescaled, dtype=np.float64).ravel()
    keep = np.flatnonzero(flat >= delta)
    order = np.lexsort((keep, -flat[keep]))
    return [int(j) for j in keep[order]]


def build_attention(z: np.ndarray, delta: float) -> AttentionMap:
    raw = attention_map(z)
    rescaled = rescale_minmax(raw)
    return AttentionMap(raw, rescaled, select_set(rescaled, delta))
