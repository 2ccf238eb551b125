"""Correspondence precision, linear probing and overlay export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import numcore as nc
from .attention import build_attention
from .matching import CorrespondenceSet, Strategy, match
from .synthdata import (
    AugmentationPolicy,
    SceneSpec,
    full_view,
    generate_scene,
    mask_at_grid,
    render_view,
    sample_view_pair,
    write_pgm,
    write_ppm,
)
from .trainer import derive_seed, normalize_views

# scene seeds for evaluation are drawn from a stream training never touches
EVAL_STREAM = 0xE7A1


@dataclass
class EvalReport:
    correspondence_precision: dict[str, float]
    probe_accuracy: float | None
    n_scenes: int

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be at least 1")
        values = list(self.correspondence_precision.values())
        if self.probe_accuracy is not None:
            values.append(self.probe_accuracy)
        for v in values:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"probability {v} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps({"correspondence_precision": self.correspondence_precision,
                           "probe_accuracy": self.probe_accuracy,
                           "n_scenes": self.n_scenes}, sort_keys=True)


# ---------------------------------------------------------------- precision

def pair_hits(corr: CorrespondenceSet, mask_q, mask_k) -> tuple[int, int]:
    """(correct, emitted) pair counts; background on either end is a miss."""
    lq = np.asarray(mask_q).ravel()
    lk = np.asarray(mask_k).ravel()
    pairs = corr.pairs()
    if not pairs:
        return 0, 0
    i, j = np.array(pairs).T
    hit = (lq[i] == lk[j]) & (lq[i] != 0)
    return int(hit.sum()), len(pairs)


def correspondence_precision(corrs, masks_q, masks_k) -> float:
    """Fraction of all emitted pairs whose ends share a nonzero object label.

    Accepts one CorrespondenceSet with its two label grids, or parallel
    sequences of them. No emitted pairs at all gives 0.0.
    """
    if isinstance(corrs, CorrespondenceSet):
        corrs, masks_q, masks_k = [corrs], [masks_q], [masks_k]
    good = total = 0
    for corr, mq, mk in zip(corrs, masks_q, masks_k, strict=True):
        g, t = pair_hits(corr, mq, mk)
        good += g
        total += t
    return good / total if total else 0.0


def eval_scenes(n_scenes: int, seed: int, scene_size: int = 64, view_size: int = 32):
    """Held-out (scene, view pair) list, deterministic in ``seed``."""
    spec = SceneSpec(size=scene_size)
    policy = AugmentationPolicy(out_size=view_size)
    out = []
    for s in range(n_scenes):
        scene = generate_scene(derive_seed(seed, EVAL_STREAM, s), spec)
        out.append((scene, sample_view_pair(scene, derive_seed(scene.scene_id, 1), policy)))
    return out


def match_scenes(params, scenes, strategy, delta: float, seed: int = 0):
    """Correspondences and ground-truth grids for every view pair."""
    views_q = normalize_views([vp.view_q for _, vp in scenes])
    views_k = normalize_views([vp.view_k for _, vp in scenes])
    pack_q = enc.encode(params, views_q)
    pack_k = enc.encode(params, views_k)
    grid = pack_q.z.shape[-1]
    corrs, masks_q, masks_k = [], [], []
    for b, (scene, vp) in enumerate(scenes):
        att_q = build_attention(pack_q.z[b], delta)
        att_k = build_attention(pack_k.z[b], delta)
        corrs.append(match(strategy, att_q.selected, att_k.selected,
                           rescaled_q=att_q.rescaled, rescaled_k=att_k.rescaled,
                           p_q=pack_q.p_set[b], p_k=pack_k.p_set[b],
                           z_q=pack_q.z[b], z_k=pack_k.z[b],
                           rng_seed=derive_seed(seed, b)))
        masks_q.append(mask_at_grid(scene, vp.t_q, grid))
        masks_k.append(mask_at_grid(scene, vp.t_k, grid))
    return corrs, masks_q, masks_k


def evaluate_matching(params, scenes, delta: float = 0.7, seed: int = 0,
                      strategies=tuple(Strategy)) -> dict[str, float]:
    out = {}
    for strategy in strategies:
        strategy = Strategy.parse(strategy)
        out[strategy.value] = correspondence_precision(*match_scenes(params, scenes, strategy, delta, seed))
    return out


def write_correspondences(path, corrs, scene_ids) -> None:
    """One JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for corr, sid in zip(corrs, scene_ids, strict=True):
            fh.write(corr.to_json(int(sid)) + "\n")


def read_correspondences(path) -> list[CorrespondenceSet]:
    with open(path, encoding="utf-8") as fh:
        return [CorrespondenceSet.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- linear probe

def probe_scenes(n_scenes: int, seed: int, scene_size: int = 64):
    spec = SceneSpec(size=scene_size)
    return [generate_scene(derive_seed(seed, EVAL_STREAM, 1, s), spec) for s in range(n_scenes)]


def pooled_features(params, scenes, view_size: int = 32) -> np.ndarray:
    """Globally pooled backbone features of each scene's full, unaugmented view."""
    views = np.stack([render_view(sc, full_view(sc, view_size)) for sc in scenes])
    return nc.global_average_pool(enc.encode(params, normalize_views(views)).z)


def split_indices(n: int, seed: int, train_fraction: float = 0.8):
    perm = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x5B1]).permutation(n)
    cut = int(round(train_fraction * n))
    return perm[:cut], perm[cut:]


def linear_probe(features, labels, epochs: int = 500, lr: float = 0.5, seed: int = 0,
                 weight_decay: float = 1e-4) -> float:
    """Held-out accuracy of softmax regression trained by full-batch gradient descent.

    Features are standardized with training-split statistics.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("features must be N x D with one label per row")
    train, test = split_indices(len(y), seed)
    if len(np.unique(y[train])) < 2 or len(test) == 0:
        raise ValueError("probe needs at least two classes in the training split and a non-empty test split")
    classes = np.unique(y)
    y_idx = np.searchsorted(classes, y)
    mu = x[train].mean(axis=0)
    sd = x[train].std(axis=0)
    sd[sd == 0] = 1.0
    xs = (x - mu) / sd
    xt, yt = xs[train], y_idx[train]
    onehot = np.eye(len(classes))[yt]
    w = np.zeros((x.shape[1], len(classes)))
    b = np.zeros(len(classes))
    for _ in range(epochs):
        logits = xt @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        prob = np.exp(logits)
        prob /= prob.sum(axis=1, keepdims=True)
        d = (prob - onehot) / len(yt)
        w -= lr * (xt.T @ d + weight_decay * w)
        b -= lr * d.sum(axis=0)
    pred = np.argmax(xs[test] @ w + b, axis=1)
    return float(np.mean(pred == y_idx[test]))


def probe_checkpoint(params, n_scenes: int = 600, seed: int = 0, scene_seed: int = 0,
                     view_size: int = 32) -> float:
    scenes = probe_scenes(n_scenes, scene_seed)
    feats = pooled_features(params, scenes, view_size)
    return linear_probe(feats, [sc.class_label for sc in scenes], seed=seed)


# ---------------------------------------------------------------- overlays

@dataclass
class OverlayFiles:
    view: Path
    attention: Path
    sidecar: Path
    extra: list[Path] = field(default_factory=list)


def export_overlay(view, rescaled, omega, corr: CorrespondenceSet, path, scene_id=None) -> OverlayFiles:
    """Write ``<path>.view.ppm``, ``<path>.attn.pgm`` and ``<path>.json``.

    The attention map is upsampled by pixel repetition to the view size.
    ``nn_added`` in the sidecar marks key indices contributed only by the
    nearest-neighbour search.
    """
    view = np.asarray(view, dtype=np.float64)
    rescaled = np.asarray(rescaled, dtype=np.float64)
    if view.ndim != 3 or view.shape[0] != 3 or rescaled.ndim != 2 or rescaled.shape[0] != rescaled.shape[1]:
        raise ValueError("expected a 3 x V x V view and a G x G attention map")
    grid = rescaled.shape[0]
    cells = grid * grid
    for idx in list(omega) + [j for _, j in corr.pairs()] + list(corr.query_indices):
        if not 0 <= idx < cells:
            raise ValueError(f"index {idx} outside a {grid} x {grid} grid")
    base = Path(path)
    if not base.parent.is_dir():
        raise OSError(f"output directory {base.parent} does not exist")
    rep = max(1, view.shape[1] // grid)
    files = OverlayFiles(base.with_name(base.name + ".view.ppm"),
                         base.with_name(base.name + ".attn.pgm"),
                         base.with_name(base.name + ".json"))
    write_ppm(files.view, view)
    write_pgm(files.attention, np.kron(rescaled, np.ones((rep, rep))))
    sidecar = json.loads(corr.to_json(scene_id))
    sidecar.update({"grid": grid, "omega": [int(i) for i in omega]})
    files.sidecar.write_text(json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8")
    return files


def read_sidecar(path) -> tuple[list[int], CorrespondenceSet]:
    record = json.loads(Path(path).read_text(encoding="utf-8"))
    return record["omega"], CorrespondenceSet.from_json(json.dumps(record))
