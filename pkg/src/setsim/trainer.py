"""Pretraining loop: two-view encoding, set matching, losses, SGD, EMA, queues."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import encoder as enc
from .attention import build_attention
from .checkpoint import CheckpointError, read_container, write_container
from .matching import Strategy, match
from .objectives import (
    LossReport,
    NegativeQueue,
    combined_loss,
    dense_term,
    geo_consistency_loss,
    info_nce_batch,
    pooled_set_embedding,
    queue_push,
    set_contrastive_loss,
    simsiam_image_loss,
    simsiam_set_loss,
    symmetrized,
)
from .synthdata import AugmentationPolicy, SceneSpec, ViewPair, generate_scene, geometry_correspondence, sample_view_pair

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "l_img", "l_set", "l_geo", "total", "pair_count", "lr")
WARMUP_TAG = 0xFFFFFFFF
# per-channel statistics of the synthetic views, used like ImageNet mean/std
VIEW_MEAN = np.array([0.31, 0.31, 0.29])
VIEW_STD = np.array([0.31, 0.31, 0.31])


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 0.03
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    ema_m: float = 0.99
    tau: float = 0.2
    lam: float = 0.5
    delta: float = 0.7
    strategy: str = "set2set_nn"
    framework: str = "moco"
    objective: str = "combined"  # combined | image | set
    enable_geo: bool = False
    enable_sym: bool = False
    steps: int = 500
    batch: int = 16
    seed: int = 0
    queue_capacity: int = 512
    scene_size: int = 64
    view_size: int = 32
    checkpoint_every: int = 100

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy).value
        self.validate()

    def validate(self) -> None:
        if self.base_lr < 0 or self.weight_decay < 0 or self.tau <= 0:
            raise ValueError("learning rate, weight decay and temperature must be positive")
        if not 0 <= self.sgd_momentum < 1:
            raise ValueError("sgd_momentum must lie in [0, 1)")
        for name in ("lam", "delta", "ema_m"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.framework not in ("moco", "simsiam"):
            raise ValueError(f"unknown framework {self.framework!r}")
        if self.objective not in ("combined", "image", "set"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.steps < 0 or self.batch < 1 or self.queue_capacity < 1:
            raise ValueError("steps must be >= 0, batch and queue_capacity >= 1")

    # flat ``key = value`` text, one entry per line
    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_mapping(cls, values: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        current = dataclasses.asdict(base or cls())
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            current[key] = _parse(types[key], raw)
        return cls(**current)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_mapping(parse_config_text(Path(path).read_text(encoding="utf-8")))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(kind: str, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        values[key.strip()] = value.strip()
    return values


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    step_count: int = 0


@dataclass
class TrainState:
    config: TrainConfig
    query: dict[str, np.ndarray]
    key: dict[str, np.ndarray]
    optimizer: OptimizerState
    queue_img: NegativeQueue
    queue_set: NegativeQueue
    step: int = 0


# ---------------------------------------------------------------- schedule / optimizer

def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"need 0 <= step <= total_steps, got {step}/{total_steps}")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(params, grads, state: OptimizerState, lr: float, momentum: float,
             weight_decay: float):
    """SGD with coupled weight decay and heavy-ball momentum."""
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.velocity[name].shape != p.shape:
            raise ValueError(f"{name}: gradient/velocity shape does not match parameter {p.shape}")
        g = g + weight_decay * p
        v = momentum * state.velocity[name] + g
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, OptimizerState(new_velocity, state.step_count + 1)


# ---------------------------------------------------------------- data

def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(1)[0])


def make_batch(config: TrainConfig, step: int, stream: int = 0) -> list[ViewPair]:
    spec = SceneSpec(size=config.scene_size)
    policy = AugmentationPolicy(out_size=config.view_size)
    batch = []
    for b in range(config.batch):
        scene_seed = derive_seed(config.seed, stream, step, b)
        scene = generate_scene(scene_seed, spec)
        batch.append(sample_view_pair(scene, derive_seed(scene_seed, 1), policy))
    return batch


def normalize_views(views) -> np.ndarray:
    views = np.asarray(views, dtype=np.float64)
    return (views - VIEW_MEAN[:, None, None]) / VIEW_STD[:, None, None]


# ---------------------------------------------------------------- one direction

@dataclass
class StepOutcome:
    report: LossReport
    grads: dict[str, np.ndarray]
    keys_img: np.ndarray
    keys_set: np.ndarray
    correspondences: list = field(default_factory=list)

    def __add__(self, other: "StepOutcome") -> "StepOutcome":
        return StepOutcome(
            self.report + other.report,
            {k: self.grads[k] + other.grads[k] for k in self.grads},
            np.concatenate([self.keys_img, other.keys_img]),
            np.concatenate([self.keys_set, other.keys_set]),
            self.correspondences + other.correspondences,
        )

    def __rmul__(self, scale: float) -> "StepOutcome":
        return StepOutcome(scale * self.report, {k: scale * v for k, v in self.grads.items()},
                           self.keys_img, self.keys_set, self.correspondences)


def _loss_weights(config: TrainConfig) -> tuple[float, float, float]:
    """Weights on the image, set and geo terms of the total loss."""
    lam = {"combined": config.lam, "image": 0.0, "set": 1.0}[config.objective]
    w_img = 1.0 - lam
    if config.enable_geo:
        return w_img, 0.5 * lam, 0.5 * lam
    return w_img, lam, 0.0


def evaluate_direction(state: TrainState, views_a, views_b, transforms_a, transforms_b,
                       direction: int = 0) -> StepOutcome:
    """Losses and query-branch gradients with ``views_a`` as queries and ``views_b`` as keys."""
    cfg = state.config
    simsiam = cfg.framework == "simsiam"
    pack_q = enc.encode(state.query, normalize_views(views_a), cfg.view_size)
    pack_k = enc.encode(state.key, normalize_views(views_b), cfg.view_size)
    n = pack_q.z.shape[0]
    grid = pack_q.z.shape[-1]

    keys_img = pack_k.p_img
    keys_set = pooled_set_embedding(pack_k.p_set)
    neg_img = state.queue_img.entries
    neg_set = state.queue_set.entries

    pred_grads = {name: np.zeros(shape) for name, shape in enc.PREDICTOR_SHAPES.items()} if simsiam else {}
    if simsiam:
        l_img, d_img, g = simsiam_image_loss(pack_q.p_img, keys_img, state.query)
        w_img = _loss_weights(cfg)[0]
        for k_ in pred_grads:
            pred_grads[k_] += w_img * g[k_]
    else:
        l_img, d_img = info_nce_batch(pack_q.p_img, keys_img, neg_img, cfg.tau)

    w_img, w_set, w_geo = _loss_weights(cfg)
    d_set = np.zeros_like(pack_q.p_set)
    l_set_sum, l_geo_sum, pairs = 0.0, 0.0, 0
    corrs = []
    for b in range(n):
        att_q = build_attention(pack_q.z[b], cfg.delta)
        att_k = build_attention(pack_k.z[b], cfg.delta)
        corr = match(cfg.strategy, att_q.selected, att_k.selected,
                     rescaled_q=att_q.rescaled, rescaled_k=att_k.rescaled,
                     p_q=pack_q.p_set[b], p_k=pack_k.p_set[b],
                     z_q=pack_q.z[b], z_k=pack_k.z[b],
                     rng_seed=derive_seed(cfg.seed, state.step, b, direction))
        corrs.append(corr)
        pairs += corr.pair_count
        if simsiam:
            l_b, d_b, _, g = simsiam_set_loss(pack_q.p_set[b], pack_k.p_set[b], state.query, corr)
            for k_ in pred_grads:
                pred_grads[k_] += (w_set / n) * g[k_]
        else:
            l_b, d_b = set_contrastive_loss(pack_q.p_set[b], pack_k.p_set[b], corr, neg_set, cfg.tau)
        l_set_sum += l_b
        if w_set:
            d_set[b] += (w_set / n) * d_b
        if cfg.enable_geo:
            geo = geometry_correspondence(transforms_a[b], transforms_b[b], grid)
            l_g, d_g, _ = geo_consistency_loss(pack_q.p_set[b], pack_k.p_set[b], geo)
            l_geo_sum += l_g
            if w_geo:
                d_set[b] += (w_geo / n) * d_g
    l_set = l_set_sum / n
    l_geo = l_geo_sum / n if cfg.enable_geo else 0.0

    total = combined_loss(l_img, dense_term(l_set, l_geo if cfg.enable_geo else None),
                          {"combined": cfg.lam, "image": 0.0, "set": 1.0}[cfg.objective])
    grads = enc.encode_backward(
        state.query, pack_q,
        d_p_img=w_img * d_img if w_img else None,
        d_p_set=d_set if (w_set or w_geo) else None,
    )
    grads.update(pred_grads)
    report = LossReport(float(l_img), float(l_set), float(l_geo), float(total), pairs)
    return StepOutcome(report, grads, keys_img, keys_set, corrs)


# ---------------------------------------------------------------- state

def init_state(config: TrainConfig) -> TrainState:
    query = enc.init_params(config.seed, with_predictor=config.framework == "simsiam")
    key = enc.copy_params(query)
    opt = OptimizerState(enc.zeros_like_params(query))
    state = TrainState(config, query, key, opt,
                       NegativeQueue.empty(config.queue_capacity, enc.EMBED_DIM),
                       NegativeQueue.empty(config.queue_capacity, enc.EMBED_DIM))
    # one detached key pass fills both queues before step 0
    warm = make_batch(replace(config, batch=config.queue_capacity), WARMUP_TAG)
    pack = enc.encode(key, normalize_views([vp.view_k for vp in warm]), config.view_size)
    state.queue_img = queue_push(state.queue_img, pack.p_img)
    state.queue_set = queue_push(state.queue_set, pooled_set_embedding(pack.p_set))
    return state


def train_step(state: TrainState, batch: list[ViewPair], config: TrainConfig | None = None,
               lr: float | None = None) -> tuple[TrainState, LossReport]:
    cfg = config or state.config
    step = state.step
    try:
        if lr is None:
            lr = cosine_lr(min(step, max(cfg.steps, 1)), max(cfg.steps, 1), cfg.base_lr)
        views_q = np.stack([vp.view_q for vp in batch])
        views_k = np.stack([vp.view_k for vp in batch])
        t_q = [vp.t_q for vp in batch]
        t_k = [vp.t_k for vp in batch]
        if cfg.enable_sym:
            outcome = symmetrized(
                lambda a, b: evaluate_direction(state, a[0], b[0], a[1], b[1],
                                                direction=0 if a[0] is views_q else 1),
                (views_q, t_q), (views_k, t_k))
        else:
            outcome = evaluate_direction(state, views_q, views_k, t_q, t_k)

        query, opt = sgd_step(state.query, outcome.grads, state.optimizer, lr,
                              cfg.sgd_momentum, cfg.weight_decay)
        m = 0.0 if cfg.framework == "simsiam" else cfg.ema_m
        key = enc.momentum_update(query, state.key, m)
        new_state = TrainState(cfg, query, key, opt,
                               queue_push(state.queue_img, outcome.keys_img),
                               queue_push(state.queue_set, outcome.keys_set),
                               step + 1)
        for name, value in query.items():
            if not np.all(np.isfinite(value)):
                raise FloatingPointError(f"parameter {name} became non-finite")
    except TrainingError:
        raise
    except Exception as exc:
        raise TrainingError(f"step {step}: {exc}") from exc
    return new_state, outcome.report


# ---------------------------------------------------------------- persistence

def save_checkpoint(state: TrainState, path) -> None:
    tensors = {}
    for prefix, params in (("query", state.query), ("key", state.key),
                           ("velocity", state.optimizer.velocity)):
        for name, value in params.items():
            tensors[f"{prefix}.{name}"] = value
    tensors["queue_img.buffer"] = state.queue_img.buffer
    tensors["queue_set.buffer"] = state.queue_set.buffer
    meta = {
        "kind": "train_state",
        "step": str(state.step),
        "optimizer.step_count": str(state.optimizer.step_count),
        "queue_img.size": str(state.queue_img.size),
        "queue_img.cursor": str(state.queue_img.write_cursor),
        "queue_set.size": str(state.queue_set.size),
        "queue_set.cursor": str(state.queue_set.write_cursor),
    }
    for f in dataclasses.fields(state.config):
        meta[f"config.{f.name}"] = _fmt(getattr(state.config, f.name))
    write_container(path, tensors, meta)


def load_checkpoint(path) -> TrainState:
    tensors, meta = read_container(path)
    try:
        if meta.get("kind") != "train_state":
            raise CheckpointError(f"{path}: not a training checkpoint (kind={meta.get('kind')!r})")
        config = TrainConfig.from_mapping(
            {k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")})
        shapes = dict(enc.PARAM_SHAPES)
        if config.framework == "simsiam":
            shapes.update(enc.PREDICTOR_SHAPES)
        groups = {}
        for prefix in ("query", "key", "velocity"):
            group = {}
            for name, shape in shapes.items():
                full = f"{prefix}.{name}"
                if full not in tensors:
                    raise CheckpointError(f"{path}: manifest lacks {full}")
                if tensors[full].shape != shape:
                    raise CheckpointError(
                        f"{path}: {full} has shape {tensors[full].shape}, expected {shape}")
                group[name] = tensors[full]
            groups[prefix] = group
        queues = []
        for qname in ("queue_img", "queue_set"):
            buf = tensors.get(f"{qname}.buffer")
            if buf is None or buf.shape != (config.queue_capacity, enc.EMBED_DIM):
                raise CheckpointError(f"{path}: {qname} buffer missing or mis-shaped")
            queues.append(NegativeQueue(config.queue_capacity, buf,
                                        int(meta[f"{qname}.size"]), int(meta[f"{qname}.cursor"])))
        return TrainState(config, groups["query"], groups["key"],
                          OptimizerState(groups["velocity"], int(meta["optimizer.step_count"])),
                          queues[0], queues[1], int(meta["step"]))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: inconsistent manifest: {exc}") from exc


# ---------------------------------------------------------------- driver

def write_metrics_header(path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(METRIC_FIELDS)


def append_metrics(path, step: int, report: LossReport, lr: float) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow([step, repr(report.l_img), repr(report.l_set), repr(report.l_geo),
                                 repr(report.total), report.pair_count, repr(lr)])


def train(config: TrainConfig, out_dir=None, state: TrainState | None = None,
          until: int | None = None) -> tuple[TrainState, list[LossReport]]:
    """Run steps from ``state.step`` up to ``until`` (default ``config.steps``).

    With ``out_dir`` set, writes ``metrics.csv`` plus ``ckpt_<step>.bin``
    every ``checkpoint_every`` steps and ``final.bin`` at the end.
    """
    state = state or init_state(config)
    until = config.steps if until is None else until
    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = out_dir / "metrics.csv"
        if state.step == 0 or not metrics.exists():
            write_metrics_header(metrics)
            save_checkpoint(state, out_dir / "ckpt_000000.bin")
    reports = []
    while state.step < until:
        step = state.step
        lr = cosine_lr(step, max(config.steps, 1), config.base_lr)
        state, report = train_step(state, make_batch(config, step), config, lr)
        reports.append(report)
        if metrics is not None:
            append_metrics(metrics, step + 1, report, lr)
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"ckpt_{state.step:06d}.bin")
        if step % 50 == 0:
            log.info("step %d total %.4f l_img %.4f l_set %.4f", step, report.total,
                     report.l_img, report.l_set)
    if out_dir is not None:
        save_checkpoint(state, out_dir / "final.bin")
    return state, reports
