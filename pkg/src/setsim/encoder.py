"""Two-head convolutional encoder with hand-written backward pass.

The backbone is three stride-2 3x3 convolutions (3 -> 16 -> 32 -> 64),
each followed by ReLU, so a 32x32 view yields a 64 x 4 x 4 map ``z``.
Two heads read ``z``:

* ``img``: global average pool, FC 64->64, ReLU, FC 64->32, L2 normalize
* ``set``: 1x1 conv 64->64, ReLU, 1x1 conv 64->32 (one vector per cell)

An optional two-layer predictor (32->32->32) is used in SimSiam mode.
Parameters live in a plain ``dict`` of float64 arrays keyed by the names
in :data:`PARAM_SHAPES`; the key branch is simply another such dict.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc

BACKBONE = (("backbone.conv1", 3, 16), ("backbone.conv2", 16, 32), ("backbone.conv3", 32, 64))
FEATURE_DIM = 64
EMBED_DIM = 32

PARAM_SHAPES: dict[str, tuple[int, ...]] = {}
for _name, _cin, _cout in BACKBONE:
    PARAM_SHAPES[f"{_name}.weight"] = (_cout, _cin, 3, 3)
    PARAM_SHAPES[f"{_name}.bias"] = (_cout,)
PARAM_SHAPES.update({
    "img.fc1.weight": (FEATURE_DIM, FEATURE_DIM),
    "img.fc1.bias": (FEATURE_DIM,),
    "img.fc2.weight": (FEATURE_DIM, EMBED_DIM),
    "img.fc2.bias": (EMBED_DIM,),
    "set.conv1.weight": (FEATURE_DIM, FEATURE_DIM, 1, 1),
    "set.conv1.bias": (FEATURE_DIM,),
    "set.conv2.weight": (EMBED_DIM, FEATURE_DIM, 1, 1),
    "set.conv2.bias": (EMBED_DIM,),
})
PREDICTOR_SHAPES: dict[str, tuple[int, ...]] = {
    "pred.fc1.weight": (EMBED_DIM, EMBED_DIM),
    "pred.fc1.bias": (EMBED_DIM,),
    "pred.fc2.weight": (EMBED_DIM, EMBED_DIM),
    "pred.fc2.bias": (EMBED_DIM,),
}

EncoderParams = dict  # name -> np.ndarray


def _fan_in(shape: tuple[int, ...], name: str) -> int:
    if name.endswith(".bias"):
        weight = name[: -len("bias")] + "weight"
        return _fan_in(_all_shapes()[weight], weight)
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def _all_shapes() -> dict[str, tuple[int, ...]]:
    return {**PARAM_SHAPES, **PREDICTOR_SHAPES}


def init_params(seed: int, with_predictor: bool = False) -> EncoderParams:
    """Uniform init in ``[-a, a]`` with ``a = sqrt(1 / fan_in)``."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xE4C])
    shapes = _all_shapes() if with_predictor else PARAM_SHAPES
    params = {}
    for name, shape in shapes.items():
        a = np.sqrt(1.0 / _fan_in(shape, name))
        params[name] = rng.uniform(-a, a, size=shape)
    return params


def has_predictor(params: EncoderParams) -> bool:
    return all(name in params for name in PREDICTOR_SHAPES)


def copy_params(params: EncoderParams) -> EncoderParams:
    return {k: v.copy() for k, v in params.items()}


def zeros_like_params(params: EncoderParams) -> EncoderParams:
    return {k: np.zeros_like(v) for k, v in params.items()}


def check_params(params: EncoderParams) -> None:
    shapes = _all_shapes()
    for name in PARAM_SHAPES:
        if name not in params:
            raise nc.ShapeError(f"missing parameter {name}")
    for name, value in params.items():
        if name not in shapes:
            raise nc.ShapeError(f"unknown parameter {name}")
        if value.shape != shapes[name]:
            raise nc.ShapeError(f"{name} has shape {value.shape}, expected {shapes[name]}")
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"{name} contains non-finite values")


@dataclass
class FeaturePack:
    """Per-view encoder outputs for a batch of N views.

    ``z`` is N x 64 x H x W, ``p_set`` is N x 32 x H x W and ``p_img`` is
    N x 32 with unit rows (or zero rows when the pre-norm vector vanishes).
    """

    z: np.ndarray
    p_set: np.ndarray
    p_img: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def encode(params: EncoderParams, views: np.ndarray, input_size: int | None = None) -> FeaturePack:
    views = np.asarray(views, dtype=np.float64)
    if views.ndim == 3:
        views = views[None]
    if views.ndim != 4 or views.shape[1] != 3 or views.shape[2] != views.shape[3]:
        raise nc.ShapeError(f"expected N x 3 x V x V views, got {views.shape}")
    if input_size is not None and views.shape[2] != input_size:
        raise nc.ShapeError(f"view side {views.shape[2]} != configured {input_size}")

    cache = {"x0": views}
    x = views
    for i, (name, _, _) in enumerate(BACKBONE):
        pre = nc.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=2, pad=1)
        cache[f"pre{i}"] = pre
        x = nc.relu(pre)
        cache[f"x{i + 1}"] = x
    z = x

    pooled = nc.global_average_pool(z)
    h_img = nc.fully_connected(pooled, params["img.fc1.weight"], params["img.fc1.bias"])
    a_img = nc.relu(h_img)
    e_img = nc.fully_connected(a_img, params["img.fc2.weight"], params["img.fc2.bias"])
    p_img = nc.l2_normalize(e_img)

    h_set = nc.conv2d(z, params["set.conv1.weight"], params["set.conv1.bias"])
    a_set = nc.relu(h_set)
    p_set = nc.conv2d(a_set, params["set.conv2.weight"], params["set.conv2.bias"])

    cache.update(pooled=pooled, h_img=h_img, a_img=a_img, e_img=e_img, h_set=h_set, a_set=a_set)
    return FeaturePack(z=z, p_set=p_set, p_img=p_img, cache=cache)


def encode_backward(params: EncoderParams, pack: FeaturePack, d_p_img=None, d_p_set=None,
                    d_z=None) -> EncoderParams:
    """Gradients of a scalar loss w.r.t. every encoder parameter.

    Any of the upstream gradients may be ``None`` (treated as zero).
    Predictor parameters are not touched here; see :func:`predict_backward`.
    """
    c = pack.cache
    grads: EncoderParams = {}
    d_z_total = np.zeros_like(pack.z) if d_z is None else np.array(d_z, dtype=np.float64)

    if d_p_img is None:
        d_p_img = np.zeros_like(pack.p_img)
    d_e = nc.l2_normalize_backward(c["e_img"], d_p_img)
    g = nc.fully_connected_backward(c["a_img"], params["img.fc2.weight"], d_e)
    grads["img.fc2.weight"], grads["img.fc2.bias"] = g.d_params["weight"], g.d_params["bias"]
    d_h = nc.relu_backward(c["h_img"], g.d_input)
    g = nc.fully_connected_backward(c["pooled"], params["img.fc1.weight"], d_h)
    grads["img.fc1.weight"], grads["img.fc1.bias"] = g.d_params["weight"], g.d_params["bias"]
    d_z_total = d_z_total + nc.global_average_pool_backward(pack.z.shape, g.d_input)

    if d_p_set is None:
        d_p_set = np.zeros_like(pack.p_set)
    g = nc.conv2d_backward(c["a_set"], params["set.conv2.weight"], 1, 0, d_p_set)
    grads["set.conv2.weight"], grads["set.conv2.bias"] = g.d_params["weight"], g.d_params["bias"]
    d_h = nc.relu_backward(c["h_set"], g.d_input)
    g = nc.conv2d_backward(pack.z, params["set.conv1.weight"], 1, 0, d_h)
    grads["set.conv1.weight"], grads["set.conv1.bias"] = g.d_params["weight"], g.d_params["bias"]
    d_z_total = d_z_total + g.d_input

    d_x = d_z_total
    for i in reversed(range(len(BACKBONE))):
        name = BACKBONE[i][0]
        d_pre = nc.relu_backward(c[f"pre{i}"], d_x)
        g = nc.conv2d_backward(c[f"x{i}"], params[f"{name}.weight"], 2, 1, d_pre)
        grads[f"{name}.weight"], grads[f"{name}.bias"] = g.d_params["weight"], g.d_params["bias"]
        d_x = g.d_input
    return grads


def momentum_update(query_params: EncoderParams, key_params: EncoderParams, m: float) -> EncoderParams:
    """Return ``m * key + (1 - m) * query`` for every parameter tensor."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    out = {}
    for name, k in key_params.items():
        q = query_params[name]
        if q.shape != k.shape:
            raise nc.ShapeError(f"{name}: query {q.shape} vs key {k.shape}")
        out[name] = m * k + (1.0 - m) * q
    return out


@dataclass
class PredictorCache:
    x: np.ndarray
    h: np.ndarray
    a: np.ndarray
    e: np.ndarray


def predict(params: EncoderParams, embedding: np.ndarray) -> tuple[np.ndarray, PredictorCache]:
    """FC-ReLU-FC then L2 normalize. Accepts a single vector or N x 32 rows."""
    if not has_predictor(params):
        raise ValueError("predictor parameters are required in simsiam mode")
    x = np.asarray(embedding, dtype=np.float64)
    x2 = x[None] if x.ndim == 1 else x
    h = nc.fully_connected(x2, params["pred.fc1.weight"], params["pred.fc1.bias"])
    a = nc.relu(h)
    e = nc.fully_connected(a, params["pred.fc2.weight"], params["pred.fc2.bias"])
    out = nc.l2_normalize(e)
    return (out[0] if x.ndim == 1 else out), PredictorCache(x2, h, a, e)


def predict_backward(params: EncoderParams, cache: PredictorCache, d_out) -> tuple[np.ndarray, EncoderParams]:
    d_out = np.asarray(d_out, dtype=np.float64)
    squeeze = d_out.ndim == 1
    d_e = nc.l2_normalize_backward(cache.e, d_out[None] if squeeze else d_out)
    g2 = nc.fully_connected_backward(cache.a, params["pred.fc2.weight"], d_e)
    d_h = nc.relu_backward(cache.h, g2.d_input)
    g1 = nc.fully_connected_backward(cache.x, params["pred.fc1.weight"], d_h)
    grads = {
        "pred.fc1.weight": g1.d_params["weight"], "pred.fc1.bias": g1.d_params["bias"],
        "pred.fc2.weight": g2.d_params["weight"], "pred.fc2.bias": g2.d_params["bias"],
    }
    return (g1.d_input[0] if squeeze else g1.d_input), grads


def identity_predictor(params: EncoderParams) -> EncoderParams:
    """Copy of ``params`` whose predictor passes unit non-negative inputs through unchanged."""
    out = copy_params(params)
    out["pred.fc1.weight"] = np.eye(EMBED_DIM)
    out["pred.fc1.bias"] = np.zeros(EMBED_DIM)
    out["pred.fc2.weight"] = np.eye(EMBED_DIM)
    out["pred.fc2.bias"] = np.zeros(EMBED_DIM)
    return out
