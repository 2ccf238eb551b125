"""Finite-difference verification of every hand-written backward pass.

Each check draws a small random instance, computes the analytic gradient
and compares it with central differences of the same scalar function.
Instances whose ReLU pre-activations fall within ``KINK_MARGIN`` of zero
are redrawn, since the derivative is undefined there.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import encoder as enc
from . import numcore as nc
from .matching import CorrespondenceSet, Strategy
from .objectives import (
    geo_consistency_loss,
    info_nce_batch,
    set_contrastive_loss,
    simsiam_image_loss,
    simsiam_set_loss,
)

FD_EPS = 1e-5
TOLERANCE = 1e-4
KINK_MARGIN = 1e-3


class _Kink(Exception):
    pass


def _away_from_kink(*pre):
    for p in pre:
        if np.min(np.abs(p)) < KINK_MARGIN:
            raise _Kink


def _fd(f, x):
    return nc.finite_difference_gradient(f, x, FD_EPS)


def _unit_rows(rng, n, d):
    return nc.l2_normalize(rng.normal(size=(n, d)))


def _random_corr(rng, cells, n_query, max_set):
    query = sorted(rng.choice(cells, size=n_query, replace=False).tolist())
    per = [sorted(rng.choice(cells, size=int(rng.integers(1, max_set + 1)), replace=False).tolist())
           for _ in query]
    return CorrespondenceSet(Strategy.SET2SET, query, per)


def _worst(pairs):
    return max(nc.relative_error(a, n) for a, n in pairs)


# ---------------------------------------------------------------- layers

def check_conv(rng):
    n, c, o = 2, int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(3, 6)), int(rng.integers(3, 6))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.normal(size=(n, c, h, w))
    k = rng.normal(size=(o, c, 3, 3))
    b = rng.normal(size=o)
    up = rng.normal(size=nc.conv2d(x, k, b, stride, pad).shape)
    g = nc.conv2d_backward(x, k, stride, pad, up)
    return _worst([
        (g.d_input, _fd(lambda v: np.sum(nc.conv2d(v, k, b, stride, pad) * up), x)),
        (g.d_params["weight"], _fd(lambda v: np.sum(nc.conv2d(x, v, b, stride, pad) * up), k)),
        (g.d_params["bias"], _fd(lambda v: np.sum(nc.conv2d(x, k, v, stride, pad) * up), b)),
    ])


def check_fc(rng):
    n, d, e = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
    x, wt, b = rng.normal(size=(n, d)), rng.normal(size=(d, e)), rng.normal(size=e)
    up = rng.normal(size=(n, e))
    g = nc.fully_connected_backward(x, wt, up)
    return _worst([
        (g.d_input, _fd(lambda v: np.sum(nc.fully_connected(v, wt, b) * up), x)),
        (g.d_params["weight"], _fd(lambda v: np.sum(nc.fully_connected(x, v, b) * up), wt)),
        (g.d_params["bias"], _fd(lambda v: np.sum(nc.fully_connected(x, wt, v) * up), b)),
    ])


def check_relu(rng):
    x = rng.normal(size=(2, 3, 4))
    _away_from_kink(x)
    up = rng.normal(size=x.shape)
    return _worst([(nc.relu_backward(x, up), _fd(lambda v: np.sum(nc.relu(v) * up), x))])


def check_pool(rng):
    x = rng.normal(size=(2, 3, int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    up = rng.normal(size=(2, 3))
    return _worst([(nc.global_average_pool_backward(x.shape, up),
                    _fd(lambda v: np.sum(nc.global_average_pool(v) * up), x))])


def check_normalize(rng):
    x = rng.normal(size=(3, int(rng.integers(1, 7))))
    up = rng.normal(size=x.shape)
    return _worst([(nc.l2_normalize_backward(x, up), _fd(lambda v: np.sum(nc.l2_normalize(v) * up), x))])


def _predictor_instance(rng, n=2):
    params = enc.init_params(int(rng.integers(1 << 30)), with_predictor=True)
    x = rng.normal(size=(n, enc.EMBED_DIM))
    _, cache = enc.predict(params, x)
    _away_from_kink(cache.h)
    return params, x


def _param_fd(f, params, names):
    out = {}
    for name in names:
        def g(v, name=name):
            p = dict(params)
            p[name] = v
            return f(p)
        out[name] = _fd(g, params[name])
    return out


def _sampled_param_pairs(rng, f, params, grads, names, coords):
    """(analytic, numeric) arrays at randomly chosen parameter coordinates."""
    names = list(names)
    analytic, numeric = [], []
    for _ in range(coords):
        name = names[int(rng.integers(len(names)))]
        idx = tuple(int(rng.integers(s)) for s in params[name].shape)
        p = dict(params)
        v = params[name].copy()
        p[name] = v
        orig = v[idx]
        v[idx] = orig + FD_EPS
        fp = f(p)
        v[idx] = orig - FD_EPS
        fm = f(p)
        analytic.append(grads[name][idx])
        numeric.append((fp - fm) / (2 * FD_EPS))
    return np.array(analytic), np.array(numeric)


def check_predictor(rng):
    params, x = _predictor_instance(rng)
    up = rng.normal(size=x.shape)
    out, cache = enc.predict(params, x)
    d_x, grads = enc.predict_backward(params, cache, up)
    numeric = _param_fd(lambda p: np.sum(enc.predict(p, x)[0] * up), params, enc.PREDICTOR_SHAPES)
    pairs = [(d_x, _fd(lambda v: np.sum(enc.predict(params, v)[0] * up), x))]
    pairs += [(grads[k], numeric[k]) for k in enc.PREDICTOR_SHAPES]
    return _worst(pairs)


def _relu_pattern(pack):
    keys = [f"pre{i}" for i in range(len(enc.BACKBONE))] + ["h_img", "h_set"]
    return np.concatenate([(pack.cache[k] > 0).ravel() for k in keys])


def check_encoder(rng, coords=24):
    """Full encoder backward on a 1-image 8x8 view, at sampled parameter coordinates.

    Coordinates whose perturbation flips any ReLU are skipped.
    """
    params = enc.init_params(int(rng.integers(1 << 30)))
    view = rng.normal(size=(1, 3, 8, 8))
    pack = enc.encode(params, view)
    base = _relu_pattern(pack)
    up_img = rng.normal(size=pack.p_img.shape)
    up_set = rng.normal(size=pack.p_set.shape)

    def f(p):
        pk = enc.encode(p, view)
        return np.sum(pk.p_img * up_img) + np.sum(pk.p_set * up_set), _relu_pattern(pk)

    grads = enc.encode_backward(params, pack, d_p_img=up_img, d_p_set=up_set)
    analytic, numeric = [], []
    names = list(enc.PARAM_SHAPES)
    for _ in range(4 * coords):
        if len(analytic) == coords:
            break
        name = names[int(rng.integers(len(names)))]
        idx = tuple(int(rng.integers(s)) for s in params[name].shape)
        p = {k: v.copy() for k, v in params.items()}
        orig = p[name][idx]
        p[name][idx] = orig + FD_EPS
        fp, pat_p = f(p)
        p[name][idx] = orig - FD_EPS
        fm, pat_m = f(p)
        if np.any(pat_p != base) or np.any(pat_m != base):
            continue
        analytic.append(grads[name][idx])
        numeric.append((fp - fm) / (2 * FD_EPS))
    if not analytic:
        raise _Kink
    return nc.relative_error(np.array(analytic), np.array(numeric))


# ---------------------------------------------------------------- losses

def check_info_nce(rng):
    n, d = int(rng.integers(1, 4)), int(rng.integers(2, 7))
    q, k = _unit_rows(rng, n, d), _unit_rows(rng, n, d)
    neg = _unit_rows(rng, int(rng.integers(1, 9)), d)
    tau = float(rng.uniform(0.1, 1.0))
    _, grad = info_nce_batch(q, k, neg, tau)
    return _worst([(grad, _fd(lambda v: info_nce_batch(v, k, neg, tau)[0], q))])


def check_set_loss(rng):
    d, g = int(rng.integers(2, 7)), int(rng.integers(2, 4))
    pq, pk = rng.normal(size=(d, g, g)), rng.normal(size=(d, g, g))
    corr = _random_corr(rng, g * g, int(rng.integers(1, min(4, g * g) + 1)), 3)
    neg = _unit_rows(rng, int(rng.integers(1, 9)), d)
    tau = float(rng.uniform(0.1, 1.0))
    _, grad = set_contrastive_loss(pq, pk, corr, neg, tau)
    return _worst([(grad, _fd(lambda v: set_contrastive_loss(v, pk, corr, neg, tau)[0], pq))])


def check_geo(rng):
    d, g = int(rng.integers(2, 7)), int(rng.integers(2, 4))
    pq, pk = rng.normal(size=(d, g, g)), rng.normal(size=(d, g, g))
    pairs = [(int(i), int(rng.integers(g * g))) for i in rng.choice(g * g, size=int(rng.integers(1, g * g + 1)), replace=False)]
    _, dq, dk = geo_consistency_loss(pq, pk, pairs)
    return _worst([
        (dq, _fd(lambda v: geo_consistency_loss(v, pk, pairs)[0], pq)),
        (dk, _fd(lambda v: geo_consistency_loss(pq, v, pairs)[0], pk)),
    ])


def check_simsiam(rng):
    params = enc.init_params(int(rng.integers(1 << 30)), with_predictor=True)
    g = 2
    pq = rng.normal(size=(enc.EMBED_DIM, g, g))
    pk = rng.normal(size=(enc.EMBED_DIM, g, g))
    corr = _random_corr(rng, g * g, int(rng.integers(1, 4)), 3)
    cols = pq.reshape(enc.EMBED_DIM, -1).T[corr.query_indices]
    _away_from_kink(enc.predict(params, cols)[1].h)
    p_img_q = rng.normal(size=(2, enc.EMBED_DIM))
    p_img_k = rng.normal(size=(2, enc.EMBED_DIM))
    _away_from_kink(enc.predict(params, p_img_q)[1].h)

    _, d_q, d_k, pred_grads = simsiam_set_loss(pq, pk, params, corr)
    if np.any(d_k != 0):
        raise AssertionError("key-side gradient of the set loss is not exactly zero")
    pairs = [(d_q, _fd(lambda v: simsiam_set_loss(v, pk, params, corr)[0], pq)),
             _sampled_param_pairs(rng, lambda p: simsiam_set_loss(pq, pk, p, corr)[0],
                                  params, pred_grads, enc.PREDICTOR_SHAPES, 32)]

    _, d_img, img_grads = simsiam_image_loss(p_img_q, p_img_k, params)
    pairs.append((d_img, _fd(lambda v: simsiam_image_loss(v, p_img_k, params)[0], p_img_q)))
    pairs.append(_sampled_param_pairs(rng, lambda p: simsiam_image_loss(p_img_q, p_img_k, p)[0],
                                      params, img_grads, enc.PREDICTOR_SHAPES, 32))
    return _worst(pairs)


CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    "conv2d": check_conv,
    "fully_connected": check_fc,
    "relu": check_relu,
    "global_average_pool": check_pool,
    "l2_normalize": check_normalize,
    "predictor": check_predictor,
    "encoder": check_encoder,
    "info_nce": check_info_nce,
    "set_contrastive": check_set_loss,
    "geo_consistency": check_geo,
    "simsiam": check_simsiam,
}


def run_check(name: str, seed: int, max_redraws: int = 20) -> float:
    for attempt in range(max_redraws):
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, attempt, 0x6C4])
        try:
            return CHECKS[name](rng)
        except _Kink:
            continue
    raise RuntimeError(f"{name}: no kink-free instance for seed {seed}")


def run_suite(seed: int = 0, n_seeds: int = 50, names=None) -> dict[str, float]:
    """Max relative error per component over ``n_seeds`` consecutive seeds."""
    out = {}
    for name in names or CHECKS:
        out[name] = max(run_check(name, seed + s) for s in range(n_seeds))
    return out


def timed_suite(seed: int = 0, n_seeds: int = 50) -> tuple[dict[str, float], float]:
    start = time.perf_counter()
    result = run_suite(seed, n_seeds)
    return result, time.perf_counter() - start
