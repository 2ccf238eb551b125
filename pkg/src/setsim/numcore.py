"""Dense float64 layers with explicit backward passes.

Arrays are plain ``numpy.ndarray`` objects in row-major NCHW layout.
Every forward function has a matching ``*_backward`` that takes the
forward inputs plus the upstream gradient and returns gradients with
the same shapes as the quantities they differentiate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when array shapes are incompatible with a layer."""


@dataclass
class LayerGradients:
    d_input: np.ndarray
    d_params: dict[str, np.ndarray] = field(default_factory=dict)


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv(input, kernel, bias, stride, pad):
    if input.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects NCHW input and OIHW kernel, got {input.shape} and {kernel.shape}"
        )
    if input.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"input has {input.shape[1]} channels but kernel expects {kernel.shape[1]}"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {kernel.shape[0]} outputs")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} / pad={pad}")
    _, _, h, w = input.shape
    _, _, kh, kw = kernel.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"padded input {h}x{w} (pad {pad}) smaller than kernel {kh}x{kw}")


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(input, kernel, bias=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of an NCHW batch with an OIHW kernel."""
    input, kernel = _as_f64(input), _as_f64(kernel)
    bias = None if bias is None else _as_f64(bias)
    _check_conv(input, kernel, bias, stride, pad)
    n, _, h, w = input.shape
    o, _, kh, kw = kernel.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xp = _pad(input, pad)
    out = np.zeros((n, o, ho, wo))
    # one tensordot per kernel tap keeps memory at O(N*C*Ho*Wo)
    for a in range(kh):
        for b in range(kw):
            patch = xp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride]
            out += np.einsum("oc,nchw->nohw", kernel[:, :, a, b], patch, optimize=True)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv2d_backward(input, kernel, stride: int, pad: int, d_output) -> LayerGradients:
    input, kernel, d_output = _as_f64(input), _as_f64(kernel), _as_f64(d_output)
    _check_conv(input, kernel, None, stride, pad)
    n, _, h, w = input.shape
    o, _, kh, kw = kernel.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if d_output.shape != (n, o, ho, wo):
        raise ShapeError(f"d_output shape {d_output.shape} != conv output {(n, o, ho, wo)}")
    xp = _pad(input, pad)
    d_xp = np.zeros_like(xp)
    d_kernel = np.zeros_like(kernel)
    for a in range(kh):
        for b in range(kw):
            sl = (slice(None), slice(None),
                  slice(a, a + stride * ho, stride), slice(b, b + stride * wo, stride))
            d_kernel[:, :, a, b] = np.einsum("nohw,nchw->oc", d_output, xp[sl], optimize=True)
            d_xp[sl] += np.einsum("oc,nohw->nchw", kernel[:, :, a, b], d_output, optimize=True)
    d_input = d_xp[:, :, pad : pad + h, pad : pad + w] if pad else d_xp
    return LayerGradients(
        d_input=np.ascontiguousarray(d_input),
        d_params={"weight": d_kernel, "bias": d_output.sum(axis=(0, 2, 3))},
    )


def relu(input) -> np.ndarray:
    return np.maximum(_as_f64(input), 0.0)


def relu_backward(input, d_output) -> np.ndarray:
    input, d_output = _as_f64(input), _as_f64(d_output)
    if input.shape != d_output.shape:
        raise ShapeError(f"relu_backward shapes differ: {input.shape} vs {d_output.shape}")
    return np.where(input > 0, d_output, 0.0)


def fully_connected(input, weight, bias) -> np.ndarray:
    """Row-wise affine map ``input @ weight + bias`` with weight stored D x E."""
    input, weight, bias = _as_f64(input), _as_f64(weight), _as_f64(bias)
    if input.ndim != 2 or weight.ndim != 2 or input.shape[1] != weight.shape[0]:
        raise ShapeError(f"cannot multiply {input.shape} by {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    return input @ weight + bias


def fully_connected_backward(input, weight, d_output) -> LayerGradients:
    input, weight, d_output = _as_f64(input), _as_f64(weight), _as_f64(d_output)
    if d_output.shape != (input.shape[0], weight.shape[1]):
        raise ShapeError(f"d_output shape {d_output.shape} does not match layer output")
    return LayerGradients(
        d_input=d_output @ weight.T,
        d_params={"weight": input.T @ d_output, "bias": d_output.sum(axis=0)},
    )


def global_average_pool(input) -> np.ndarray:
    input = _as_f64(input)
    if input.ndim != 4 or input.shape[2] * input.shape[3] < 1:
        raise ShapeError(f"global_average_pool expects a non-empty NCHW map, got {input.shape}")
    return input.mean(axis=(2, 3))


def global_average_pool_backward(input_shape, d_output) -> np.ndarray:
    n, c, h, w = input_shape
    d_output = _as_f64(d_output)
    if d_output.shape != (n, c):
        raise ShapeError(f"d_output shape {d_output.shape} != {(n, c)}")
    return np.broadcast_to(d_output[:, :, None, None] / (h * w), (n, c, h, w)).copy()


def l2_normalize(input, epsilon: float = NORM_EPS) -> np.ndarray:
    """Divide each row by ``max(||row||, epsilon)``."""
    input = _as_f64(input)
    norms = np.sqrt(np.sum(input * input, axis=-1, keepdims=True))
    return input / np.maximum(norms, epsilon)


def l2_normalize_backward(input, d_output, epsilon: float = NORM_EPS) -> np.ndarray:
    input, d_output = _as_f64(input), _as_f64(d_output)
    if input.shape != d_output.shape:
        raise ShapeError(f"l2_normalize_backward shapes differ: {input.shape} vs {d_output.shape}")
    norms = np.sqrt(np.sum(input * input, axis=-1, keepdims=True))
    active = norms >= epsilon
    safe = np.where(active, norms, epsilon)
    y = input / safe
    # rows below epsilon are a plain scaling by 1/epsilon
    projected = (d_output - y * np.sum(y * d_output, axis=-1, keepdims=True)) / safe
    return np.where(active, projected, d_output / epsilon)


def finite_difference_gradient(
    scalar_function: Callable[[np.ndarray], float], point, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of ``scalar_function`` at ``point``."""
    x = np.array(point, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(scalar_function(x))
        flat[i] = orig - eps
        f_minus = float(scalar_function(x))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            coord = tuple(int(c) for c in np.unravel_index(i, x.shape))
            raise FloatingPointError(
                f"non-finite function value near coordinate {coord}: f+={f_plus}, f-={f_minus}"
            )
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a| + |n|, floor)``.

    The floor keeps components that are zero up to round-off from
    dominating the ratio.
    """
    a, n = _as_f64(analytic), _as_f64(numeric)
    denom = np.maximum(np.abs(a) + np.abs(n), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
