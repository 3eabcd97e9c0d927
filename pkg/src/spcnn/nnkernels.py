"""Forward/backward kernels for the layers of an AlexNet-style stream.

Tensors are plain numpy arrays. 4-D activations use NCHW layout. Every
kernel preserves the dtype of its inputs, so the same code runs in float32
(the default everywhere) and float64 (used by the gradient-check suite).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DataError, StateError

DTYPE = np.float32


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def pool_output_size(size: int, kernel: int, stride: int) -> int:
    """Ceil-mode output size; a last window starting past the input is dropped."""
    out = -(-(size - kernel) // stride) + 1
    if (out - 1) * stride >= size:
        out -= 1
    return out


@dataclass
class ConvParams:
    kernel_size: int
    stride: int
    pad: int
    in_channels: int
    out_channels: int
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.pad < 0:
            raise ConfigurationError(
                f"conv geometry invalid: kernel={self.kernel_size} "
                f"stride={self.stride} pad={self.pad}"
            )
        k = self.kernel_size
        expected = (self.out_channels, self.in_channels, k, k)
        if tuple(self.weights.shape) != expected:
            raise ConfigurationError(
                f"conv weights shape {tuple(self.weights.shape)} != {expected}"
            )
        if tuple(self.bias.shape) != (self.out_channels,):
            raise ConfigurationError(
                f"conv bias shape {tuple(self.bias.shape)} != ({self.out_channels},)"
            )

    @classmethod
    def from_arrays(cls, weights, bias, stride=1, pad=0):
        out_c, in_c, k, _ = weights.shape
        return cls(k, stride, pad, in_c, out_c, weights, bias)


@dataclass
class PoolParams:
    kernel_size: int
    stride: int
    # filled by maxpool_forward, consumed by maxpool_backward
    argmax: Optional[np.ndarray] = field(default=None, repr=False)
    input_shape: Optional[tuple] = None

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1:
            raise ConfigurationError(
                f"pool geometry invalid: kernel={self.kernel_size} stride={self.stride}"
            )


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _conv_windows(xp, k, stride):
    # (N, C, Ho, Wo, k, k) strided view; no copy
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    if x.ndim != 4:
        raise ConfigurationError(f"conv input must be 4-D NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ConfigurationError(
            f"conv input channels: got {c}, layer expects {p.in_channels}"
        )
    k = p.kernel_size
    if h + 2 * p.pad < k:
        raise ConfigurationError(f"conv input height {h} (+2*pad {p.pad}) < kernel {k}")
    if w + 2 * p.pad < k:
        raise ConfigurationError(f"conv input width {w} (+2*pad {p.pad}) < kernel {k}")
    cols = _conv_windows(_pad(x, p.pad), k, p.stride)
    out = np.tensordot(cols, p.weights, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
    out += p.bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray,
                    need_input_grad: bool = True):
    """Return ``(grad_input, grad_weights, grad_bias)``.

    ``grad_input`` is None when ``need_input_grad`` is false (first layer).
    """
    n, c, h, w = x.shape
    k, s = p.kernel_size, p.stride
    ho = conv_output_size(h, k, s, p.pad)
    wo = conv_output_size(w, k, s, p.pad)
    if tuple(grad_out.shape) != (n, p.out_channels, ho, wo):
        raise ConfigurationError(
            f"conv grad_out shape {tuple(grad_out.shape)} != {(n, p.out_channels, ho, wo)}"
        )
    xp = _pad(x, p.pad)
    cols = _conv_windows(xp, k, s)
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))  # O,C,k,k
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = grad_w.astype(x.dtype, copy=False)
    grad_b = grad_b.astype(x.dtype, copy=False)
    if not need_input_grad:
        return None, grad_w, grad_b
    dcols = np.tensordot(grad_out, p.weights, axes=([1], [0]))  # N,Ho,Wo,C,k,k
    dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros_like(xp)
    span_h = s * (ho - 1) + 1
    span_w = s * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + span_h:s, j:j + span_w:s] += dcols[..., i, j]
    if p.pad:
        dxp = dxp[:, :, p.pad:p.pad + h, p.pad:p.pad + w]
    return np.ascontiguousarray(dxp), grad_w, grad_b


def maxpool_forward(x: np.ndarray, p: PoolParams) -> np.ndarray:
    n, c, h, w = x.shape
    k, s = p.kernel_size, p.stride
    if k > h or k > w:
        raise ConfigurationError(f"pool kernel {k} larger than input {h}x{w}")
    ho, wo = pool_output_size(h, k, s), pool_output_size(w, k, s)
    # windows may overhang the input (ceil mode) or leave a tail unused (k < s)
    ph, pw = max((ho - 1) * s + k, h), max((wo - 1) * s + k, w)
    xp = np.full((n, c, ph, pw), -np.inf, dtype=x.dtype)
    xp[:, :, :h, :w] = x
    win = _conv_windows(xp, k, s).reshape(n, c, ho, wo, k * k)
    local = win.argmax(axis=-1)  # first occurrence = lowest flat index
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    # translate window-local index into a flat index of x
    iy = np.arange(ho)[:, None] * s + local // k
    ix = np.arange(wo)[None, :] * s + local % k
    base = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)
    p.argmax = base[:, :, None, None] + iy * w + ix
    p.input_shape = x.shape
    return np.ascontiguousarray(out)


def maxpool_backward(p: PoolParams, grad_out: np.ndarray) -> np.ndarray:
    if p.argmax is None:
        raise StateError("maxpool_backward called before maxpool_forward")
    if grad_out.shape != p.argmax.shape:
        raise ConfigurationError(
            f"pool grad_out shape {grad_out.shape} != {p.argmax.shape}"
        )
    size = int(np.prod(p.input_shape))
    g = np.bincount(p.argmax.ravel(), weights=grad_out.ravel(), minlength=size)
    return g.astype(grad_out.dtype).reshape(p.input_shape)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def linear_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ConfigurationError(
            f"linear: input {x.shape} incompatible with weights {weights.shape}"
        )
    if bias.shape != (weights.shape[1],):
        raise ConfigurationError(
            f"linear: bias {bias.shape} incompatible with weights {weights.shape}"
        )
    return x @ weights + bias


def linear_backward(x, weights, grad_out):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    if grad_out.shape != (x.shape[0], weights.shape[1]):
        raise ConfigurationError(
            f"linear grad_out shape {grad_out.shape} != {(x.shape[0], weights.shape[1])}"
        )
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def dropout(x, rate, rng, training=True):
    """Inverted dropout. Returns ``(output, mask)``; mask is None when inactive.

    The mask already carries the ``1/(1-rate)`` survivor scale, so the
    backward pass is ``grad * mask``.
    """
    if not 0 <= rate < 1:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def dropout_backward(mask, grad_out):
    return grad_out if mask is None else grad_out * mask


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"sample {i}: label {int(labels[i])} outside [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference normalised by the larger of the two max magnitudes.

    Defined as 0 when both gradients are identically zero.
    """
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float,
                       indices=None) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``x``, perturbing in place.

    With ``indices`` only those flat positions are evaluated (others stay 0).
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    if not x.flags.c_contiguous:
        raise StateError("numerical_gradient needs a C-contiguous array")
    flat_x, flat_g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat_x.size) if indices is None else indices:
        orig = flat_x[i]
        flat_x[i] = orig + eps
        hi = f()
        flat_x[i] = orig - eps
        lo = f()
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2 * eps)
    return grad


def grad_check(f: Callable[[], float], tensors: Mapping[str, np.ndarray],
               analytic: Mapping[str, np.ndarray], eps: float = 1e-3) -> dict[str, float]:
    """Compare analytic gradients against central finite differences.

    ``f`` closes over ``tensors`` and is re-evaluated after each in-place
    perturbation. Returns the relative error per tensor name; the overall
    figure is ``max(result.values())``.
    """
    return {
        name: relative_error(analytic[name], numerical_gradient(f, x, eps))
        for name, x in tensors.items()
    }
