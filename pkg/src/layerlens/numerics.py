"""Float64 forward/backward primitives for small convolutional networks.

Every operation is a pure function: arrays in, new arrays out, no hidden
state. Analytic backward passes are checked against ``finite_diff_grad``
in the test suite. Activations live in (batch, channels, height, width)
rank-4 arrays throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

# Rank-4 activation array: (batch, channels, height, width), float64.
Tensor4 = np.ndarray


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_tensor4(x, name: str = "input") -> np.ndarray:
    x = as_f64(x)
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (n, c, h, w), got shape {x.shape}")
    return x


@dataclass
class LayerGrad:
    """Uniform gradient bundle: input gradient plus flattened parameter gradient."""

    d_input: np.ndarray
    d_params: np.ndarray  # empty for parameterless layers

    @classmethod
    def pack(cls, d_input: np.ndarray, *param_grads: np.ndarray) -> "LayerGrad":
        if param_grads:
            flat = np.concatenate([as_f64(g).ravel() for g in param_grads])
        else:
            flat = np.empty(0, dtype=np.float64)
        return cls(d_input=d_input, d_params=flat)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, tuple):
        return v
    return (int(v), int(v))


def _out_len(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad) -> np.ndarray:
    """Strided view of all (kh, kw) patches, subsampled by stride.

    Returns shape (n, c, oh, ow, kh, kw) over the zero-padded input.
    """
    ph, pw = _pair(pad)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, kernel, bias=None, stride: int = 1, pad=0) -> Tensor4:
    """Cross-correlation of ``x`` (n, c, h, w) with ``kernel`` (out_c, c, kh, kw)."""
    x = check_tensor4(x, "conv input")
    kernel = as_f64(kernel)
    if kernel.ndim != 4:
        raise ShapeError(f"conv kernel: expected rank-4, got shape {kernel.shape}")
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = kernel.shape
    if in_c != c:
        raise ShapeError(
            f"conv channel mismatch: input shape {x.shape} has {c} channels, "
            f"kernel shape {kernel.shape} expects {in_c}"
        )
    if stride < 1:
        raise ShapeError(f"conv stride must be >= 1, got {stride}")
    ph, pw = _pair(pad)
    oh, ow = _out_len(h, kh, stride, ph), _out_len(w, kw, stride, pw)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv output collapses: input {x.shape}, kernel {kernel.shape}, "
            f"stride {stride}, pad {pad} -> ({oh}, {ow})"
        )
    win = _windows(x, kh, kw, stride, pad)
    y = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))  # (n, oh, ow, out_c)
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    if bias is not None:
        bias = as_f64(bias)
        if bias.shape != (out_c,):
            raise ShapeError(f"conv bias shape {bias.shape} != ({out_c},)")
        y += bias[None, :, None, None]
    return y


def conv2d_param_grads(x, kernel_shape, d_out, stride: int = 1, pad=0):
    """Kernel/bias gradients only (cheaper when the input is frozen)."""
    x = check_tensor4(x, "conv input")
    d_out = check_tensor4(d_out, "conv upstream gradient")
    out_c, in_c, kh, kw = kernel_shape
    win = _windows(x, kh, kw, stride, pad)
    d_kernel = np.tensordot(d_out, win, axes=([0, 2, 3], [0, 2, 3]))
    d_bias = d_out.sum(axis=(0, 2, 3))
    return d_kernel, d_bias


def conv2d_backward(x, kernel, d_out, stride: int = 1, pad=0):
    """Analytic gradients of conv2d: returns (d_input, d_kernel, d_bias)."""
    x = check_tensor4(x, "conv input")
    kernel = as_f64(kernel)
    d_out = check_tensor4(d_out, "conv upstream gradient")
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = kernel.shape
    ph, pw = _pair(pad)

    d_kernel, d_bias = conv2d_param_grads(x, kernel.shape, d_out, stride, pad)

    # d_input: scatter d_out onto the stride grid, then full-correlate with the
    # flipped kernel (transposed convolution).
    hd, wd = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    d_dil = np.zeros((n, out_c, hd, wd), dtype=np.float64)
    d_dil[:, :, ::stride, ::stride] = d_out
    k_flip = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    d_full = conv2d(d_dil, k_flip, None, stride=1, pad=(kh - 1, kw - 1))
    d_input = d_full[:, :, ph:ph + h, pw:pw + w]
    return d_input, d_kernel, d_bias


def relu(x) -> np.ndarray:
    return np.maximum(as_f64(x), 0.0)


def relu_backward(x, d_out) -> np.ndarray:
    x = as_f64(x)
    return np.where(x > 0, as_f64(d_out), 0.0)


def maxpool2d(x, window: int, stride: int | None = None) -> Tensor4:
    """Per-window maximum; trailing partial windows are truncated."""
    x = check_tensor4(x, "pool input")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input spatial dims {(h, w)}")
    win = _windows(x, window, window, stride, 0)
    return win.max(axis=(4, 5))


def maxpool2d_backward(x, d_out, window: int, stride: int | None = None) -> np.ndarray:
    """Routes gradient to each window's argmax, first occurrence in row-major order."""
    x = check_tensor4(x, "pool input")
    d_out = check_tensor4(d_out, "pool upstream gradient")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    win = _windows(x, window, window, stride, 0)
    oh, ow = win.shape[2], win.shape[3]
    arg = win.reshape(n, c, oh, ow, -1).argmax(axis=-1)
    rows, cols = arg // window, arg % window
    ni, ci, oi, oj = np.indices((n, c, oh, ow))
    d_x = np.zeros_like(x)
    np.add.at(d_x, (ni, ci, oi * stride + rows, oj * stride + cols), d_out)
    return d_x


def dense(x, weights, bias) -> np.ndarray:
    """Affine map: x (n, d) @ weights (k, d)^T + bias (k,)."""
    x = as_f64(x)
    weights = as_f64(weights)
    bias = as_f64(bias)
    if x.ndim != 2:
        raise ShapeError(f"dense input: expected rank-2 (n, d), got shape {x.shape}")
    if weights.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise ShapeError(
            f"dense shape mismatch: input {x.shape} vs weights {weights.shape} "
            f"(weight columns must equal input length)"
        )
    return x @ weights.T + bias


def dense_backward(x, weights, d_out):
    """Returns (d_input, d_weights, d_bias)."""
    x, weights, d_out = as_f64(x), as_f64(weights), as_f64(d_out)
    d_input = d_out @ weights
    d_weights = d_out.T @ x
    d_bias = d_out.sum(axis=0)
    return d_input, d_weights, d_bias


def softmax(scores) -> np.ndarray:
    s = as_f64(scores)
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(scores, labels):
    """Negative log-softmax loss.

    Accepts a single score vector with an integer label, or a (n, k) batch
    with (n,) labels; batches are mean-reduced (gradient divided by n).
    Returns (loss, d_scores). The max-shift keeps exp() overflow-safe.
    """
    s = as_f64(scores)
    single = s.ndim == 1
    s2 = s[None, :] if single else s
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = s2.shape
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match scores {s2.shape}")
    if np.any(y < 0) or np.any(y >= k):
        raise ShapeError(f"label out of range [0, {k}) in {y}")
    z = s2 - s2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    losses = logsum - z[np.arange(n), y]
    loss = float(losses.mean())
    d = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    d[np.arange(n), y] -= 1.0
    d /= n
    return loss, (d[0] if single else d)


def sgd_update(params, grads, lr: float, momentum: float, velocity=None):
    """Classic momentum step: v' = momentum*v - lr*g; p' = p + v'.

    Returns (new_params, new_velocity); pass the velocity back in on the
    next call. Pure function of its inputs, hence deterministic.
    """
    p, g = as_f64(params), as_f64(grads)
    if p.shape != g.shape:
        raise ShapeError(f"sgd shapes differ: params {p.shape} vs grads {g.shape}")
    v = np.zeros_like(p) if velocity is None else as_f64(velocity)
    if v.shape != p.shape:
        raise ShapeError(f"sgd velocity shape {v.shape} != params {p.shape}")
    v_new = momentum * v - lr * g
    return p + v_new, v_new


def finite_diff_grad(f, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued f at x, per coordinate."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = as_f64(x)
    g = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        g.ravel()[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * eps)
    return g
