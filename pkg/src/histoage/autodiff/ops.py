"""
Differentiable ops on channel-last tensors.

Layouts: images are (N, H, W, C); conv kernels (k, k, C_in, C_out);
fully connected weights (in, out). Every op checks its input shapes through
output_shape(), which is also the public shape-inference entry point.
"""
import math

import numpy as np

from histoage.autodiff.tensor import Tensor, record
from histoage.utils.errors import DegenerateEmbeddingError, ShapeError


# ---------------------- Shape inference ----------------------

def output_shape(op: str, *shapes, **kwargs) -> tuple:
    """Shape an op produces for the given input shapes; raises ShapeError if they do not conform."""
    shapes = [tuple(s) for s in shapes]
    if op == "conv2d":
        x, w = shapes[0], shapes[1]
        if len(x) != 4 or len(w) != 4 or w[0] != w[1] or x[3] != w[2]:
            raise ShapeError(op, x, w)
        if len(shapes) > 2 and shapes[2] != (w[3],):
            raise ShapeError(op, w, shapes[2])
        k = w[0]
        if kwargs.get("padding", "same") == "same":
            return (x[0], x[1], x[2], w[3])
        if x[1] < k or x[2] < k:
            raise ShapeError(op, x, w)
        return (x[0], x[1] - k + 1, x[2] - k + 1, w[3])
    if op in ("relu", "scale", "l2_normalize", "batch_norm"):
        if op == "batch_norm":
            x, gamma, beta = shapes
            if gamma != (x[-1],) or beta != (x[-1],):
                raise ShapeError(op, x, gamma, beta)
        return shapes[0]
    if op == "max_pool":
        x = shapes[0]
        if len(x) != 4 or x[1] % 2 or x[2] % 2:
            raise ShapeError(op, x)
        return (x[0], x[1] // 2, x[2] // 2, x[3])
    if op == "global_average_pool":
        x = shapes[0]
        if len(x) != 4:
            raise ShapeError(op, x)
        return (x[0], x[3])
    if op == "fully_connected":
        x, w = shapes[0], shapes[1]
        if len(x) != 2 or len(w) != 2 or x[1] != w[0]:
            raise ShapeError(op, x, w)
        if len(shapes) > 2 and shapes[2] != (w[1],):
            raise ShapeError(op, w, shapes[2])
        return (x[0], w[1])
    if op in ("add", "mul"):
        a, b = shapes
        if a != b:
            raise ShapeError(op, a, b)
        return a
    if op == "reshape":
        x = shapes[0]
        target = tuple(kwargs["shape"])
        if math.prod(x) != math.prod(target):
            raise ShapeError(op, x, target)
        return target
    if op in ("sum", "mean"):
        x = shapes[0]
        axis = kwargs.get("axis")
        if axis is None:
            return ()
        axis = axis % len(x)
        return tuple(d for i, d in enumerate(x) if i != axis)
    raise ValueError(f"unknown op '{op}'")


# ---------------------- Convolution / pooling ----------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "same") -> Tensor:
    """Stride-1 2-D convolution, 'same' (zero padded) or 'valid'."""
    shapes = [x.shape, w.shape] + ([b.shape] if b is not None else [])
    out_shape = output_shape("conv2d", *shapes, padding=padding)
    k = w.shape[0]
    pad = k // 2 if padding == "same" else 0
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    _, ho, wo, _ = out_shape

    y = np.zeros(out_shape, dtype=np.result_type(x.data, w.data))
    for a in range(k):
        for c in range(k):
            y += xp[:, a:a + ho, c:c + wo, :] @ w.data[a, c]
    if b is not None:
        y += b.data

    def backward_fn(gy):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        flat_gy = gy.reshape(-1, gy.shape[-1])
        for a in range(k):
            for c in range(k):
                dxp[:, a:a + ho, c:c + wo, :] += gy @ w.data[a, c].T
                window = xp[:, a:a + ho, c:c + wo, :].reshape(-1, xp.shape[-1])
                dw[a, c] = window.T @ flat_gy
        dx = dxp[:, pad:pad + x.shape[1], pad:pad + x.shape[2], :] if pad else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(gy.sum(axis=(0, 1, 2)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv2d", y, inputs, backward_fn, padding=padding)


def max_pool(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties send the gradient to the first maximum."""
    n, h2, w2, ch = output_shape("max_pool", x.shape)
    windows = x.data.reshape(n, h2, 2, w2, 2, ch).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, ch, 4)
    idx = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward_fn(gy):
        g = np.zeros_like(windows)
        np.put_along_axis(g, idx[..., None], gy[..., None], axis=-1)
        dx = g.reshape(n, h2, w2, ch, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape)
        return [dx]

    return record("max_pool", y, (x,), backward_fn, argmax=idx)


def global_average_pool(x: Tensor) -> Tensor:
    output_shape("global_average_pool", x.shape)
    _, h, w, _ = x.shape
    y = x.data.mean(axis=(1, 2))

    def backward_fn(gy):
        return [np.broadcast_to(gy[:, None, None, :] / (h * w), x.shape).astype(x.dtype)]

    return record("global_average_pool", y, (x,), backward_fn)


# ---------------------- Dense layers ----------------------

def fully_connected(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    shapes = [x.shape, w.shape] + ([b.shape] if b is not None else [])
    output_shape("fully_connected", *shapes)
    y = x.data @ w.data
    if b is not None:
        y = y + b.data

    def backward_fn(gy):
        grads = [gy @ w.data.T, x.data.T @ gy]
        if b is not None:
            grads.append(gy.sum(axis=0))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return record("fully_connected", y, inputs, backward_fn)


class BatchNormState:
    """Running statistics for one batch-norm layer (buffers, not parameters)."""

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.running_mean = np.zeros(features, dtype=dtype)
        self.running_var = np.ones(features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """
    Normalise over every axis but the last. Training mode uses batch statistics
    and updates the running ones; eval mode uses the running statistics.
    """
    output_shape("batch_norm", x.shape, gamma.shape, beta.shape)
    axes = tuple(range(x.data.ndim - 1))
    count = x.data.size // x.shape[-1]

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean) * inv_std
        unbiased = var * count / (count - 1) if count > 1 else var
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv_std
    y = gamma.data * xhat + beta.data

    def backward_fn(gy):
        dgamma = (gy * xhat).sum(axis=axes)
        dbeta = gy.sum(axis=axes)
        dxhat = gy * gamma.data
        if training:
            dx = (inv_std / count) * (
                count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
            )
        else:
            dx = dxhat * inv_std
        return [dx.astype(x.dtype, copy=False), dgamma, dbeta]

    return record("batch_norm", y.astype(x.dtype, copy=False), (x, gamma, beta), backward_fn, training=training)


# ---------------------- Elementwise / reductions ----------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = np.where(mask, x.data, 0).astype(x.dtype)

    def backward_fn(gy):
        return [gy * mask]

    return record("relu", y, (x,), backward_fn)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateEmbeddingError("l2_normalize: zero-norm vector")
    y = x.data / norm

    def backward_fn(gy):
        return [(gy - y * (gy * y).sum(axis=axis, keepdims=True)) / norm]

    return record("l2_normalize", y, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    output_shape("add", a.shape, b.shape)

    def backward_fn(gy):
        return [gy, gy]

    return record("add", a.data + b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    output_shape("mul", a.shape, b.shape)

    def backward_fn(gy):
        return [gy * b.data, gy * a.data]

    return record("mul", a.data * b.data, (a, b), backward_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward_fn(gy):
        return [gy * factor]

    return record("scale", x.data * factor, (x,), backward_fn, factor=factor)


def reshape(x: Tensor, shape) -> Tensor:
    target = output_shape("reshape", x.shape, shape=shape)

    def backward_fn(gy):
        return [gy.reshape(x.shape)]

    return record("reshape", x.data.reshape(target), (x,), backward_fn)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    output_shape("sum", x.shape, axis=axis)
    y = x.data.sum(axis=axis)

    def backward_fn(gy):
        g = gy if axis is None else np.expand_dims(gy, axis)
        return [np.broadcast_to(g, x.shape).astype(x.dtype)]

    return record("sum", np.asarray(y), (x,), backward_fn)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    output_shape("mean", x.shape, axis=axis)
    count = x.data.size if axis is None else x.shape[axis]
    y = x.data.mean(axis=axis)

    def backward_fn(gy):
        g = gy if axis is None else np.expand_dims(gy, axis)
        return [(np.broadcast_to(g, x.shape) / count).astype(x.dtype)]

    return record("mean", np.asarray(y), (x,), backward_fn)
