"""Differentiable network operations built on camcal.core.tensor."""

from typing import Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .models import InvalidArgumentError
from .tensor import Operand, Tensor, as_tensor, relu, reshape, sigmoid

__all__ = [
    "conv2d",
    "max_pool2d",
    "global_avg_pool",
    "l2_normalize",
    "softmax_cross_entropy",
    "resize_bilinear",
    "relu",
    "sigmoid",
]

L2_EPSILON = 1e-12


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    input: Operand,
    kernel: Operand,
    bias: Operand = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of [N,C_in,H,W] with [C_out,C_in,kH,kW].

    Raises:
        InvalidArgumentError: On rank or channel mismatch, bad stride/padding,
            or a kernel larger than the padded input
    """
    x, k = as_tensor(input), as_tensor(kernel)
    if x.ndim != 4 or k.ndim != 4:
        raise InvalidArgumentError(f"conv2d needs 4-D input and kernel, got {x.shape}, {k.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = k.shape
    if c != c_in:
        raise InvalidArgumentError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")
    if stride < 1 or padding < 0:
        raise InvalidArgumentError("conv2d needs stride >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise InvalidArgumentError(f"kernel {kh}x{kw} exceeds padded input {h}x{w} (pad {padding})")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    # [N, C, Ho, Wo, kH, kW]
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][
        :, :, :ho, :wo
    ]
    out = np.tensordot(windows, k.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        rows = stride * (ho - 1) + 1
        cols = stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, k.data[:, :, i, j], axes=([1], [0]))
                gxp[:, :, i:i + rows:stride, j:j + cols:stride] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    result = Tensor.from_op(np.ascontiguousarray(out, dtype=x.dtype), (x, k), grad_fn, "conv2d")
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (c_out,):
            raise InvalidArgumentError(f"conv2d bias must have shape ({c_out},), got {b.shape}")
        result = result + reshape(b, (1, c_out, 1, 1))
    return result


def max_pool2d(input: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    x = as_tensor(input)
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise InvalidArgumentError(f"max_pool2d window {size} larger than input {h}x{w}")
    crop = x.data[:, :, :ho * size, :wo * size]
    blocks = (
        crop.reshape(n, c, ho, size, wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, size * size)
    )
    index = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, index[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        scattered = np.zeros_like(blocks)
        np.put_along_axis(scattered, index[..., None], g[..., None], axis=-1)
        full = np.zeros_like(x.data)
        full[:, :, :ho * size, :wo * size] = (
            scattered.reshape(n, c, ho, wo, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho * size, wo * size)
        )
        return (full,)

    return Tensor.from_op(out, (x,), grad_fn, "max_pool2d")


def global_avg_pool(input: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: [N,C,H,W] -> [N,C] or [C,H,W] -> [C]."""
    x = as_tensor(input)
    if x.ndim not in (3, 4) or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise InvalidArgumentError(f"global_avg_pool needs [N,C,H,W] or [C,H,W], got {x.shape}")
    return x.mean(axis=(x.ndim - 2, x.ndim - 1))


def l2_normalize(v: Tensor, epsilon: float = L2_EPSILON, axis: int = -1) -> Tensor:
    """Scale each slice along `axis` to unit norm; slices with norm <= epsilon are divided by epsilon."""
    x = as_tensor(v)
    norm = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    large = norm > epsilon
    denom = np.where(large, norm, epsilon)
    out = (x.data / denom).astype(x.dtype)

    def grad_fn(g):
        along = (g * out).sum(axis=axis, keepdims=True)
        projected = (g - out * along) / denom
        return (np.where(large, projected, g / epsilon),)

    return Tensor.from_op(out, (x,), grad_fn, "l2_normalize")


def softmax_cross_entropy(logits: Tensor, labels: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """Mean softmax cross-entropy of [B,N] logits (or one [N] vector) against integer labels."""
    z = as_tensor(logits)
    single = z.ndim == 1
    data = z.data[None, :] if single else z.data
    targets = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if data.ndim != 2 or targets.shape != (data.shape[0],):
        raise InvalidArgumentError(f"labels {targets.shape} do not match logits {z.shape}")
    if targets.min() < 0 or targets.max() >= data.shape[1]:
        raise InvalidArgumentError("label outside [0, num_classes)")

    rows = np.arange(data.shape[0])
    shifted = data - data.max(axis=1, keepdims=True)
    log_sum = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(log_sum - shifted[rows, targets])

    def grad_fn(g):
        probs = np.exp(shifted - log_sum[:, None])
        probs[rows, targets] -= 1.0
        grad = g * probs / data.shape[0]
        return (grad[0] if single else grad,)

    return Tensor.from_op(np.asarray(loss, dtype=z.dtype), (z,), grad_fn, "softmax_cross_entropy")


def resize_bilinear(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of a [C,h,w] array to [C,H,W].

    Output pixel i samples source coordinate i*(h-1)/(H-1), so corners map to
    corners and a same-size resize is the identity.
    """
    out_h, out_w = size
    _, h, w = image.shape

    def axis_coords(n_out: int, n_in: int):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        low = np.floor(pos).astype(np.int64)
        high = np.minimum(low + 1, n_in - 1)
        return low, high, pos - low

    y0, y1, fy = axis_coords(out_h, h)
    x0, x1, fx = axis_coords(out_w, w)
    top, bottom = image[:, y0, :], image[:, y1, :]
    rows = top + (bottom - top) * fy[None, :, None]
    left, right = rows[:, :, x0], rows[:, :, x1]
    return (left + (right - left) * fx[None, None, :]).astype(image.dtype)
