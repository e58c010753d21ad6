"""
Volumetric layers with forward and backward rules.

All volumetric tensors use the (batch, channel, depth, height, width) layout.
Convolutions are cross-correlations evaluated one kernel offset at a time so
that memory stays proportional to the output, never to the patch matrix.
"""
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from src.config import config
from src.errors import DomainError, ShapeError
from src.tensor import Tensor, matmul, result

logger = logging.getLogger(__name__)


def _triple(value: int | Sequence[int]) -> tuple[int, int, int]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ShapeError(f"expected 3 spatial values, got {value}")
    return value


@dataclass
class Conv3dParams:
    weight: Tensor
    bias: Tensor
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.stride = _triple(self.stride)
        self.padding = _triple(self.padding)
        if self.weight.ndim != 5:
            raise ShapeError(f"conv weight must be 5-D, got {self.weight.shape}")
        if any(s < 1 for s in self.stride) or any(p < 0 for p in self.padding):
            raise ShapeError(f"invalid stride {self.stride} / padding {self.padding}")

    @property
    def kernel(self) -> tuple[int, int, int]:
        return self.weight.shape[2:]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = config.BN_MOMENTUM
    eps: float = config.BN_EPS

    def __post_init__(self):
        if np.any(self.running_var.data <= 0):
            raise DomainError("running_var must be strictly positive")
        if not 0.0 < self.momentum < 1.0:
            raise DomainError(f"momentum must lie in (0, 1), got {self.momentum}")


def conv_output_extents(extents, kernel, stride, padding) -> tuple[int, ...]:
    out = tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(extents, kernel, stride, padding))
    if any(o < 1 for o in out):
        raise ShapeError(
            f"non-positive output extent {out} for input {tuple(extents)}, kernel {tuple(kernel)}, "
            f"stride {tuple(stride)}, padding {tuple(padding)}"
        )
    return out


def transposed_output_extents(extents, kernel, stride, padding) -> tuple[int, ...]:
    out = tuple((n - 1) * s - 2 * p + k for n, k, s, p in zip(extents, kernel, stride, padding))
    if any(o < 1 for o in out):
        raise ShapeError(f"non-positive transposed output extent {out}")
    return out


def _window(extent_index: int, stride: int, count: int) -> slice:
    return slice(extent_index, extent_index + stride * count, stride)


def _correlate(xp: np.ndarray, weight: np.ndarray, stride, out_ext) -> np.ndarray:
    """(B, C, padded...) x (O, C, k...) -> (B, O, out...)"""
    batch = xp.shape[0]
    out = np.zeros((batch, weight.shape[0]) + tuple(out_ext), dtype=np.result_type(xp, weight))
    for i, j, k in np.ndindex(*weight.shape[2:]):
        window = xp[
            :, :,
            _window(i, stride[0], out_ext[0]),
            _window(j, stride[1], out_ext[1]),
            _window(k, stride[2], out_ext[2]),
        ]
        out += np.einsum("bcdhw,oc->bodhw", window, weight[:, :, i, j, k], optimize=True)
    return out


def _scatter(g: np.ndarray, weight: np.ndarray, stride, full_ext) -> np.ndarray:
    """Adjoint of `_correlate`: (B, O, out...) x (O, C, k...) -> (B, C, full...)"""
    out_ext = g.shape[2:]
    out = np.zeros((g.shape[0], weight.shape[1]) + tuple(full_ext), dtype=np.result_type(g, weight))
    for i, j, k in np.ndindex(*weight.shape[2:]):
        out[
            :, :,
            _window(i, stride[0], out_ext[0]),
            _window(j, stride[1], out_ext[1]),
            _window(k, stride[2], out_ext[2]),
        ] += np.einsum("bodhw,oc->bcdhw", g, weight[:, :, i, j, k], optimize=True)
    return out


def _kernel_grad(xp: np.ndarray, g: np.ndarray, kernel, stride) -> np.ndarray:
    """Gradient of `_correlate` w.r.t. its (O, C, k...) weight."""
    out_ext = g.shape[2:]
    grad = np.zeros((g.shape[1], xp.shape[1]) + tuple(kernel), dtype=np.result_type(xp, g))
    for i, j, k in np.ndindex(*kernel):
        window = xp[
            :, :,
            _window(i, stride[0], out_ext[0]),
            _window(j, stride[1], out_ext[1]),
            _window(k, stride[2], out_ext[2]),
        ]
        grad[:, :, i, j, k] = np.einsum("bcdhw,bodhw->oc", window, g, optimize=True)
    return grad


def _pad(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))


def _crop(x: np.ndarray, padding, extents) -> np.ndarray:
    index = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, extents))
    return x[index]


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def conv3d(x: Tensor, p: Conv3dParams) -> Tensor:
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be 5-D, got {x.shape}")
    out_ch, in_ch = p.weight.shape[:2]
    if x.shape[1] != in_ch:
        raise ShapeError(f"conv3d expects {in_ch} input channels, got {x.shape[1]}")
    if p.bias.shape != (out_ch,):
        raise ShapeError(f"conv3d bias must have shape ({out_ch},), got {p.bias.shape}")
    extents = x.shape[2:]
    out_ext = conv_output_extents(extents, p.kernel, p.stride, p.padding)
    xp = _pad(x.data, p.padding)
    w = p.weight.data
    y = _correlate(xp, w, p.stride, out_ext) + _channel_view(p.bias.data, 5)

    def rule(g):
        gx = _crop(_scatter(g, w, p.stride, xp.shape[2:]), p.padding, extents)
        gw = _kernel_grad(xp, g, p.kernel, p.stride)
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2, 3, 4))

    return result("conv3d", y, (x, p.weight, p.bias), rule)


def conv_transpose3d(x: Tensor, p: Conv3dParams) -> Tensor:
    """Adjoint of `conv3d`; the weight is laid out (in_ch, out_ch, k...)."""
    if x.ndim != 5:
        raise ShapeError(f"conv_transpose3d input must be 5-D, got {x.shape}")
    in_ch, out_ch = p.weight.shape[:2]
    if x.shape[1] != in_ch:
        raise ShapeError(f"conv_transpose3d expects {in_ch} input channels, got {x.shape[1]}")
    if p.bias.shape != (out_ch,):
        raise ShapeError(f"conv_transpose3d bias must have shape ({out_ch},), got {p.bias.shape}")
    extents = x.shape[2:]
    out_ext = transposed_output_extents(extents, p.kernel, p.stride, p.padding)
    full_ext = tuple(n + 2 * pad for n, pad in zip(out_ext, p.padding))
    w = p.weight.data
    y = _crop(_scatter(x.data, w, p.stride, full_ext), p.padding, out_ext)
    y = y + _channel_view(p.bias.data, 5)

    def rule(g):
        gp = _pad(g, p.padding)
        gx = _correlate(gp, w, p.stride, extents)
        gw = _kernel_grad(gp, x.data, p.kernel, p.stride)
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return result("conv_transpose3d", y, (x, p.weight, p.bias), rule)


def batch_norm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """
    Per-channel normalization over batch and spatial positions.

    In training mode the batch statistics are used and ``p.running_mean`` /
    ``p.running_var`` are replaced by their momentum-updated successors
    (running variance uses the unbiased estimate). Inference mode normalizes
    with the running statistics.
    """
    if x.ndim < 2 or x.shape[1] != p.gamma.shape[0]:
        raise ShapeError(f"batch_norm expects {p.gamma.shape[0]} channels, got shape {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    gamma = _channel_view(p.gamma.data, x.ndim)
    beta = _channel_view(p.beta.data, x.ndim)
    data = x.data

    if training:
        n = data.size // data.shape[1]
        if n < 2:
            raise DomainError(f"batch_norm needs at least 2 positions per channel, got {n}")
        mu = data.mean(axis=axes, keepdims=True)
        var = data.var(axis=axes, keepdims=True)
        m = p.momentum
        p.running_mean = Tensor.wrap((1 - m) * p.running_mean.data + m * mu.reshape(-1))
        p.running_var = Tensor.wrap((1 - m) * p.running_var.data + m * var.reshape(-1) * n / (n - 1))
    else:
        n = None
        mu = _channel_view(p.running_mean.data, x.ndim)
        var = _channel_view(p.running_var.data, x.ndim)

    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = (data - mu) * inv
    y = gamma * xhat + beta

    def rule(g):
        dxhat = g * gamma
        if training:
            dx = inv / n * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return result("batch_norm", y, (x, p.gamma, p.beta), rule)


def elu(x: Tensor, alpha: float = config.ELU_ALPHA) -> Tensor:
    positive = x.data >= 0
    negative_part = alpha * np.expm1(np.minimum(x.data, 0))
    y = np.where(positive, x.data, negative_part)
    return result("elu", y, (x,), lambda g: (g * np.where(positive, 1.0, negative_part + alpha),))


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return result("relu", x.data * positive, (x,), lambda g: (g * positive,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = shifted / shifted.sum(axis=axis, keepdims=True)
    return result("softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def adaptive_max_pool_to_vector(x: Tensor) -> Tensor:
    """Global per-channel maximum; ties route the gradient to the first position."""
    if x.ndim < 3:
        raise ShapeError(f"adaptive max pooling needs spatial axes, got {x.shape}")
    batch, channels = x.shape[:2]
    flat = x.data.reshape(batch, channels, -1)
    argmax = flat.argmax(axis=-1)
    values = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    def rule(g):
        grad = np.zeros_like(flat)
        np.put_along_axis(grad, argmax[..., None], g[..., None], axis=-1)
        return (grad.reshape(x.shape),)

    return result("adaptive_max_pool", values, (x,), rule)


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Adds a per-channel bias along axis 1."""
    if x.ndim < 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"bias {bias.shape} does not match channels of {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    return result(
        "bias_add", x.data + _channel_view(bias.data, x.ndim), (x, bias),
        lambda g: (g, g.sum(axis=axes)),
    )


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x·W + b with W laid out (in_features, out_features)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected width mismatch: input {x.shape}, weight {weight.shape}")
    return bias_add(matmul(x, weight), bias)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so inference is identity."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise DomainError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return result("dropout", x.data * keep, (x,), lambda g: (g * keep,))
