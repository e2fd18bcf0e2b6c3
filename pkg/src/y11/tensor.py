"""Dense NCHW tensors and the primitive kernels every network block is built from.

Everything is 32-bit float and pure: kernels never mutate their inputs and
always return freshly allocated tensors. Convolution runs as im2col plus one
matrix multiply (with grouped and depthwise variants), but its semantics are
pinned to direct zero-padded convolution; the test suite checks it against an
independent naive implementation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ConvSpec",
    "BatchNormParams",
    "conv2d",
    "fold_batchnorm",
    "silu",
    "sigmoid",
    "maxpool2d",
    "upsample_nearest2x",
    "concat_channels",
    "split_channels",
    "softmax_lastaxis",
    "conv_output_dim",
]


class Tensor:
    """Rank-4 float32 array laid out batch, channel, height, width.

    The wrapped buffer is contiguous and marked read-only, so feature maps can
    be shared between graph layers without defensive copies.
    """

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float32, order="C")
        if arr.ndim != 4:
            raise ValueError(f"tensor must be rank 4 (NCHW), got rank {arr.ndim}")
        arr.flags.writeable = False
        self.data: np.ndarray = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: take ownership of a freshly computed array.
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        arr.flags.writeable = False
        t = object.__new__(cls)
        t.data = arr
        return t

    @classmethod
    def zeros(cls, n: int, c: int, h: int, w: int) -> "Tensor":
        return cls._wrap(np.zeros((n, c, h, w), dtype=np.float32))

    @classmethod
    def full(cls, n: int, c: int, h: int, w: int, value: float) -> "Tensor":
        return cls._wrap(np.full((n, c, h, w), value, dtype=np.float32))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    def __add__(self, other: "Tensor") -> "Tensor":
        if self.shape != other.shape:
            raise ValueError(f"cannot add tensors of shapes {self.shape} and {other.shape}")
        return Tensor._wrap(self.data + other.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def conv_output_dim(d: int, k: int, stride: int, padding: int) -> int:
    """Output extent along one axis: floor((d + 2p - k) / s) + 1."""
    return (d + 2 * padding - k) // stride + 1


@dataclass
class ConvSpec:
    """Geometry plus parameters of one 2-D convolution.

    Constraints: square kernel of size 1 or 3, stride 1 or 2, shape-preserving
    padding k//2, dilation fixed at 1. Weight layout is
    (out_channels, in_channels // groups, k, k); bias is optional.
    """

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int | None = None
    groups: int = 1
    dilation: int = 1
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.dilation != 1:
            raise ValueError("dilation is fixed at 1")
        if self.padding is None:
            self.padding = self.kernel // 2
        if self.padding != self.kernel // 2:
            raise ValueError(f"padding must be kernel//2 = {self.kernel // 2}, got {self.padding}")
        if self.groups < 1:
            raise ValueError("groups must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels} in, {self.out_channels} out) "
                f"not divisible by groups={self.groups}"
            )
        wshape = (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)
        if self.weight is None:
            self.weight = np.zeros(wshape, dtype=np.float32)
        else:
            self.weight = np.asarray(self.weight, dtype=np.float32)
            if self.weight.shape != wshape:
                raise ValueError(f"weight shape {self.weight.shape} does not match spec {wshape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float32)
            if self.bias.shape != (self.out_channels,):
                raise ValueError(
                    f"bias shape {self.bias.shape} does not match ({self.out_channels},)"
                )

    @property
    def weight_count(self) -> int:
        return int(self.weight.size)


@dataclass
class BatchNormParams:
    """Per-channel inference-time batch-norm statistics and affine parameters."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-3

    def __post_init__(self) -> None:
        self.gamma = np.asarray(self.gamma, dtype=np.float32)
        self.beta = np.asarray(self.beta, dtype=np.float32)
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.var = np.asarray(self.var, dtype=np.float32)
        shapes = {a.shape for a in (self.gamma, self.beta, self.mean, self.var)}
        if len(shapes) != 1 or self.gamma.ndim != 1:
            raise ValueError("batch-norm parameters must be 1-D arrays of equal length")
        if np.any(self.var < 0):
            raise ValueError("running variance must be non-negative")
        if not self.eps > 0:
            raise ValueError("epsilon must be positive")

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-3) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype=np.float32),
            beta=np.zeros(channels, dtype=np.float32),
            mean=np.zeros(channels, dtype=np.float32),
            var=np.ones(channels, dtype=np.float32),
            eps=eps,
        )

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Fold statistics into a per-channel (scale, shift) pair."""
        scale = self.gamma / np.sqrt(self.var + np.float32(self.eps))
        shift = self.beta - self.mean * scale
        return scale.astype(np.float32), shift.astype(np.float32)


def _window_view(data: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, OH, OW, K, K) strided view over an already padded array.
    win = np.lib.stride_tricks.sliding_window_view(data, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """2-D convolution with zero padding, exact direct-convolution semantics.

    Output dims are N x out_channels x floor((H+2p-k)/s)+1 x floor((W+2p-k)/s)+1.
    """
    if x.c != spec.in_channels:
        raise ValueError(f"conv2d: input has {x.c} channels, spec expects {spec.in_channels}")
    k, s, p, g = spec.kernel, spec.stride, spec.padding, spec.groups
    oh = conv_output_dim(x.h, k, s, p)
    ow = conv_output_dim(x.w, k, s, p)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d: non-positive output dims {oh}x{ow} for input {x.h}x{x.w}")

    data = x.data
    if p:
        data = np.pad(data, ((0, 0), (0, 0), (p, p), (p, p)))
    n, c_out = x.n, spec.out_channels
    w = spec.weight

    if k == 1 and g == 1:
        # Pointwise fast path: no window materialization needed.
        cols = np.ascontiguousarray(data[:, :, ::s, ::s]).reshape(n, x.c, oh * ow)
        out = np.matmul(w.reshape(c_out, x.c), cols)
    else:
        win = _window_view(data, k, s)
        if g == 1:
            cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
            cols = cols.reshape(n, x.c * k * k, oh * ow)
            out = np.matmul(w.reshape(c_out, x.c * k * k), cols)
        elif g == x.c and c_out == x.c:
            # Depthwise: one small kernel per channel.
            out = np.einsum("ncijkl,ckl->ncij", win, w[:, 0]).reshape(n, c_out, oh * ow)
        else:
            cpg, opg = x.c // g, c_out // g
            parts = []
            for gi in range(g):
                wi = w[gi * opg : (gi + 1) * opg].reshape(opg, cpg * k * k)
                ci = np.ascontiguousarray(
                    win[:, gi * cpg : (gi + 1) * cpg].transpose(0, 1, 4, 5, 2, 3)
                ).reshape(n, cpg * k * k, oh * ow)
                parts.append(np.matmul(wi, ci))
            out = np.concatenate(parts, axis=1)

    out = out.reshape(n, c_out, oh, ow).astype(np.float32, copy=False)
    if spec.bias is not None:
        out = out + spec.bias.reshape(1, c_out, 1, 1)
    return Tensor._wrap(out)


def fold_batchnorm(spec: ConvSpec, bn: BatchNormParams) -> ConvSpec:
    """Fuse a batch-norm that follows `spec` into an equivalent convolution.

    Per channel: scale = gamma / sqrt(var + eps); the folded weight is the
    original scaled by that factor and the folded bias absorbs mean and beta.
    """
    if bn.channels != spec.out_channels:
        raise ValueError(
            f"fold_batchnorm: bn has {bn.channels} channels, conv outputs {spec.out_channels}"
        )
    scale, shift = bn.scale_shift()
    weight = spec.weight * scale[:, None, None, None]
    bias = shift if spec.bias is None else spec.bias * scale + shift
    return ConvSpec(
        in_channels=spec.in_channels,
        out_channels=spec.out_channels,
        kernel=spec.kernel,
        stride=spec.stride,
        padding=spec.padding,
        groups=spec.groups,
        weight=weight.astype(np.float32),
        bias=bias.astype(np.float32),
    )


def _sigmoid_array(a: np.ndarray) -> np.ndarray:
    # Piecewise form never exponentiates a positive argument, so no overflow.
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, 1 / (1 + exp(-x)); image in (0, 1)."""
    return Tensor._wrap(_sigmoid_array(x.data))


def silu(x: Tensor) -> Tensor:
    """Elementwise x * sigmoid(x)."""
    return Tensor._wrap(x.data * _sigmoid_array(x.data))


def maxpool2d(x: Tensor, k: int, stride: int, padding: int) -> Tensor:
    """Max pooling; padded cells are -inf so they never win over real values."""
    if k < 1:
        raise ValueError("pool kernel must be >= 1")
    if stride < 1:
        raise ValueError("pool stride must be >= 1")
    if padding < 0 or padding > k // 2:
        raise ValueError(f"pool padding must be in [0, {k // 2}] for kernel {k}")
    oh = conv_output_dim(x.h, k, stride, padding)
    ow = conv_output_dim(x.w, k, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"maxpool2d: non-positive output dims {oh}x{ow}")
    data = x.data
    if padding:
        data = np.pad(
            data,
            ((0, 0), (0, 0), (padding, padding), (padding, padding)),
            constant_values=np.float32(-np.inf),
        )
    win = np.lib.stride_tricks.sliding_window_view(data, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return Tensor._wrap(win.max(axis=(4, 5)))


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block; dims become N x C x 2H x 2W."""
    return Tensor._wrap(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, preserving argument order."""
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    first = parts[0]
    for t in parts[1:]:
        if (t.n, t.h, t.w) != (first.n, first.h, first.w):
            raise ValueError(
                f"concat_channels: mismatched dims {t.shape} vs {first.shape} "
                "(batch and spatial extents must agree)"
            )
    if len(parts) == 1:
        return first
    return Tensor._wrap(np.concatenate([t.data for t in parts], axis=1))


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of concat_channels: slice the channel axis into the given sizes."""
    if sum(sizes) != x.c:
        raise ValueError(f"split sizes {list(sizes)} do not sum to {x.c} channels")
    out, start = [], 0
    for s in sizes:
        out.append(Tensor._wrap(x.data[:, start : start + s]))
        start += s
    return out


def softmax_lastaxis(a: np.ndarray) -> np.ndarray:
    """Row-stable softmax over the last axis of an arbitrary float array."""
    a = np.asarray(a, dtype=np.float32)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
