"""Composite network blocks: Conv-BN-SiLU, CSP bottleneck family, SPPF, attention.

Blocks own their parameters and expose a pure ``forward``. Parameter traversal
for counting, initialization and weight files goes through ``children()`` /
``iter_leaf_blocks``; the leaves are always ConvBlock instances.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import (
    BatchNormParams,
    ConvSpec,
    Tensor,
    concat_channels,
    conv2d,
    maxpool2d,
    silu,
    softmax_lastaxis,
    split_channels,
)

__all__ = [
    "ConvBlock",
    "Bottleneck",
    "C2F",
    "C3K",
    "C3K2",
    "SPPF",
    "AttentionLayer",
    "PSABlock",
    "C2PSA",
    "iter_leaf_blocks",
]

# Cost model for count_flops: multiply-add counts as 2, bias/bn adds count
# out_elems each, sigmoid costs 3 per element and silu 4.
_SILU_COST = 4
_SOFTMAX_COST = 5


class ConvBlock:
    """Convolution, optional batch-norm, optional SiLU; the universal leaf."""

    def __init__(self, spec: ConvSpec, bn: BatchNormParams | None, act: str = "silu") -> None:
        if act not in ("silu", "none"):
            raise ValueError(f"unsupported activation {act!r}")
        if bn is not None and bn.channels != spec.out_channels:
            raise ValueError(
                f"batch-norm has {bn.channels} channels, conv outputs {spec.out_channels}"
            )
        self.spec = spec
        self.bn = bn
        self.act = act

    @classmethod
    def create(
        cls,
        c_in: int,
        c_out: int,
        k: int = 1,
        stride: int = 1,
        groups: int = 1,
        act: str = "silu",
        with_bn: bool = True,
        with_bias: bool = False,
    ) -> "ConvBlock":
        """Zero-initialized block; init_random or load_weights fills it in."""
        spec = ConvSpec(
            in_channels=c_in,
            out_channels=c_out,
            kernel=k,
            stride=stride,
            groups=groups,
            bias=np.zeros(c_out, dtype=np.float32) if with_bias else None,
        )
        bn = BatchNormParams.identity(c_out) if with_bn else None
        return cls(spec, bn, act)

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    def forward(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.spec)
        if self.bn is not None:
            scale, shift = self.bn.scale_shift()
            y = Tensor._wrap(y.data * scale[None, :, None, None] + shift[None, :, None, None])
        if self.act == "silu":
            y = silu(y)
        return y

    __call__ = forward

    def entries(self) -> Iterator[tuple[str, np.ndarray]]:
        """Parameter arrays in canonical order (weight, bias, gamma, beta, mean, var)."""
        yield "weight", self.spec.weight
        if self.spec.bias is not None:
            yield "bias", self.spec.bias
        if self.bn is not None:
            yield "gamma", self.bn.gamma
            yield "beta", self.bn.beta
            yield "mean", self.bn.mean
            yield "var", self.bn.var

    def set_entry(self, name: str, value: np.ndarray) -> None:
        current = dict(self.entries()).get(name)
        if current is None:
            raise KeyError(name)
        value = np.asarray(value, dtype=np.float32)
        if value.shape != current.shape:
            raise ValueError(
                f"entry {name!r}: shape {tuple(value.shape)} does not match {tuple(current.shape)}"
            )
        if name == "weight":
            self.spec.weight = value
        elif name == "bias":
            self.spec.bias = value
        else:
            setattr(self.bn, {"gamma": "gamma", "beta": "beta", "mean": "mean", "var": "var"}[name], value)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        s = self.spec
        return (
            (h + 2 * s.padding - s.kernel) // s.stride + 1,
            (w + 2 * s.padding - s.kernel) // s.stride + 1,
        )

    def flops(self, h: int, w: int) -> float:
        oh, ow = self.out_hw(h, w)
        out_elems = self.out_channels * oh * ow
        f = 2.0 * self.spec.weight_count * oh * ow
        if self.spec.bias is not None:
            f += out_elems
        if self.bn is not None:
            f += out_elems
        if self.act == "silu":
            f += _SILU_COST * out_elems
        return f


class Bottleneck:
    """Two conv blocks with an optional identity shortcut."""

    def __init__(
        self,
        c1: int,
        c2: int,
        shortcut: bool = True,
        k: tuple[int, int] = (3, 3),
        e: float = 0.5,
    ) -> None:
        c_hidden = int(c2 * e)
        self.cv1 = ConvBlock.create(c1, c_hidden, k=k[0])
        self.cv2 = ConvBlock.create(c_hidden, c2, k=k[1])
        self.add = shortcut and c1 == c2
        if shortcut and c1 != c2:
            raise ValueError(f"shortcut requires matching channels, got {c1} vs {c2}")

    @property
    def out_channels(self) -> int:
        return self.cv2.out_channels

    def children(self) -> list[tuple[str, object]]:
        return [("cv1", self.cv1), ("cv2", self.cv2)]

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y

    __call__ = forward

    def flops(self, h: int, w: int) -> float:
        f = self.cv1.flops(h, w) + self.cv2.flops(h, w)
        if self.add:
            f += self.out_channels * h * w
        return f


class C2F:
    """CSP block: split the entry output in half, chain bottlenecks on one half,
    concatenate every intermediate, and project back down with a 1x1 conv."""

    def __init__(self, c1: int, c2: int, n: int, shortcut: bool = True, e: float = 0.5) -> None:
        self.c_hidden = int(c2 * e)
        if self.c_hidden < 1:
            raise ValueError("hidden channel count must be positive")
        self.cv1 = ConvBlock.create(c1, 2 * self.c_hidden, k=1)
        self.units: list[object] = [
            Bottleneck(self.c_hidden, self.c_hidden, shortcut) for _ in range(n)
        ]
        self.cv2 = ConvBlock.create((2 + n) * self.c_hidden, c2, k=1)

    @property
    def out_channels(self) -> int:
        return self.cv2.out_channels

    def children(self) -> list[tuple[str, object]]:
        out: list[tuple[str, object]] = [("cv1", self.cv1)]
        out += [(f"m{i}", u) for i, u in enumerate(self.units)]
        out.append(("cv2", self.cv2))
        return out

    def forward(self, x: Tensor) -> Tensor:
        ys = split_channels(self.cv1(x), [self.c_hidden, self.c_hidden])
        for unit in self.units:
            ys.append(unit(ys[-1]))
        return self.cv2(concat_channels(ys))

    __call__ = forward

    def flops(self, h: int, w: int) -> float:
        return (
            self.cv1.flops(h, w)
            + sum(u.flops(h, w) for u in self.units)
            + self.cv2.flops(h, w)
        )


class C3K:
    """CSP block without the split: bottleneck chain plus a parallel bypass conv,
    concatenated and projected by the exit conv."""

    def __init__(
        self,
        c1: int,
        c2: int,
        n: int,
        shortcut: bool = True,
        e: float = 0.5,
        k: int = 3,
    ) -> None:
        c_hidden = int(c2 * e)
        self.cv1 = ConvBlock.create(c1, c_hidden, k=1)
        self.cv2 = ConvBlock.create(c1, c_hidden, k=1)  # entry bypass
        self.units = [
            Bottleneck(c_hidden, c_hidden, shortcut, k=(k, k), e=1.0) for _ in range(n)
        ]
        self.cv3 = ConvBlock.create(2 * c_hidden, c2, k=1)

    @property
    def out_channels(self) -> int:
        return self.cv3.out_channels

    def children(self) -> list[tuple[str, object]]:
        out: list[tuple[str, object]] = [("cv1", self.cv1)]
        out += [(f"m{i}", u) for i, u in enumerate(self.units)]
        out += [("cv2", self.cv2), ("cv3", self.cv3)]
        return out

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv1(x)
        for unit in self.units:
            y = unit(y)
        return self.cv3(concat_channels([y, self.cv2(x)]))

    __call__ = forward

    def flops(self, h: int, w: int) -> float:
        return (
            self.cv1.flops(h, w)
            + self.cv2.flops(h, w)
            + sum(u.flops(h, w) for u in self.units)
            + self.cv3.flops(h, w)
        )


class C3K2(C2F):
    """C2F topology whose inner units are either plain bottlenecks or C3K blocks."""

    def __init__(
        self,
        c1: int,
        c2: int,
        n: int,
        c3k: bool = False,
        e: float = 0.5,
        shortcut: bool = True,
    ) -> None:
        super().__init__(c1, c2, n, shortcut, e)
        if c3k:
            self.units = [C3K(self.c_hidden, self.c_hidden, 2, shortcut) for _ in range(n)]


class SPPF:
    """Spatial pyramid pooling (fast): three chained k=5 max-pools, concatenated
    with the pre-pool map and projected down. Equivalent to parallel 5/9/13
    pools by the receptive-field identity pool5(pool5(x)) == pool9(x)."""

    def __init__(self, c1: int, c2: int, pool: int = 5) -> None:
        if c1 % 2:
            raise ValueError(f"SPPF input channels must be even, got {c1}")
        self.pool = pool
        c_hidden = c1 // 2
        self.cv1 = ConvBlock.create(c1, c_hidden, k=1)
        self.cv2 = ConvBlock.create(4 * c_hidden, c2, k=1)

    @property
    def out_channels(self) -> int:
        return self.cv2.out_channels

    def children(self) -> list[tuple[str, object]]:
        return [("cv1", self.cv1), ("cv2", self.cv2)]

    def forward(self, x: Tensor) -> Tensor:
        ys = [self.cv1(x)]
        for _ in range(3):
            ys.append(maxpool2d(ys[-1], self.pool, 1, self.pool // 2))
        return self.cv2(concat_channels(ys))

    __call__ = forward

    def flops(self, h: int, w: int) -> float:
        pool_f = 3 * (self.pool * self.pool - 1) * self.cv1.out_channels * h * w
        return self.cv1.flops(h, w) + pool_f + self.cv2.flops(h, w)


class AttentionLayer:
    """Multi-head self-attention over spatial positions with a depthwise
    positional-encoding conv on the value path."""

    def __init__(self, dim: int, num_heads: int, attn_ratio: float = 0.5) -> None:
        if dim % num_heads:
            raise ValueError(f"channels ({dim}) must divide evenly into {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.key_dim = int(self.head_dim * attn_ratio)
        self.scale = self.key_dim**-0.5
        qk = self.key_dim * num_heads
        self.qkv = ConvBlock.create(dim, dim + 2 * qk, k=1, act="none")
        self.pe = ConvBlock.create(dim, dim, k=3, groups=dim, act="none")
        self.proj = ConvBlock.create(dim, dim, k=1, act="none")

    @property
    def out_channels(self) -> int:
        return self.dim

    def children(self) -> list[tuple[str, object]]:
        return [("qkv", self.qkv), ("pe", self.pe), ("proj", self.proj)]

    def _split_qkv(self, x: Tensor) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        b, hw = x.n, x.h * x.w
        per_head = 2 * self.key_dim + self.head_dim
        qkv = self.qkv(x).data.reshape(b, self.num_heads, per_head, hw)
        q = qkv[:, :, : self.key_dim]
        k = qkv[:, :, self.key_dim : 2 * self.key_dim]
        v = qkv[:, :, 2 * self.key_dim :]
        return q, k, v

    def attention_weights(self, x: Tensor) -> np.ndarray:
        """Softmaxed attention matrix, shape (N, heads, HW, HW); rows sum to 1."""
        q, k, _ = self._split_qkv(x)
        scores = np.matmul(q.transpose(0, 1, 3, 2), k) * np.float32(self.scale)
        return softmax_lastaxis(scores)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        q, k, v = self._split_qkv(x)
        scores = np.matmul(q.transpose(0, 1, 3, 2), k) * np.float32(self.scale)
        attn = softmax_lastaxis(scores)
        mixed = np.matmul(v, attn.transpose(0, 1, 3, 2)).reshape(b, c, h, w)
        pos = self.pe(Tensor._wrap(np.ascontiguousarray(v.reshape(b, c, h, w))))
        return self.proj(Tensor._wrap(mixed) + pos)

    __call__ = forward

    def flops(self, h: int, w: int) -> float:
        hw = h * w
        f = self.qkv.flops(h, w) + self.pe.flops(h, w) + self.proj.flops(h, w)
        per_head = 2.0 * hw * hw * self.key_dim + 2.0 * hw * hw * self.head_dim
        f += self.num_heads * (per_head + hw * hw * (1 + _SOFTMAX_COST))
        return f


class PSABlock:
    """Position-sensitive attention plus a two-conv feed-forward net, both with
    residual connections."""

    def __init__(self, c: int, num_heads: int) -> None:
        self.attn = AttentionLayer(c, num_heads)
        self.ffn1 = ConvBlock.create(c, 2 * c, k=1)
        self.ffn2 = ConvBlock.create(2 * c, c, k=1, act="none")

    @property
    def out_channels(self) -> int:
        return self.ffn2.out_channels

    def children(self) -> list[tuple[str, object]]:
        return [("attn", self.attn), ("ffn1", self.ffn1), ("ffn2", self.ffn2)]

    def forward(self, x: Tensor) -> Tensor:
        y = x + self.attn(x)
        return y + self.ffn2(self.ffn1(y))

    __call__ = forward

    def flops(self, h: int, w: int) -> float:
        f = self.attn.flops(h, w) + self.ffn1.flops(h, w) + self.ffn2.flops(h, w)
        return f + 2 * self.out_channels * h * w  # two residual adds


class C2PSA:
    """CSP-wrapped attention: split the entry output, run PSA blocks on one
    half, concatenate, and project back to the input width."""

    def __init__(self, c1: int, c2: int, n: int, e: float = 0.5) -> None:
        if c1 != c2:
            raise ValueError(f"C2PSA requires c_in == c_out, got {c1} vs {c2}")
        self.c_hidden = int(c1 * e)
        if self.c_hidden < 1:
            raise ValueError("hidden channel count must be positive")
        self.cv1 = ConvBlock.create(c1, 2 * self.c_hidden, k=1)
        heads = max(1, self.c_hidden // 64)
        self.units = [PSABlock(self.c_hidden, heads) for _ in range(n)]
        self.cv2 = ConvBlock.create(2 * self.c_hidden, c2, k=1)

    @property
    def out_channels(self) -> int:
        return self.cv2.out_channels

    def children(self) -> list[tuple[str, object]]:
        out: list[tuple[str, object]] = [("cv1", self.cv1)]
        out += [(f"m{i}", u) for i, u in enumerate(self.units)]
        out.append(("cv2", self.cv2))
        return out

    def forward(self, x: Tensor) -> Tensor:
        a, b = split_channels(self.cv1(x), [self.c_hidden, self.c_hidden])
        for unit in self.units:
            b = unit(b)
        return self.cv2(concat_channels([a, b]))

    __call__ = forward

    def flops(self, h: int, w: int) -> float:
        return (
            self.cv1.flops(h, w)
            + sum(u.flops(h, w) for u in self.units)
            + self.cv2.flops(h, w)
        )


def iter_leaf_blocks(block: object, prefix: str = "") -> Iterator[tuple[str, ConvBlock]]:
    """Depth-first traversal down to ConvBlock leaves, yielding dotted paths."""
    if isinstance(block, ConvBlock):
        yield prefix, block
        return
    for name, child in block.children():  # type: ignore[attr-defined]
        child_prefix = f"{prefix}.{name}" if prefix else name
        yield from iter_leaf_blocks(child, child_prefix)
