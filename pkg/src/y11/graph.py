"""Declarative assembly of the full detector: backbone, SPPF/attention neck,
PAN-style fusion path, and the anchor-free multi-scale head, for the five
scaling variants n/s/m/l/x. Also parameter and FLOP accounting, seeded random
initialization, and strict weight-file population.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .blocks import C2PSA, C3K2, SPPF, ConvBlock, iter_leaf_blocks
from .tensor import Tensor, concat_channels, upsample_nearest2x

__all__ = [
    "VariantSpec",
    "LayerSpec",
    "ModelGraph",
    "DetectHead",
    "VARIANTS",
    "build_graph",
    "parse_model_config",
]


@dataclass(frozen=True)
class VariantSpec:
    """Compound-scaling knobs for one model size."""

    name: str
    depth_multiple: float
    width_multiple: float
    max_channels: int

    def __post_init__(self) -> None:
        if self.depth_multiple <= 0 or self.width_multiple <= 0 or self.max_channels <= 0:
            raise ValueError("scaling multipliers must be positive")


VARIANTS: dict[str, VariantSpec] = {
    "n": VariantSpec("n", 0.50, 0.25, 1024),
    "s": VariantSpec("s", 0.50, 0.50, 1024),
    "m": VariantSpec("m", 0.50, 1.00, 512),
    "l": VariantSpec("l", 1.00, 1.00, 512),
    "x": VariantSpec("x", 1.00, 1.50, 512),
}

# Variants that upgrade every C3K2 inner unit to a full C3K block.
_DEEP_C3K_VARIANTS = ("m", "l", "x")

# Base (unscaled) layer plan. froms use -1 for the previous layer; channel
# widths and unit counts are scaled per variant at build time. The early
# C3K2 stages run at a narrower hidden ratio, which keeps the compute of the
# high-resolution stages in budget.
_BASE_LAYERS: list[tuple[str, list[int], dict]] = [
    ("ConvBlock", [-1], dict(c_out=64, k=3, stride=2)),           # 0  P1/2
    ("ConvBlock", [-1], dict(c_out=128, k=3, stride=2)),          # 1  P2/4
    ("C3K2", [-1], dict(c_out=256, n=2, c3k=False, e=0.25)),      # 2
    ("ConvBlock", [-1], dict(c_out=256, k=3, stride=2)),          # 3  P3/8
    ("C3K2", [-1], dict(c_out=512, n=2, c3k=False, e=0.25)),      # 4
    ("ConvBlock", [-1], dict(c_out=512, k=3, stride=2)),          # 5  P4/16
    ("C3K2", [-1], dict(c_out=512, n=2, c3k=True, e=0.5)),        # 6
    ("ConvBlock", [-1], dict(c_out=1024, k=3, stride=2)),         # 7  P5/32
    ("C3K2", [-1], dict(c_out=1024, n=2, c3k=True, e=0.5)),       # 8
    ("SPPF", [-1], dict(c_out=1024, pool=5)),                     # 9
    ("C2PSA", [-1], dict(c_out=1024, n=2)),                       # 10
    ("Upsample", [-1], {}),                                       # 11
    ("Concat", [-1, 6], {}),                                      # 12
    ("C3K2", [-1], dict(c_out=512, n=2, c3k=False, e=0.5)),       # 13
    ("Upsample", [-1], {}),                                       # 14
    ("Concat", [-1, 4], {}),                                      # 15
    ("C3K2", [-1], dict(c_out=256, n=2, c3k=False, e=0.5)),       # 16 P3 out
    ("ConvBlock", [-1], dict(c_out=256, k=3, stride=2)),          # 17
    ("Concat", [-1, 13], {}),                                     # 18
    ("C3K2", [-1], dict(c_out=512, n=2, c3k=False, e=0.5)),       # 19 P4 out
    ("ConvBlock", [-1], dict(c_out=512, k=3, stride=2)),          # 20
    ("Concat", [-1, 10], {}),                                     # 21
    ("C3K2", [-1], dict(c_out=1024, n=2, c3k=True, e=0.5)),       # 22 P5 out
    ("DetectHead", [16, 19, 22], {}),                             # 23
]

STRIDES = (8, 16, 32)


@dataclass(frozen=True)
class LayerSpec:
    """One assembled layer: kind, resolved input indices, realized arguments."""

    index: int
    kind: str
    froms: tuple[int, ...]
    args: dict

    def __post_init__(self) -> None:
        for f in self.froms:
            if f >= self.index or f < -1:
                raise ValueError(
                    f"layer {self.index}: from-reference {f} must point to an earlier layer"
                )


def scale_channels(c: int, variant: VariantSpec) -> int:
    """Width scaling: cap, multiply, round to the nearest multiple of 8 (min 8)."""
    scaled = min(c, variant.max_channels) * variant.width_multiple
    return max(8, int(math.floor(scaled / 8 + 0.5)) * 8)


def scale_units(n: int, variant: VariantSpec) -> int:
    """Depth scaling: ceil-round, never below 1 for a positive base count."""
    if n <= 0:
        return 0
    return max(1, math.ceil(n * variant.depth_multiple))


class DetectHead:
    """Anchor-free head over three scales. Each scale emits
    4*reg_max distance-distribution logits followed by num_classes logits."""

    def __init__(self, chs: Sequence[int], num_classes: int, reg_max: int) -> None:
        if len(chs) != 3:
            raise ValueError(f"head expects three input scales, got {len(chs)}")
        self.in_channels = tuple(chs)
        self.num_classes = num_classes
        self.reg_max = reg_max
        box_c = max(16, chs[0] // 4, 4 * reg_max)
        cls_c = max(chs[0], min(num_classes, 100))
        self.box_branches = []
        self.cls_branches = []
        for c in chs:
            self.box_branches.append(
                [
                    ConvBlock.create(c, box_c, k=3),
                    ConvBlock.create(box_c, box_c, k=3),
                    ConvBlock.create(box_c, 4 * reg_max, k=1, act="none", with_bn=False, with_bias=True),
                ]
            )
            self.cls_branches.append(
                [
                    ConvBlock.create(c, c, k=3, groups=c),
                    ConvBlock.create(c, cls_c, k=1),
                    ConvBlock.create(cls_c, cls_c, k=3, groups=cls_c),
                    ConvBlock.create(cls_c, cls_c, k=1),
                    ConvBlock.create(cls_c, num_classes, k=1, act="none", with_bn=False, with_bias=True),
                ]
            )

    @property
    def out_channels(self) -> int:
        return 4 * self.reg_max + self.num_classes

    def children(self) -> list[tuple[str, object]]:
        out: list[tuple[str, object]] = []
        for i in range(3):
            out += [(f"box{i}.{j}", b) for j, b in enumerate(self.box_branches[i])]
            out += [(f"cls{i}.{j}", b) for j, b in enumerate(self.cls_branches[i])]
        return out

    def forward(self, xs: Sequence[Tensor]) -> tuple[Tensor, Tensor, Tensor]:
        outs = []
        for i, x in enumerate(xs):
            box = x
            for b in self.box_branches[i]:
                box = b(box)
            cls = x
            for b in self.cls_branches[i]:
                cls = b(cls)
            outs.append(concat_channels([box, cls]))
        return tuple(outs)  # type: ignore[return-value]

    __call__ = forward

    def flops(self, shapes: Sequence[tuple[int, int]]) -> float:
        f = 0.0
        for i, (h, w) in enumerate(shapes):
            for b in self.box_branches[i] + self.cls_branches[i]:
                f += b.flops(h, w)
        return f


class ModelGraph:
    """Materialized layer DAG. Immutable topology; forward is pure."""

    def __init__(
        self,
        variant: VariantSpec,
        num_classes: int,
        reg_max: int,
        layers: list[LayerSpec],
        blocks: list[object | None],
        out_channels: list[int],
    ) -> None:
        self.variant = variant
        self.num_classes = num_classes
        self.reg_max = reg_max
        self.strides = STRIDES
        self.layers = layers
        self.blocks = blocks
        self.out_channels = out_channels
        self.save: set[int] = set()
        for spec in layers:
            for f in spec.froms:
                if f != spec.index - 1:
                    self.save.add(f)
        heads = [i for i, s in enumerate(layers) if s.kind == "DetectHead"]
        if len(heads) != 1 or heads[0] != len(layers) - 1:
            raise ValueError("graph must end with exactly one DetectHead layer")
        self.head_index = heads[0]

    # -- forward ---------------------------------------------------------

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Run the network; returns the three raw head tensors (P3, P4, P5)."""
        if image.c != 3:
            raise ValueError(f"expected 3 input channels, got {image.c}")
        if image.h % 32 or image.w % 32:
            raise ValueError(
                f"input size {image.h}x{image.w} must be divisible by 32"
            )
        cache: dict[int, Tensor] = {}
        x = image
        result: tuple[Tensor, Tensor, Tensor] | None = None
        for spec, block in zip(self.layers, self.blocks):
            inputs = [x if f == spec.index - 1 else cache[f] for f in spec.froms]
            if spec.kind == "Upsample":
                out = upsample_nearest2x(inputs[0])
            elif spec.kind == "Concat":
                out = concat_channels(inputs)
            elif spec.kind == "DetectHead":
                result = block(inputs)
                break
            else:
                out = block(inputs[0])
            if spec.index in self.save:
                cache[spec.index] = out
            x = out
        assert result is not None
        return result

    __call__ = forward

    # -- parameter traversal ----------------------------------------------

    def named_leaf_blocks(self) -> Iterator[tuple[str, ConvBlock]]:
        for spec, block in zip(self.layers, self.blocks):
            if block is None:
                continue
            yield from iter_leaf_blocks(block, f"layer{spec.index}")

    def state_entries(self) -> list[tuple[str, np.ndarray]]:
        """All parameter arrays (including running stats) in canonical order."""
        out = []
        for path, leaf in self.named_leaf_blocks():
            for suffix, arr in leaf.entries():
                out.append((f"{path}.{suffix}", arr))
        return out

    def count_params(self) -> int:
        """Learnable parameter count: conv weights and biases plus bn gamma/beta."""
        total = 0
        for _, leaf in self.named_leaf_blocks():
            for suffix, arr in leaf.entries():
                if suffix in ("mean", "var"):
                    continue
                total += arr.size
        return total

    # -- accounting --------------------------------------------------------

    def _walk_shapes(self, input_size: int) -> list[tuple[int, int, int]]:
        """Per-layer output (channels, h, w) at the given square input size."""
        shapes: list[tuple[int, int, int]] = []
        cur = (3, input_size, input_size)
        for spec, block in zip(self.layers, self.blocks):
            ins = [cur if f == spec.index - 1 else shapes[f] for f in spec.froms]
            c, h, w = ins[0]
            if spec.kind == "Upsample":
                out = (c, 2 * h, 2 * w)
            elif spec.kind == "Concat":
                out = (sum(i[0] for i in ins), h, w)
            elif spec.kind == "DetectHead":
                out = (block.out_channels, h, w)
            elif spec.kind == "ConvBlock":
                oh, ow = block.out_hw(h, w)
                out = (block.out_channels, oh, ow)
            else:
                out = (block.out_channels, h, w)
            shapes.append(out)
            cur = out
        return shapes

    def count_flops(self, input_size: int) -> float:
        """Forward cost in GFLOPs at batch 1 (multiply-add counted as 2)."""
        if input_size % 32:
            raise ValueError(f"input size {input_size} must be divisible by 32")
        shapes = self._walk_shapes(input_size)
        total = 0.0
        for spec, block in zip(self.layers, self.blocks):
            if spec.kind in ("Upsample", "Concat"):
                continue
            ins = [shapes[f] if f >= 0 else (3, input_size, input_size) for f in spec.froms]
            if spec.kind == "DetectHead":
                total += block.flops([(h, w) for _, h, w in ins])
            else:
                _, h, w = ins[0]
                total += block.flops(h, w)
        return total / 1e9

    def layer_summary(self, input_size: int) -> list[dict]:
        """Per-layer rows for reporting: kind, froms, output shape, params."""
        shapes = self._walk_shapes(input_size)
        rows = []
        for spec, block in zip(self.layers, self.blocks):
            params = 0
            if block is not None:
                for _, leaf in iter_leaf_blocks(block, "x"):
                    for suffix, arr in leaf.entries():
                        if suffix not in ("mean", "var"):
                            params += arr.size
            c, h, w = shapes[spec.index]
            rows.append(
                {
                    "index": spec.index,
                    "kind": spec.kind,
                    "from": list(spec.froms),
                    "output_shape": [1, c, h, w],
                    "params": params,
                }
            )
        return rows

    # -- parameter population ----------------------------------------------

    def init_random(self, seed: int) -> "ModelGraph":
        """Deterministic seeded init: uniform(+-sqrt(6/fan_in)) conv weights,
        zero biases, identity batch-norm."""
        rng = np.random.default_rng(seed)
        for _, leaf in self.named_leaf_blocks():
            spec = leaf.spec
            fan_in = (spec.in_channels // spec.groups) * spec.kernel * spec.kernel
            bound = math.sqrt(6.0 / fan_in)
            leaf.set_entry(
                "weight",
                rng.uniform(-bound, bound, spec.weight.shape).astype(np.float32),
            )
            if spec.bias is not None:
                leaf.set_entry("bias", np.zeros(spec.out_channels, dtype=np.float32))
            if leaf.bn is not None:
                c = leaf.bn.channels
                leaf.set_entry("gamma", np.ones(c, dtype=np.float32))
                leaf.set_entry("beta", np.zeros(c, dtype=np.float32))
                leaf.set_entry("mean", np.zeros(c, dtype=np.float32))
                leaf.set_entry("var", np.ones(c, dtype=np.float32))
        return self

    def load_state(self, entries: Sequence[tuple[str, np.ndarray]]) -> "ModelGraph":
        """Populate every parameter from (name, array) pairs; strict matching.

        Missing or extra entries and dimension mismatches are rejected with the
        offending entry named.
        """
        provided = {}
        for name, arr in entries:
            if name in provided:
                raise ValueError(f"duplicate weight entry {name!r}")
            provided[name] = arr
        leaves = {path: leaf for path, leaf in self.named_leaf_blocks()}
        expected = [
            (f"{path}.{suffix}", path, suffix, arr)
            for path, leaf in leaves.items()
            for suffix, arr in leaf.entries()
        ]
        expected_names = {name for name, *_ in expected}
        missing = sorted(expected_names - provided.keys())
        if missing:
            raise ValueError(f"weights file is missing entry {missing[0]!r}")
        extra = sorted(provided.keys() - expected_names)
        if extra:
            raise ValueError(f"weights file has unknown entry {extra[0]!r}")
        for name, path, suffix, arr in expected:
            value = provided[name]
            if tuple(value.shape) != tuple(arr.shape):
                raise ValueError(
                    f"entry {name!r}: file shape {tuple(value.shape)} does not match "
                    f"model shape {tuple(arr.shape)}"
                )
            leaves[path].set_entry(suffix, value)
        return self


def _build_blocks(
    variant: VariantSpec, num_classes: int, reg_max: int
) -> tuple[list[LayerSpec], list[object | None], list[int]]:
    force_c3k = variant.name in _DEEP_C3K_VARIANTS
    layers: list[LayerSpec] = []
    blocks: list[object | None] = []
    out_channels: list[int] = []
    for index, (kind, froms, args) in enumerate(_BASE_LAYERS):
        froms_abs = tuple(index - 1 if f == -1 else f for f in froms)
        spec = LayerSpec(index, kind, froms_abs, dict(args))
        c_in = 3 if index == 0 else out_channels[froms_abs[0]]
        if kind == "ConvBlock":
            c_out = scale_channels(args["c_out"], variant)
            block: object | None = ConvBlock.create(
                c_in, c_out, k=args["k"], stride=args["stride"]
            )
        elif kind == "C3K2":
            c_out = scale_channels(args["c_out"], variant)
            block = C3K2(
                c_in,
                c_out,
                n=scale_units(args["n"], variant),
                c3k=args["c3k"] or force_c3k,
                e=args["e"],
            )
        elif kind == "SPPF":
            c_out = scale_channels(args["c_out"], variant)
            block = SPPF(c_in, c_out, pool=args["pool"])
        elif kind == "C2PSA":
            c_out = scale_channels(args["c_out"], variant)
            block = C2PSA(c_in, c_out, n=scale_units(args["n"], variant))
        elif kind == "Upsample":
            c_out = c_in
            block = None
        elif kind == "Concat":
            c_out = sum(out_channels[f] for f in froms_abs)
            block = None
        elif kind == "DetectHead":
            chs = [out_channels[f] for f in froms_abs]
            block = DetectHead(chs, num_classes, reg_max)
            c_out = block.out_channels
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        layers.append(spec)
        blocks.append(block)
        out_channels.append(c_out)
    return layers, blocks, out_channels


def build_graph(
    variant: str | VariantSpec, num_classes: int = 80, reg_max: int = 16
) -> ModelGraph:
    """Assemble the detector for a scaling variant.

    `variant` is one of n/s/m/l/x or a custom VariantSpec. The graph comes out
    zero-initialized; call init_random or load_state before meaningful use.
    """
    if isinstance(variant, str):
        try:
            variant = VARIANTS[variant]
        except KeyError:
            raise ValueError(
                f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}"
            ) from None
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if reg_max < 2:
        raise ValueError("reg_max must be >= 2")
    layers, blocks, out_channels = _build_blocks(variant, num_classes, reg_max)
    return ModelGraph(variant, num_classes, reg_max, layers, blocks, out_channels)


def parse_model_config(text: str) -> dict:
    """Parse the plain-text key=value model config.

    Recognized keys: variant, num_classes, reg_max, depth_multiple,
    width_multiple, max_channels. Lines starting with # are comments.
    """
    known_int = {"num_classes", "reg_max", "max_channels"}
    known_float = {"depth_multiple", "width_multiple"}
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "variant":
            out[key] = value
        elif key in known_int:
            out[key] = int(value)
        elif key in known_float:
            out[key] = float(value)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    return out


def graph_from_config(config: dict) -> ModelGraph:
    """Build a graph from a parsed config, applying multiplier overrides."""
    name = config.get("variant", "n")
    base = VARIANTS.get(name)
    if base is None:
        raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    variant = VariantSpec(
        name=base.name,
        depth_multiple=config.get("depth_multiple", base.depth_multiple),
        width_multiple=config.get("width_multiple", base.width_multiple),
        max_channels=config.get("max_channels", base.max_channels),
    )
    return build_graph(
        variant,
        num_classes=config.get("num_classes", 80),
        reg_max=config.get("reg_max", 16),
    )
