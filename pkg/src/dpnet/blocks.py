"""Composite building blocks: stem, ASU, stride ASU, Bi-FM and ConvBlock.

Each block exposes ``<block>_slots`` (weight declarations), ``<block>_forward``
and ``<block>_macs`` (closed-form multiply-accumulate count per sample).
Weights are looked up through a :class:`WeightView` rooted at the block's
name prefix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Mapping, Tuple

from dpnet import ops
from dpnet.attention import AttentionConfig, LscmWeights, lscm_forward, lscm_macs
from dpnet.tensor import ShapeError, Tensor
from dpnet.weights import Slot

DW_KERNEL = 5
STEM_CHANNELS = 24


@dataclass(frozen=True)
class BlockConfig:
    k: int = 5
    r: int = 8

    def attention(self, channels: int) -> AttentionConfig:
        return AttentionConfig(channels=channels, k=self.k, r=self.r)


class WeightView:
    """Read-only window onto a weight store under a dotted prefix."""

    def __init__(self, store: Mapping[str, Tensor], prefix: str = ""):
        self.store = store
        self.prefix = prefix

    def name(self, key: str) -> str:
        return f"{self.prefix}.{key}" if self.prefix else key

    def __getitem__(self, key: str) -> Tensor:
        full = self.name(key)
        try:
            return self.store[full]
        except KeyError:
            raise KeyError(f"missing weight {full!r}") from None

    def sub(self, key: str) -> "WeightView":
        return WeightView(self.store, self.name(key))


# -- conv + batch-norm unit -----------------------------------------------------


def conv_bn_slots(prefix: str, c_in: int, c_out: int, kernel: int, groups: int = 1) -> List[Slot]:
    fan_in = (c_in // groups) * kernel * kernel
    return [
        Slot(f"{prefix}.weight", (c_out, c_in // groups, kernel, kernel), fan_in=fan_in),
        Slot(f"{prefix}.bn.gamma", (c_out,), init="ones", decay=False),
        Slot(f"{prefix}.bn.beta", (c_out,), init="zeros", decay=False),
        Slot(f"{prefix}.bn.mean", (c_out,), init="zeros", kind="buffer", decay=False),
        Slot(f"{prefix}.bn.var", (c_out,), init="ones", kind="buffer", decay=False),
    ]


def conv_bn(x: Tensor, w: WeightView, stride: int = 1, groups: int = 1, relu: bool = False,
            training: bool = False) -> Tensor:
    kernel = w["weight"].shape[-1]
    y = ops.conv2d(x, w["weight"], None, stride=stride, padding=kernel // 2, groups=groups)
    y = ops.batch_norm(y, w["bn.gamma"], w["bn.beta"], w["bn.mean"], w["bn.var"], training=training)
    return ops.relu(y) if relu else y


def conv_macs(c_in: int, c_out: int, kernel: int, groups: int, ho: int, wo: int) -> int:
    return c_out * ho * wo * (c_in // groups) * kernel * kernel


def _spatial(x: Tensor) -> Tuple[int, int, int]:
    return x.shape[-3], x.shape[-2], x.shape[-1]


# -- stem -----------------------------------------------------------------------


def stem_slots(prefix: str) -> List[Slot]:
    return conv_bn_slots(f"{prefix}.conv", 3, STEM_CHANNELS, 3)


def stem_conv_forward(image: Tensor, w: WeightView, training: bool = False) -> Tensor:
    c, h, wd = _spatial(image)
    if c != 3:
        raise ShapeError(f"stem expects 3 input channels, got {c}")
    return conv_bn(image, w.sub("conv"), stride=2, relu=True, training=training)


def stem_forward(image: Tensor, w: WeightView, training: bool = False) -> Tensor:
    """3x3 stride-2 conv -> BN -> relu -> 2x2 max-pool; shrinks the input 4x."""
    _, h, wd = _spatial(image)
    if h % 4 or wd % 4:
        raise ShapeError(f"stem input {h}x{wd} not divisible by 4")
    return ops.pool2d(stem_conv_forward(image, w, training), "max", 2, 2)


def stem_macs(h: int, w: int) -> int:
    return conv_macs(3, STEM_CHANNELS, 3, 1, h // 2, w // 2)


# -- ASU ------------------------------------------------------------------------


def asu_slots(prefix: str, channels: int, cfg: BlockConfig) -> List[Slot]:
    if channels % 2:
        raise ValueError(f"{prefix}: ASU needs an even channel count, got {channels}")
    h = channels // 2
    try:
        att = cfg.attention(h)
    except ValueError as exc:
        raise ValueError(f"{prefix}: {exc}") from None
    return (conv_bn_slots(f"{prefix}.t.pw1", h, h, 1)
            + conv_bn_slots(f"{prefix}.t.dw", h, h, DW_KERNEL, groups=h)
            + LscmWeights.slots(f"{prefix}.t.lscm", att)
            + conv_bn_slots(f"{prefix}.t.pw2", h, h, 1))


def asu_merge(identity: Tensor, transformed: Tensor) -> Tensor:
    return ops.channel_shuffle(ops.concat([identity, transformed]), 2)


def asu_forward(x: Tensor, cfg: BlockConfig, w: WeightView, training: bool = False) -> Tensor:
    """Split -> (identity | 1x1 -> DW5x5 -> LSCM -> 1x1) -> concat -> shuffle."""
    c, _, _ = _spatial(x)
    if c % 2:
        raise ShapeError(f"ASU needs an even channel count, got {c}")
    ident, t = ops.split_channels(x)
    t = asu_transform(t, cfg, w, training)
    return asu_merge(ident, t)


def asu_transform(t: Tensor, cfg: BlockConfig, w: WeightView, training: bool = False, stride: int = 1) -> Tensor:
    t = conv_bn(t, w.sub("t.pw1"), relu=True, training=training)
    mid = t.shape[-3]
    t = conv_bn(t, w.sub("t.dw"), stride=stride, groups=mid, training=training)
    t = lscm_forward(t, cfg.attention(mid), LscmWeights.from_store(w.store, w.name("t.lscm")))
    return conv_bn(t, w.sub("t.pw2"), relu=True, training=training)


def asu_macs(channels: int, h: int, w: int, cfg: BlockConfig) -> int:
    half, n = channels // 2, h * w
    return (conv_macs(half, half, 1, 1, h, w) + conv_macs(half, half, DW_KERNEL, half, h, w)
            + lscm_macs(n, cfg.attention(half)) + conv_macs(half, half, 1, 1, h, w))


def asu_stride_slots(prefix: str, c_in: int, c_out: int, cfg: BlockConfig) -> List[Slot]:
    if c_out % 2:
        raise ValueError(f"{prefix}: stride ASU needs an even output channel count, got {c_out}")
    mid = c_out // 2
    try:
        att = cfg.attention(mid)
    except ValueError as exc:
        raise ValueError(f"{prefix}: {exc}") from None
    return (conv_bn_slots(f"{prefix}.i.dw", c_in, c_in, DW_KERNEL, groups=c_in)
            + conv_bn_slots(f"{prefix}.i.pw", c_in, mid, 1)
            + conv_bn_slots(f"{prefix}.t.pw1", c_in, mid, 1)
            + conv_bn_slots(f"{prefix}.t.dw", mid, mid, DW_KERNEL, groups=mid)
            + LscmWeights.slots(f"{prefix}.t.lscm", att)
            + conv_bn_slots(f"{prefix}.t.pw2", mid, mid, 1))


def asu_stride_forward(x: Tensor, cfg: BlockConfig, w: WeightView, training: bool = False) -> Tensor:
    """Both branches see the full input and halve the resolution."""
    c_in, h, wd = _spatial(x)
    if h % 2 or wd % 2:
        raise ShapeError(f"stride ASU needs even spatial size, got {h}x{wd}")
    ident = conv_bn(x, w.sub("i.dw"), stride=2, groups=c_in, training=training)
    ident = conv_bn(ident, w.sub("i.pw"), relu=True, training=training)
    t = asu_transform(x, cfg, w, training, stride=2)
    return asu_merge(ident, t)


def asu_stride_macs(c_in: int, c_out: int, h: int, w: int, cfg: BlockConfig) -> int:
    mid, ho, wo = c_out // 2, h // 2, w // 2
    return (conv_macs(c_in, c_in, DW_KERNEL, c_in, ho, wo) + conv_macs(c_in, mid, 1, 1, ho, wo)
            + conv_macs(c_in, mid, 1, 1, h, w) + conv_macs(mid, mid, DW_KERNEL, mid, ho, wo)
            + lscm_macs(ho * wo, cfg.attention(mid)) + conv_macs(mid, mid, 1, 1, ho, wo))


# -- Bi-FM ----------------------------------------------------------------------


def _bifm_stages(n: int) -> int:
    if n not in (2, 4):
        raise ValueError(f"Bi-FM scale factor must be 2 or 4, got {n}")
    return 1 if n == 2 else 2


def bifm_slots(prefix: str, channels: int, n: int) -> List[Slot]:
    stages = _bifm_stages(n)
    slots = conv_bn_slots(f"{prefix}.up", n * channels, channels, 1)
    c = channels
    for s in range(stages):
        slots += conv_bn_slots(f"{prefix}.down{s}", c, 2 * c, DW_KERNEL, groups=c)
        c *= 2
    return slots


def bifm_forward(f_high: Tensor, f_low: Tensor, n: int, w: WeightView,
                 training: bool = False) -> Tuple[Tensor, Tensor]:
    """Exchange features between the two paths by element-wise addition.

    low -> high: 1x1 conv to C channels, nearest upsampling by n.
    high -> low: stride-2 depth-wise 5x5 stages (channel multiplier 2), applied log2(n) times.
    """
    stages = _bifm_stages(n)
    c, h, wd = _spatial(f_high)
    cl, hl, wl = _spatial(f_low)
    if cl != n * c or h != n * hl or wd != n * wl:
        raise ShapeError(f"Bi-FM(n={n}): high {f_high.shape} and low {f_low.shape} are inconsistent")
    up = conv_bn(f_low, w.sub("up"), training=training)
    for _ in range(stages):
        up = ops.resample2d(up, "up2")
    down = f_high
    for s in range(stages):
        down = conv_bn(down, w.sub(f"down{s}"), stride=2, groups=down.shape[-3], training=training)
    return ops.add(f_high, up), ops.add(f_low, down)


def bifm_macs(channels: int, h: int, w: int, n: int) -> int:
    stages = _bifm_stages(n)
    total = conv_macs(n * channels, channels, 1, 1, h // n, w // n)
    c, hh, ww = channels, h, w
    for _ in range(stages):
        hh, ww = hh // 2, ww // 2
        total += conv_macs(c, 2 * c, DW_KERNEL, c, hh, ww)
        c *= 2
    return total


# -- ConvBlock ------------------------------------------------------------------


def convblock_slots(prefix: str, channels: int) -> List[Slot]:
    return (conv_bn_slots(f"{prefix}.dw", channels, channels, DW_KERNEL, groups=channels)
            + conv_bn_slots(f"{prefix}.pw", channels, channels, 1))


def convblock_forward(x: Tensor, w: WeightView, training: bool = False) -> Tensor:
    c = x.shape[-3]
    y = conv_bn(x, w.sub("dw"), groups=c, training=training)
    return conv_bn(y, w.sub("pw"), relu=True, training=training)


def convblock_macs(channels: int, h: int, w: int) -> int:
    return conv_macs(channels, channels, DW_KERNEL, channels, h, w) + conv_macs(channels, channels, 1, 1, h, w)
