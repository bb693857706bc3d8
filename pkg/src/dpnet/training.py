"""Detection losses, SGD with warmup + cosine schedule, and a synthetic overfit harness."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, MutableMapping, Optional, Sequence, Tuple

import numpy as np

from dpnet import ops
from dpnet.network import STRIDES, NetworkGraph, NumericError, forward_full
from dpnet.tensor import Tensor
from dpnet.weights import WeightStore


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.5

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative, got alpha={self.alpha} beta={self.beta}")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1.5e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 300
    warmup_epochs: int = 5

    def __post_init__(self) -> None:
        if min(self.lr, self.momentum, self.weight_decay, self.epochs, self.warmup_epochs) < 0:
            raise ValueError(f"optimizer settings must be non-negative: {self}")
        if self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs={self.warmup_epochs} exceeds epochs={self.epochs}")


@dataclass(frozen=True)
class Positive:
    """A cell assigned to a ground-truth box: head index, batch index, row, column."""

    scale: int
    batch: int
    i: int
    j: int
    class_id: int
    box: Tuple[float, float, float, float]


@dataclass
class LossTerms:
    cls: Tensor
    iou: Tensor
    reg: Tensor

    def values(self) -> Tuple[float, float, float]:
        return float(self.cls.data), float(self.iou.data), float(self.reg.data)


# -- losses ---------------------------------------------------------------------------


def _col(t: Tensor, k: int) -> Tensor:
    return ops.gather(t, (slice(None), slice(k, k + 1)))


def predicted_boxes(deltas: Tensor, i: np.ndarray, j: np.ndarray, stride: int) -> Tensor:
    """``(P, 4)`` raw deltas at cells ``(i, j)`` -> ``(P, 4)`` x1,y1,x2,y2 boxes."""
    cx = ops.mul(ops.add(_col(deltas, 0), j[:, None].astype(deltas.dtype)), float(stride))
    cy = ops.mul(ops.add(_col(deltas, 1), i[:, None].astype(deltas.dtype)), float(stride))
    hw = ops.mul(ops.exp(_col(deltas, 2)), stride / 2.0)
    hh = ops.mul(ops.exp(_col(deltas, 3)), stride / 2.0)
    return ops.concat([ops.sub(cx, hw), ops.sub(cy, hh), ops.add(cx, hw), ops.add(cy, hh)], axis=-1)


def loss_terms(heads: Sequence[Tensor], positives: Sequence[Positive], num_classes: int,
               strides: Sequence[int] = STRIDES, iou_targets: Optional[Sequence[float]] = None) -> LossTerms:
    """Class / IoU-branch BCE summed over all cells, and ``1 - IoU`` box loss, over the positive count.

    Heads are ``(N, num_classes + 5, H, W)``; negatives get all-zero class and
    IoU targets. With no positives the denominator is 1.

    The IoU-branch target at a positive is the current box IoU with gradient
    stopped, so this loss is not the exact function its backward differentiates.
    ``iou_targets`` (one per positive, in order) pins those targets to constants,
    which makes the loss a fixed function for finite-difference checks.
    """
    if iou_targets is not None and len(iou_targets) != len(positives):
        raise ValueError(f"got {len(iou_targets)} IoU targets for {len(positives)} positives")
    dtype = heads[0].dtype
    denom = float(max(len(positives), 1))
    cls_total, iou_total = [], []
    reg_ious = []
    for s, (head, stride) in enumerate(zip(heads, strides)):
        n, ch, h, w = head.shape
        if ch != num_classes + 5:
            raise ValueError(f"head {s} has {ch} channels, expected {num_classes + 5}")
        cls_t = np.zeros((n, num_classes, h, w), dtype=dtype)
        iou_t = np.zeros((n, 1, h, w), dtype=dtype)
        idx = [k for k, p in enumerate(positives) if p.scale == s]
        pos = [positives[k] for k in idx]
        if pos:
            b = np.array([p.batch for p in pos])
            ii = np.array([p.i for p in pos])
            jj = np.array([p.j for p in pos])
            cls_t[b, [p.class_id for p in pos], ii, jj] = 1.0
            deltas = ops.gather(head, (b[:, None], np.arange(num_classes, num_classes + 4)[None, :],
                                       ii[:, None], jj[:, None]))
            boxes = predicted_boxes(deltas, ii, jj, stride)
            gt = Tensor(np.array([p.box for p in pos], dtype=dtype))
            iou = ops.iou_xyxy(boxes, gt)
            reg_ious.append(iou)
            fixed = None if iou_targets is None else np.array([iou_targets[k] for k in idx], dtype=dtype)
            iou_t[b, 0, ii, jj] = np.clip(iou.data, 0.0, 1.0) if fixed is None else fixed
        cls_logits = ops.gather(head, (slice(None), slice(0, num_classes)))
        iou_logits = ops.gather(head, (slice(None), slice(num_classes + 4, num_classes + 5)))
        cls_total.append(ops.sum(ops.bce_with_logits(cls_logits, cls_t)))
        iou_total.append(ops.sum(ops.bce_with_logits(iou_logits, iou_t)))
    l_cls = ops.mul(_stack_sum(cls_total), 1.0 / denom)
    l_iou = ops.mul(_stack_sum(iou_total), 1.0 / denom)
    if reg_ious:
        all_iou = reg_ious[0] if len(reg_ious) == 1 else ops.concat(reg_ious, axis=0)
        l_reg = ops.mul(ops.sum(ops.sub(1.0, all_iou)), 1.0 / denom)
    else:
        l_reg = Tensor(np.zeros((), dtype=dtype))
    return LossTerms(l_cls, l_iou, l_reg)


def _stack_sum(xs: List[Tensor]) -> Tensor:
    out = xs[0]
    for x in xs[1:]:
        out = ops.add(out, x)
    return out


def total_loss(terms: LossTerms, cfg: LossConfig = LossConfig()) -> Tensor:
    return ops.add(ops.add(terms.cls, ops.mul(terms.iou, cfg.alpha)), ops.mul(terms.reg, cfg.beta))


# -- optimisation -----------------------------------------------------------------------


def lr_schedule(step: int, steps_per_epoch: int, cfg: OptimConfig) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at the last epoch."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.lr * step / warm
    progress = min(1.0, (step - warm) / max(1, total - warm))
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(weights: Mapping[str, Tensor], state: MutableMapping[str, np.ndarray], lr: float,
             cfg: OptimConfig, decay: Optional[set] = None) -> None:
    """``v = momentum*v + grad + wd*w; w -= lr*v`` for every weight holding a gradient.

    Weight decay applies only to names in ``decay`` (all when ``None``).
    """
    for name, w in weights.items():
        if w.grad is None:
            continue
        if w.grad.shape != w.shape:
            raise ValueError(f"gradient shape {w.grad.shape} != weight shape {w.shape} for {name!r}")
        g = w.grad
        if cfg.weight_decay and (decay is None or name in decay):
            g = g + cfg.weight_decay * w.data
        v = state.get(name)
        if v is None:
            v = np.zeros_like(w.data)
        elif v.shape != w.shape:
            raise ValueError(f"velocity shape {v.shape} != weight shape {w.shape} for {name!r}")
        v = cfg.momentum * v + g
        state[name] = v
        w.data -= (lr * v).astype(w.dtype, copy=False)


# -- synthetic scenes ---------------------------------------------------------------------

COLORS = np.array([[0.9, 0.15, 0.1], [0.1, 0.85, 0.2], [0.15, 0.25, 0.95]])


@dataclass
class Scene:
    image: np.ndarray  # (3, S, S)
    boxes: List[Tuple[float, float, float, float]]
    classes: List[int]


def make_scenes(count: int = 4, size: int = 128, seed: int = 0) -> List[Scene]:
    """Dark noisy canvases with 1-3 axis-aligned coloured rectangles; class = colour."""
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(count):
        img = 0.1 * rng.random((3, size, size))
        boxes, classes = [], []
        for _ in range(int(rng.integers(1, 4))):
            bw, bh = rng.integers(size // 10, size // 2, size=2)
            x1 = int(rng.integers(0, size - bw))
            y1 = int(rng.integers(0, size - bh))
            cls = int(rng.integers(0, len(COLORS)))
            img[:, y1:y1 + bh, x1:x1 + bw] = COLORS[cls][:, None, None] + 0.05 * rng.random((3, bh, bw))
            boxes.append((float(x1), float(y1), float(x1 + bw), float(y1 + bh)))
            classes.append(cls)
        scenes.append(Scene(img, boxes, classes))
    return scenes


def assign_center_cells(scenes: Sequence[Scene], input_size: int,
                        strides: Sequence[int] = STRIDES) -> List[Positive]:
    """The cell holding each box centre, at the stride matching the box's longer side, is positive."""
    positives, taken = [], set()
    for b, scene in enumerate(scenes):
        for box, cls in zip(scene.boxes, scene.classes):
            side = max(box[2] - box[0], box[3] - box[1])
            scale = 0 if side <= 4 * strides[0] else 1 if side <= 4 * strides[1] else 2
            s = strides[scale]
            cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
            i = min(int(cy // s), input_size // s - 1)
            j = min(int(cx // s), input_size // s - 1)
            if (scale, b, i, j) in taken:
                continue
            taken.add((scale, b, i, j))
            positives.append(Positive(scale, b, i, j, cls, tuple(box)))
    return positives


def toy_overfit(graph: NetworkGraph, scenes: Sequence[Scene], steps: int, seed: int = 0,
                optim: Optional[OptimConfig] = None, loss_cfg: LossConfig = LossConfig(),
                weights: Optional[WeightStore] = None, dtype=np.float32) -> List[Dict]:
    """Full-batch training on ``scenes``; returns one trace row per step.

    Rows hold ``step, lr, L_cls, L_iou, L_reg, total`` evaluated before the
    update of that step.
    """
    optim = optim or OptimConfig(epochs=max(steps, 1), warmup_epochs=min(5, max(steps, 1)))
    if weights is None:
        weights = graph.init_weights(seed=seed, dtype=dtype)
    slots = graph.slots()
    weights.set_requires_grad(True, slots)
    decay = {s.name for s in slots if s.kind == "param" and s.decay}
    images = Tensor(np.stack([s.image for s in scenes]).astype(dtype))
    positives = assign_center_cells(scenes, graph.input_size)
    state: Dict[str, np.ndarray] = {}
    trace = []
    for step in range(steps):
        for w in weights.values():
            w.grad = None
        heads = forward_full(graph, weights, images, training=True)
        terms = loss_terms(heads, positives, graph.num_classes)
        loss = total_loss(terms, loss_cfg)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        loss.backward()
        lr = lr_schedule(step, 1, optim)
        cls_v, iou_v, reg_v = terms.values()
        trace.append({"step": step, "lr": lr, "L_cls": cls_v, "L_iou": iou_v, "L_reg": reg_v, "total": value})
        sgd_step(weights, state, lr, optim, decay)
    weights.set_requires_grad(False)
    return trace


def trace_csv(trace: Sequence[Dict]) -> str:
    cols = ["step", "lr", "L_cls", "L_iou", "L_reg", "total"]
    lines = [",".join(cols)]
    for row in trace:
        lines.append(",".join(str(row[c]) if c == "step" else repr(float(row[c])) for c in cols))
    return "\n".join(lines) + "\n"
