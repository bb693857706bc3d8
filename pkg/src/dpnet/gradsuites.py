"""Finite-difference suites over every op, every block, and a reduced detector, at f64."""

from __future__ import annotations

from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from dpnet import blocks, ops
from dpnet.attention import AttentionConfig, LscmWeights, lccm_bu_forward, lccm_td_forward, lscm_forward
from dpnet.blocks import BlockConfig, WeightView
from dpnet.gradcheck import GradCheckReport, finite_diff_check
from dpnet.tensor import Tensor
from dpnet.weights import Slot, init_store

OPS_TOLERANCE = 1e-5
BLOCK_TOLERANCE = 1e-5
NETWORK_TOLERANCE = 1e-4
# ~1e5 stem pre-activations move per perturbed weight, so 1e-5 can cross relu/max-pool kinks;
# 1e-6 alone drowns the smallest attention gradients in rounding noise
NETWORK_STEPS = (1e-5, 1e-6)
# running statistics settle to within 0.9**40 (about 1.5%) of the probe-batch statistics
BN_CALIBRATION_PASSES = 40
# constant IoU-branch targets; the training loss stops their gradient, which FD cannot reproduce
IOU_TARGETS = (0.6, 0.3, 0.8)

Case = Tuple[Callable[[], Tensor], Dict[str, Tensor]]


def _probe(out: Tensor, seed: int = 99) -> Tensor:
    """Scalar ``sum(out * R)`` with a fixed random ``R`` so every output entry carries gradient."""
    r = np.random.default_rng(seed).normal(size=out.shape)
    return ops.sum(ops.mul(out, Tensor(r)))


def _t(rng: np.random.Generator, *shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape))


def _away_from_zero(rng: np.random.Generator, *shape) -> Tensor:
    mag = rng.uniform(0.2, 2.0, size=shape)
    return Tensor(mag * rng.choice([-1.0, 1.0], size=shape))


def _distinct(rng: np.random.Generator, *shape) -> Tensor:
    """Values spaced >= 0.01 apart, so max selections do not flip under small steps."""
    n = int(np.prod(shape))
    return Tensor((rng.permutation(n) * 0.01 - n * 0.005).reshape(shape))


def op_cases(seed: int = 0) -> Dict[str, Case]:
    rng = np.random.default_rng(seed)
    cases: Dict[str, Case] = {}

    def case(name, fn, **params):
        cases[name] = (lambda: _probe(fn(**params)), params)

    case("conv2d", lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
         x=_t(rng, 2, 3, 5, 5), w=_t(rng, 4, 3, 3, 3), b=_t(rng, 4))
    case("conv2d_grouped", lambda x, w: ops.conv2d(x, w, padding=1, groups=2),
         x=_t(rng, 1, 4, 5, 5), w=_t(rng, 4, 2, 3, 3))
    case("conv2d_depthwise", lambda x, w: ops.conv2d(x, w, stride=2, padding=2, groups=4),
         x=_t(rng, 4, 6, 6), w=_t(rng, 4, 1, 5, 5))
    case("conv2d_pointwise", lambda x, w, b: ops.conv2d(x, w, b),
         x=_t(rng, 2, 3, 4, 4), w=_t(rng, 5, 3, 1, 1), b=_t(rng, 5))
    case("matmul", lambda a, b: ops.matmul(a, b), a=_t(rng, 2, 3, 4), b=_t(rng, 4, 5))
    case("add", lambda a, b: ops.add(a, b), a=_t(rng, 4, 3), b=_t(rng, 4, 1))
    case("sub", lambda a, b: ops.sub(a, b), a=_t(rng, 4, 3), b=_t(rng, 1, 3))
    case("mul", lambda a, b: ops.mul(a, b), a=_t(rng, 4, 3), b=_t(rng, 4, 1))
    case("div", lambda a, b: ops.div(a, b), a=_t(rng, 4, 3), b=_t(rng, 4, 3, low=0.5, high=2.0))
    case("maximum", lambda a: ops.maximum(a, 0.0), a=_away_from_zero(rng, 3, 4))
    case("minimum", lambda a: ops.minimum(a, 0.0), a=_away_from_zero(rng, 3, 4))
    case("exp", lambda x: ops.exp(x), x=_t(rng, 3, 4))
    case("log", lambda x: ops.log(x), x=_t(rng, 3, 4, low=0.5, high=3.0))
    case("sigmoid", lambda x: ops.sigmoid(x), x=_t(rng, 3, 4, low=-4, high=4))
    case("relu", lambda x: ops.relu(x), x=_away_from_zero(rng, 3, 4))
    case("sum_mean", lambda x: ops.add(ops.sum(x, axis=1), ops.mean(x, axis=1)), x=_t(rng, 3, 4))
    case("reshape_transpose", lambda x: ops.transpose(ops.reshape(x, (4, 3)), (1, 0)), x=_t(rng, 3, 4))
    case("gather", lambda x: ops.gather(x, (np.array([0, 2, 0]), slice(1, 3))), x=_t(rng, 3, 4))
    case("layer_norm", lambda x, g, b: ops.layer_norm(x, 1, g, b),
         x=_t(rng, 2, 6, 1), g=_t(rng, 1, low=0.5, high=1.5), b=_t(rng, 1))
    case("batch_norm_train", lambda x, g, b: ops.batch_norm(x, g, b, Tensor(np.zeros(3)), Tensor(np.ones(3)),
                                                            training=True),
         x=_t(rng, 2, 3, 3, 3), g=_t(rng, 3, low=0.5, high=1.5), b=_t(rng, 3))
    case("batch_norm_eval", lambda x, g, b: ops.batch_norm(x, g, b, Tensor(np.full(3, 0.1)),
                                                           Tensor(np.full(3, 2.0))),
         x=_t(rng, 2, 3, 3, 3), g=_t(rng, 3, low=0.5, high=1.5), b=_t(rng, 3))
    case("max_pool", lambda x: ops.pool2d(x, "max", 2, 2), x=_distinct(rng, 2, 4, 4))
    case("avg_pool", lambda x: ops.pool2d(x, "average", 2, 2), x=_t(rng, 2, 4, 4))
    case("adaptive_avg_pool", lambda x: ops.adaptive_avg_pool2d(x, 2), x=_t(rng, 2, 5, 5))
    case("up2", lambda x: ops.resample2d(x, "up2"), x=_t(rng, 2, 3, 3))
    case("down2", lambda x: ops.resample2d(x, "down2"), x=_t(rng, 2, 4, 4))
    case("channel_shuffle", lambda x: ops.channel_shuffle(x, 2), x=_t(rng, 4, 2, 2))
    case("split_concat", lambda x, y: ops.concat([ops.split_channels(x)[1], y]), x=_t(rng, 4, 2, 2),
         y=_t(rng, 3, 2, 2))
    targets = rng.uniform(size=(3, 4))
    case("bce_with_logits", lambda z: ops.bce_with_logits(z, targets), z=_t(rng, 3, 4, low=-3, high=3))
    boxes_a = np.array([[0.0, 0.0, 4.0, 5.0], [1.0, 2.0, 6.0, 7.0]])
    boxes_b = Tensor(np.array([[1.0, 1.5, 5.0, 4.0], [2.5, 1.0, 5.5, 8.0]]))
    case("iou_xyxy", lambda a: ops.iou_xyxy(a, boxes_b), a=Tensor(boxes_a))
    return cases


def _store(slots, seed: int, store=None, keep=()):
    """f64 store with every init-time zero/one randomized, so no gate or affine sits at a special point."""
    rng = np.random.default_rng(seed + 1)
    store = store if store is not None else init_store(slots, seed=seed, dtype=np.float64)
    for s in slots:
        t = store[s.name]
        if s.name.endswith(keep):
            continue
        if s.name.endswith(("bn.var",)):
            t.data[...] = rng.uniform(0.5, 2.0, size=t.shape)
        elif s.name.endswith(("gamma",)):
            t.data[...] = rng.uniform(0.5, 1.5, size=t.shape)
        elif s.init != "kaiming":
            t.data[...] = rng.uniform(-0.5, 0.5, size=t.shape)
    return store


def _params(store, slots) -> Dict[str, Tensor]:
    return {s.name: store[s.name] for s in slots if s.kind == "param"}


def block_cases(seed: int = 0) -> Dict[str, Case]:
    rng = np.random.default_rng(seed)
    cases: Dict[str, Case] = {}
    bc = BlockConfig(k=2, r=2)

    def add(name, slots, fn, inputs):
        store = _store(slots, seed)
        params = dict(_params(store, slots), **inputs)
        view = WeightView(store, name)
        probe = (lambda: fn(view, *inputs.values())) if name.startswith("bifm") else \
            (lambda: _probe(fn(view, *inputs.values())))
        cases[name] = (probe, params)

    att = AttentionConfig(channels=8, k=2, r=2)
    for name, fn, shapes in (
        ("lscm", lambda w, f: lscm_forward(f, att, LscmWeights.from_store(w.store, w.prefix)), [(8, 6, 6)]),
        ("lccm_td", lambda w, h, l: lccm_td_forward(h, l, att, LscmWeights.from_store(w.store, w.prefix)),
         [(8, 6, 6), (8, 3, 3)]),
        ("lccm_bu", lambda w, l, h: lccm_bu_forward(l, h, att, LscmWeights.from_store(w.store, w.prefix)),
         [(8, 3, 3), (8, 6, 6)]),
    ):
        inputs = {f"input{i}": _t(rng, *s) for i, s in enumerate(shapes)}
        add(name, LscmWeights.slots(name, att), fn, inputs)

    add("stem", blocks.stem_slots("stem"), lambda w, x: blocks.stem_forward(x, w), {"input": _t(rng, 3, 8, 8)})
    add("asu", blocks.asu_slots("asu", 8, bc), lambda w, x: blocks.asu_forward(x, bc, w),
        {"input": _t(rng, 8, 4, 4)})
    add("asu_stride", blocks.asu_stride_slots("asu_stride", 4, 8, bc),
        lambda w, x: blocks.asu_stride_forward(x, bc, w), {"input": _t(rng, 4, 8, 8)})
    add("asu_train", blocks.asu_slots("asu_train", 8, bc), lambda w, x: blocks.asu_forward(x, bc, w, training=True),
        {"input": _t(rng, 2, 8, 4, 4)})
    add("bifm_n2", blocks.bifm_slots("bifm_n2", 4, 2), lambda w, h, l: _bifm_probe(w, h, l, 2),
        {"high": _t(rng, 4, 4, 4), "low": _t(rng, 8, 2, 2)})
    add("bifm_n4", blocks.bifm_slots("bifm_n4", 2, 4), lambda w, h, l: _bifm_probe(w, h, l, 4),
        {"high": _t(rng, 2, 8, 8), "low": _t(rng, 8, 2, 2)})
    add("convblock", blocks.convblock_slots("convblock", 4), lambda w, x: blocks.convblock_forward(x, w),
        {"input": _t(rng, 4, 4, 4)})
    return cases


def _bifm_probe(w: WeightView, high: Tensor, low: Tensor, n: int) -> Tensor:
    out_h, out_l = blocks.bifm_forward(high, low, n, w)
    return ops.add(ops.sum(out_h), ops.sum(ops.mul(out_l, Tensor(np.random.default_rng(1).normal(size=out_l.shape)))))


def network_case(seed: int = 0) -> Case:
    """Total detection loss through a reduced detector: one ASU per stage, 96x96 input, batch of 2.

    BN runs on running statistics calibrated on the probe batch: in batch-statistics mode a BN shift that
    feeds straight into another BN has an exactly zero gradient, which the
    relative-error metric cannot resolve. k=2 because with k=1 the LN makes
    the query-side projections scale-invariant.
    """
    from dpnet.network import build_dpnet, forward_full
    from dpnet.training import LossConfig, Positive, loss_terms, total_loss

    graph = build_dpnet(num_classes=2, input_size=96, cfg=BlockConfig(k=2, r=8), neck_width=16, head_width=16,
                        repeats=(0, 0, 0))
    slots = graph.slots()
    store = _store(slots, seed, graph.init_weights(seed, np.float64), keep=("pred.bias",))
    rng = np.random.default_rng(seed)
    image = Tensor(rng.uniform(0, 1, size=(2, 3, 96, 96)))
    for _ in range(BN_CALIBRATION_PASSES):
        forward_full(graph, store, image, training=True)
    positives = [Positive(0, 0, 3, 4, 1, (24.0, 20.0, 44.0, 34.0)),
                 Positive(1, 1, 1, 2, 0, (20.0, 10.0, 50.0, 40.0)),
                 Positive(2, 0, 0, 1, 1, (30.0, 2.0, 62.0, 30.0))]

    def loss():
        heads = forward_full(graph, store, image, training=False)
        return total_loss(loss_terms(heads, positives, graph.num_classes, iou_targets=IOU_TARGETS), LossConfig())

    return loss, dict(_params(store, slots), image=image)


def _run(cases: Mapping[str, Case], tolerance: float, max_entries: Optional[int], seed: int,
         step=1e-5) -> GradCheckReport:
    report = GradCheckReport(tolerance=tolerance)
    for name, (fn, params) in cases.items():
        report.merge(finite_diff_check(fn, params, tolerance=tolerance, step=step, max_entries=max_entries, seed=seed),
                     prefix=f"{name}/")
    return report


def run_ops(seed: int = 0, tolerance: float = OPS_TOLERANCE) -> GradCheckReport:
    return _run(op_cases(seed), tolerance, None, seed)


def run_blocks(seed: int = 0, tolerance: float = BLOCK_TOLERANCE, max_entries: Optional[int] = 12) -> GradCheckReport:
    return _run(block_cases(seed), tolerance, max_entries, seed)


def run_network(seed: int = 0, tolerance: float = NETWORK_TOLERANCE, max_entries: Optional[int] = 3) -> GradCheckReport:
    return _run({"network": network_case(seed)}, tolerance, max_entries, seed, step=NETWORK_STEPS)


SUITES = {"ops": run_ops, "blocks": run_blocks, "network": run_network}
