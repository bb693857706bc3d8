"""Full detector graph: dual-path backbone, LCCM neck, ConvBlock heads.

The graph is a flat list of :class:`Node` records. Each node names its input
and output values, so the same list drives forward evaluation, static shape
inference and the analyzer's parameter/MAC accounting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from dpnet import blocks, ops
from dpnet.attention import LscmWeights, lccm_bu_forward, lccm_td_forward, lscm_macs
from dpnet.blocks import BlockConfig, WeightView
from dpnet.tensor import ShapeError, Tensor
from dpnet.weights import Slot, WeightStore, init_store

STRIDES = (8, 16, 32)
FULL_REPEATS = (3, 7, 3)
HRP_WIDTH = 128
STAGE_WIDTHS = (128, 256, 512)
NECK_WIDTH = 224
HEAD_WIDTH = 224
PRIOR_PROB = 0.01


class NumericError(ArithmeticError):
    """A forward pass produced NaN or infinity."""


@dataclass
class Node:
    name: str
    kind: str
    inputs: Tuple[str, ...]
    outputs: Tuple[str, ...]
    config: Dict
    layer: str = ""
    path: str = ""


@dataclass
class NetworkGraph:
    nodes: List[Node]
    num_classes: int
    input_size: int
    block: BlockConfig
    neck_width: int = NECK_WIDTH
    head_width: int = HEAD_WIDTH
    repeats: Tuple[int, int, int] = FULL_REPEATS
    taps: Dict[str, str] = field(default_factory=dict)
    heads: Tuple[str, ...] = ()

    @property
    def out_channels(self) -> int:
        return self.num_classes + 5

    def slots(self) -> List[Slot]:
        out: List[Slot] = []
        for node in self.nodes:
            out.extend(KINDS[node.kind].slots(node, self))
        return out

    def node_slots(self, node: Node) -> List[Slot]:
        return KINDS[node.kind].slots(node, self)

    def init_weights(self, seed: int = 0, dtype=np.float32) -> WeightStore:
        """Seeded init; class and IoU biases of each head start at logit(PRIOR_PROB)."""
        store = init_store(self.slots(), seed=seed, dtype=dtype)
        prior = math.log(PRIOR_PROB / (1.0 - PRIOR_PROB))
        k = self.num_classes
        for node in self.nodes:
            if node.kind == "pred":
                bias = store[f"{node.name}.bias"].data
                bias[:k] = prior
                bias[k + 4] = prior
        return store

    def shapes(self, batch: Optional[int] = None) -> Dict[str, Tuple[int, ...]]:
        """Static per-sample shape of every value in the graph."""
        shapes = {"image": (3, self.input_size, self.input_size)}
        for node in self.nodes:
            outs = KINDS[node.kind].shapes(node, [shapes[v] for v in node.inputs], self)
            shapes.update(zip(node.outputs, outs))
        return shapes


# -- node kinds -------------------------------------------------------------------


@dataclass(frozen=True)
class NodeKind:
    slots: Callable[[Node, NetworkGraph], List[Slot]]
    forward: Callable
    shapes: Callable[[Node, List[Tuple[int, ...]], NetworkGraph], List[Tuple[int, ...]]]
    macs: Callable[[Node, List[Tuple[int, ...]], NetworkGraph], int]


def _same(node, ins, g):
    return [ins[0]]


def _halved(c):
    def f(node, ins, g):
        _, h, w = ins[0]
        return [(c(node), h // 2, w // 2)]
    return f


def _stem_conv_forward(node, xs, w, g, training):
    return [blocks.stem_conv_forward(xs[0], w, training)]


def _maxpool_forward(node, xs, w, g, training):
    return [ops.pool2d(xs[0], "max", 2, 2)]


def _asu_forward(node, xs, w, g, training):
    return [blocks.asu_forward(xs[0], g.block, w, training)]


def _asu_stride_forward(node, xs, w, g, training):
    return [blocks.asu_stride_forward(xs[0], g.block, w, training)]


def _bifm_forward(node, xs, w, g, training):
    return list(blocks.bifm_forward(xs[0], xs[1], node.config["n"], w, training))


def _lateral_forward(node, xs, w, g, training):
    return [blocks.conv_bn(xs[0], w, relu=True, training=training)]


def _lccm_weights(w: WeightView) -> LscmWeights:
    return LscmWeights.from_store(w.store, w.prefix)


def _lccm_td_forward(node, xs, w, g, training):
    return [lccm_td_forward(xs[0], xs[1], g.block.attention(node.config["c"]), _lccm_weights(w))]


def _lccm_bu_forward(node, xs, w, g, training):
    return [lccm_bu_forward(xs[0], xs[1], g.block.attention(node.config["c"]), _lccm_weights(w))]


def _convblock_forward(node, xs, w, g, training):
    return [blocks.convblock_forward(xs[0], w, training)]


def _pred_forward(node, xs, w, g, training):
    return [ops.conv2d(xs[0], w["weight"], w["bias"])]


def _pred_slots(node, g):
    c_in, c_out = node.config["c_in"], node.config["c_out"]
    return [Slot(f"{node.name}.weight", (c_out, c_in, 1, 1), fan_in=c_in),
            Slot(f"{node.name}.bias", (c_out,), init="zeros", decay=False)]


KINDS: Dict[str, NodeKind] = {
    "stem_conv": NodeKind(
        slots=lambda n, g: blocks.stem_slots(n.name),
        forward=_stem_conv_forward,
        shapes=_halved(lambda n: blocks.STEM_CHANNELS),
        macs=lambda n, ins, g: blocks.stem_macs(ins[0][1], ins[0][2])),
    "maxpool": NodeKind(
        slots=lambda n, g: [],
        forward=_maxpool_forward,
        shapes=lambda n, ins, g: [(ins[0][0], ins[0][1] // 2, ins[0][2] // 2)],
        macs=lambda n, ins, g: 0),
    "asu": NodeKind(
        slots=lambda n, g: blocks.asu_slots(n.name, n.config["c"], g.block),
        forward=_asu_forward,
        shapes=_same,
        macs=lambda n, ins, g: blocks.asu_macs(ins[0][0], ins[0][1], ins[0][2], g.block)),
    "asu_stride": NodeKind(
        slots=lambda n, g: blocks.asu_stride_slots(n.name, n.config["c_in"], n.config["c_out"], g.block),
        forward=_asu_stride_forward,
        shapes=_halved(lambda n: n.config["c_out"]),
        macs=lambda n, ins, g: blocks.asu_stride_macs(ins[0][0], n.config["c_out"], ins[0][1], ins[0][2], g.block)),
    "bifm": NodeKind(
        slots=lambda n, g: blocks.bifm_slots(n.name, n.config["c"], n.config["n"]),
        forward=_bifm_forward,
        shapes=lambda n, ins, g: [ins[0], ins[1]],
        macs=lambda n, ins, g: blocks.bifm_macs(ins[0][0], ins[0][1], ins[0][2], n.config["n"])),
    "lateral": NodeKind(
        slots=lambda n, g: blocks.conv_bn_slots(n.name, n.config["c_in"], n.config["c_out"], 1),
        forward=_lateral_forward,
        shapes=lambda n, ins, g: [(n.config["c_out"],) + tuple(ins[0][1:])],
        macs=lambda n, ins, g: blocks.conv_macs(ins[0][0], n.config["c_out"], 1, 1, ins[0][1], ins[0][2])),
    "lccm_td": NodeKind(
        slots=lambda n, g: LscmWeights.slots(n.name, g.block.attention(n.config["c"])),
        forward=_lccm_td_forward,
        shapes=lambda n, ins, g: [ins[0]],
        macs=lambda n, ins, g: lscm_macs(ins[0][1] * ins[0][2], g.block.attention(n.config["c"]))),
    "lccm_bu": NodeKind(
        slots=lambda n, g: LscmWeights.slots(n.name, g.block.attention(n.config["c"])),
        forward=_lccm_bu_forward,
        shapes=lambda n, ins, g: [ins[0]],
        macs=lambda n, ins, g: lscm_macs(ins[0][1] * ins[0][2], g.block.attention(n.config["c"]))),
    "convblock": NodeKind(
        slots=lambda n, g: blocks.convblock_slots(n.name, n.config["c"]),
        forward=_convblock_forward,
        shapes=_same,
        macs=lambda n, ins, g: blocks.convblock_macs(ins[0][0], ins[0][1], ins[0][2])),
    "pred": NodeKind(
        slots=_pred_slots,
        forward=_pred_forward,
        shapes=lambda n, ins, g: [(n.config["c_out"],) + tuple(ins[0][1:])],
        macs=lambda n, ins, g: blocks.conv_macs(n.config["c_in"], n.config["c_out"], 1, 1, ins[0][1], ins[0][2])),
}


# -- construction -------------------------------------------------------------------


def build_dpnet(num_classes: int = 80, input_size: int = 320, cfg: Optional[BlockConfig] = None,
                neck_width: int = NECK_WIDTH, head_width: int = HEAD_WIDTH,
                repeats: Sequence[int] = FULL_REPEATS) -> NetworkGraph:
    """Assemble the detector graph.

    ``repeats`` gives the number of plain ASUs following each LRP stride ASU in
    stages 2-4; the HRP runs ``repeats[i] + 1`` ASUs in stages 3 and 4.
    """
    cfg = cfg or BlockConfig()
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if input_size < 32 or input_size % 32:
        raise ValueError(f"input_size must be a positive multiple of 32, got {input_size}")
    if neck_width < 1 or head_width < 1:
        raise ValueError("neck_width and head_width must be positive")
    if len(repeats) != 3 or any(r < 0 for r in repeats):
        raise ValueError(f"repeats must be three non-negative ints, got {repeats}")
    n2, n3, n4 = repeats
    c2, c3, c4 = STAGE_WIDTHS
    nodes: List[Node] = []
    layer = 0

    def add(name, kind, inputs, outputs, path="", **config):
        nodes.append(Node(f"backbone.{name}", kind, tuple(inputs), tuple(outputs), config, str(layer), path))

    layer = 1
    add("l01", "stem_conv", ["image"], ["x1"], c_out=blocks.STEM_CHANNELS)
    layer = 2
    add("l02", "maxpool", ["x1"], ["x2"])
    layer = 3
    add("l03.lrp", "asu_stride", ["x2"], ["lrp3"], "LRP", c_in=blocks.STEM_CHANNELS, c_out=c2)
    lrp = "lrp3"
    for _ in range(n2):
        layer += 1
        add(f"l{layer:02d}.lrp", "asu", [lrp], [f"lrp{layer}"], "LRP", c=c2)
        lrp = f"lrp{layer}"
    hrp = lrp

    for (c_prev, c_cur, reps, n) in ((c2, c3, n3, 2), (c3, c4, n4, 4)):
        layer += 1
        add(f"l{layer:02d}.lrp", "asu_stride", [lrp], [f"lrp{layer}"], "LRP", c_in=c_prev, c_out=c_cur)
        add(f"l{layer:02d}.hrp", "asu", [hrp], [f"hrp{layer}"], "HRP", c=HRP_WIDTH)
        lrp, hrp = f"lrp{layer}", f"hrp{layer}"
        for _ in range(reps):
            layer += 1
            add(f"l{layer:02d}.lrp", "asu", [lrp], [f"lrp{layer}"], "LRP", c=c_cur)
            add(f"l{layer:02d}.hrp", "asu", [hrp], [f"hrp{layer}"], "HRP", c=HRP_WIDTH)
            lrp, hrp = f"lrp{layer}", f"hrp{layer}"
        layer += 1
        add(f"l{layer:02d}.bifm", "bifm", [hrp, lrp], [f"hrp{layer}", f"lrp{layer}"], "", c=HRP_WIDTH, n=n)
        lrp, hrp = f"lrp{layer}", f"hrp{layer}"
        if n == 2:
            c2_tap = lrp

    taps = {"C1": hrp, "C2": c2_tap, "C3": lrp}
    layer_label = ""

    def neck(name, kind, inputs, outputs, **config):
        nodes.append(Node(name, kind, tuple(inputs), tuple(outputs), config, layer_label, "neck"))

    w = neck_width
    neck("neck.lat1", "lateral", [taps["C1"]], ["M1"], c_in=HRP_WIDTH, c_out=w)
    neck("neck.lat2", "lateral", [taps["C2"]], ["M2"], c_in=c3, c_out=w)
    neck("neck.lat3", "lateral", [taps["C3"]], ["M3"], c_in=c4, c_out=w)
    neck("neck.td2", "lccm_td", ["M2", "M3"], ["T2"], c=w)
    neck("neck.td1", "lccm_td", ["M1", "T2"], ["F1"], c=w)
    neck("neck.bu2", "lccm_bu", ["T2", "F1"], ["F2"], c=w)
    neck("neck.bu3", "lccm_bu", ["M3", "F2"], ["F3"], c=w)
    taps.update({"M1": "M1", "M2": "M2", "M3": "M3", "F1": "F1", "F2": "F2", "F3": "F3"})

    heads = []
    for i in (1, 2, 3):
        prev = f"F{i}"
        if head_width != w:
            nodes.append(Node(f"head{i}.proj", "lateral", (prev,), (f"H{i}p",), {"c_in": w, "c_out": head_width},
                              "", "head"))
            prev = f"H{i}p"
        for j in (1, 2):
            nodes.append(Node(f"head{i}.cb{j}", "convblock", (prev,), (f"H{i}b{j}",), {"c": head_width}, "", "head"))
            prev = f"H{i}b{j}"
        nodes.append(Node(f"head{i}.pred", "pred", (prev,), (f"P{i}",),
                          {"c_in": head_width, "c_out": num_classes + 5}, "", "head"))
        heads.append(f"P{i}")

    graph = NetworkGraph(nodes=nodes, num_classes=num_classes, input_size=input_size, block=cfg,
                         neck_width=neck_width, head_width=head_width, repeats=tuple(repeats),
                         taps=taps, heads=tuple(heads))
    _validate_sites(graph)
    return graph


def _validate_sites(graph: NetworkGraph) -> None:
    """Reject configs whose attention constraints fail anywhere, naming the layer."""
    shapes = graph.shapes()
    for node in graph.nodes:
        try:
            graph.node_slots(node)
        except ValueError as exc:
            raise ValueError(str(exc)) from None
        if node.kind in ("asu", "asu_stride", "lccm_td", "lccm_bu"):
            out = shapes[node.outputs[0]]
            _, h, w = shapes[node.inputs[1]] if node.kind == "lccm_td" else out
            c = out[0] // 2 if node.kind.startswith("asu") else out[0]
            try:
                graph.block.attention(c).check_site(h, w)
            except (ShapeError, ValueError) as exc:
                raise ValueError(f"{node.name}: {exc}") from None


# -- evaluation ---------------------------------------------------------------------


def forward_full(graph: NetworkGraph, weights: Mapping[str, Tensor], image: Tensor,
                 training: bool = False, taps: Optional[Dict[str, Tensor]] = None) -> List[Tensor]:
    """Run the graph; returns the three raw head tensors (stride 8, 16, 32).

    ``image`` is ``(3, S, S)`` or a batch ``(N, 3, S, S)``. When ``taps`` is a
    dict it receives every intermediate value by name.
    """
    expect = (3, graph.input_size, graph.input_size)
    if tuple(image.shape[-3:]) != expect or image.ndim not in (3, 4):
        raise ShapeError(f"image shape {image.shape} does not match graph input {expect}")
    values: Dict[str, Tensor] = {"image": image}
    for node in graph.nodes:
        kind = KINDS[node.kind]
        outs = kind.forward(node, [values[v] for v in node.inputs], WeightView(weights, node.name), graph, training)
        for name, t in zip(node.outputs, outs):
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"non-finite values in output {name!r} of layer {node.name}")
            values[name] = t
    if taps is not None:
        taps.update(values)
    return [values[h] for h in graph.heads]


def shape_trace(graph: NetworkGraph) -> List[Dict]:
    """Rows ``{layer, path, name, kind, out_shape}`` in graph order; Bi-FM yields one row per path."""
    shapes = graph.shapes()
    rows = []
    for node in graph.nodes:
        if node.kind == "bifm":
            for path, value in (("LRP", node.outputs[1]), ("HRP", node.outputs[0])):
                rows.append({"layer": node.layer, "path": path, "name": node.name, "kind": node.kind,
                             "out_shape": list(shapes[value])})
            continue
        rows.append({"layer": node.layer, "path": node.path or "LRP", "name": node.name, "kind": node.kind,
                     "out_shape": list(shapes[node.outputs[0]])})
    for tap in ("C1", "C2", "C3"):
        rows.append({"layer": tap, "path": "tap", "name": graph.taps[tap], "kind": "tap",
                     "out_shape": list(shapes[graph.taps[tap]])})
    return rows


# -- decoding -----------------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: Tuple[float, float, float, float]

    def to_dict(self) -> Dict:
        return {"class_id": self.class_id, "score": self.score, "box": list(self.box)}


def _sig(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def decode_boxes(deltas: np.ndarray, stride: int) -> np.ndarray:
    """(4, H, W) deltas -> (H, W, 4) boxes in input pixels."""
    dx, dy, dw, dh = deltas
    h, w = dx.shape
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cx, cy = (jj + dx) * stride, (ii + dy) * stride
    with np.errstate(over="ignore", invalid="ignore"):
        bw, bh = np.exp(dw) * stride, np.exp(dh) * stride
    return np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=-1)


def encode_box(box: Sequence[float], i: int, j: int, stride: int) -> Tuple[float, float, float, float]:
    """Inverse of :func:`decode_boxes` for a box assigned to cell ``(i, j)``."""
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    return (cx / stride - j, cy / stride - i, math.log((x2 - x1) / stride), math.log((y2 - y1) / stride))


def decode(heads: Sequence, num_classes: int, strides: Sequence[int] = STRIDES,
           score_threshold: float = 0.05) -> List[Detection]:
    """Per cell: class scores sigmoid(cls) * sigmoid(iou); one detection per class above threshold.

    Boxes that overflow to non-finite coordinates are dropped.
    """
    dets: List[Detection] = []
    for raw, stride in zip(heads, strides):
        arr = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
        if arr.ndim == 4:
            if arr.shape[0] != 1:
                raise ShapeError("decode works on one image at a time")
            arr = arr[0]
        if arr.shape[0] != num_classes + 5:
            raise ShapeError(f"head has {arr.shape[0]} channels, expected {num_classes + 5}")
        arr = arr.astype(np.float64)
        boxes = decode_boxes(arr[num_classes:num_classes + 4], stride)
        scores = _sig(arr[:num_classes]) * _sig(arr[num_classes + 4])[None]
        cls, ii, jj = np.nonzero(scores >= score_threshold)
        for c, i, j in zip(cls, ii, jj):
            x1, y1, x2, y2 = boxes[i, j]
            if x2 > x1 and y2 > y1 and np.isfinite(boxes[i, j]).all():
                dets.append(Detection(int(c), float(scores[c, i, j]), (float(x1), float(y1), float(x2), float(y2))))
    return dets


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5) -> List[Detection]:
    """Greedy per-class suppression; output sorted by descending score, ties by input order."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    kept: List[Detection] = []
    for i in order:
        d = detections[i]
        if all(k.class_id != d.class_id or box_iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept
