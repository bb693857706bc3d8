"""Parameter / MAC accounting, attention complexity formulas, and the scaling bench."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from dpnet import counting, ops
from dpnet.attention import AttentionConfig, LscmWeights, lscm_forward
from dpnet.network import KINDS, NetworkGraph
from dpnet.tensor import Tensor
from dpnet.weights import init_store

Number = Union[int, float]


@dataclass
class AnalysisReport:
    layers: List[Dict] = field(default_factory=list)
    totals: Dict[str, int] = field(default_factory=lambda: {"params": 0, "macs": 0})
    complexity: List[Dict] = field(default_factory=list)
    bench: List[Dict] = field(default_factory=list)
    slopes: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "AnalysisReport":
        return cls(layers=list(d.get("layers", [])), totals=dict(d.get("totals", {"params": 0, "macs": 0})),
                   complexity=list(d.get("complexity", [])), bench=list(d.get("bench", [])),
                   slopes=dict(d.get("slopes", {})))


def count_params_macs(graph: NetworkGraph, input_size: Optional[int] = None) -> AnalysisReport:
    """Static per-layer counts. Conv MACs are ``C_out*H'*W'*(C_in/groups)*Kh*Kw``, matmul ``m*p*q``."""
    if input_size is not None and input_size != graph.input_size:
        graph = dataclasses.replace(graph, input_size=input_size)
    report = AnalysisReport()
    if not graph.nodes:
        return report
    shapes = graph.shapes()
    for node in graph.nodes:
        params = sum(s.size for s in graph.node_slots(node) if s.kind == "param")
        macs = KINDS[node.kind].macs(node, [shapes[v] for v in node.inputs], graph)
        report.layers.append({"name": node.name, "kind": node.kind, "layer": node.layer, "path": node.path,
                              "params": int(params), "macs": int(macs),
                              "out_shape": [list(shapes[v]) for v in node.outputs]})
    report.totals = {"params": sum(r["params"] for r in report.layers),
                     "macs": sum(r["macs"] for r in report.layers)}
    return report


def _exact(x: Fraction) -> Number:
    return int(x) if x.denominator == 1 else float(x)


def complexity_table2(n: int, c: int, k: int, r: int) -> List[Dict]:
    """Similarity / reweight / total operation counts for dense vs pooled attention."""
    n, c, k, r = (Fraction(v) for v in (n, c, k, r))
    kk_r = k * k / r
    rows = [
        ("Non-local", n * n * c, n * n * c),
        ("DANet", n * n * c + n * c * c, n * n * c + n * c * c),
        ("LSCM", n * c * kk_r + k * k * c * c / r, 2 * n * c),
    ]
    return [{"method": m, "similarity": _exact(s), "reweight": _exact(w), "total": _exact(s + w)}
            for m, s, w in rows]


# -- scaling bench --------------------------------------------------------------------


def dense_attention(x: Tensor) -> Tensor:
    """Non-local style reference on ``(n, c)``: softmax(X X^T) X, with n*n*c MACs per product."""
    sim = ops.matmul(x, ops.transpose(x, (1, 0)))
    s = sim.data - sim.data.max(axis=1, keepdims=True)
    e = np.exp(s)
    attn = Tensor(e / e.sum(axis=1, keepdims=True))
    return ops.matmul(attn, x)


def loglog_slope(ns: Sequence[float], values: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(ns, dtype=float)), np.log(np.asarray(values, dtype=float)), 1)[0])


def scaling_bench(c: int = 64, k: int = 5, r: int = 8, sides: Sequence[int] = (10, 20, 40, 80),
                  seed: int = 0) -> AnalysisReport:
    """Instrumented LSCM and dense-attention forwards at ``n = side**2`` positions.

    Each row records the whole-module LSCM MACs, the spatial-attention share
    (the part the complexity table accounts for), the dense reference MACs,
    and wall times. Slopes are least-squares fits of log(MACs) on log(n).
    """
    if len(sides) < 3:
        raise ValueError(f"scaling bench needs at least 3 resolutions, got {len(sides)}")
    cfg = AttentionConfig(channels=c, k=k, r=r)
    rng = np.random.default_rng(seed)
    store = init_store(LscmWeights.slots("b", cfg), seed=seed, dtype=np.float32)
    for name in ("b.sp_o", "b.ch_o"):
        store[name] = Tensor(rng.normal(size=store[name].shape).astype(np.float32))
    w = LscmWeights.from_store(store, "b")
    report = AnalysisReport()
    for side in sides:
        n = side * side
        f = Tensor(rng.normal(size=(c, side, side)).astype(np.float32))
        t0 = time.perf_counter()
        with counting.counting() as ctr:
            lscm_forward(f, cfg, w)
        t1 = time.perf_counter()
        x = Tensor(f.data.reshape(c, n).T.copy())
        with counting.counting() as dense_ctr:
            dense_attention(x)
        t2 = time.perf_counter()
        report.bench.append({"n": n, "side": side, "lscm_macs": ctr.total,
                             "lscm_spatial_macs": ctr.scoped("spatial"),
                             "lscm_channel_macs": ctr.scoped("channel"),
                             "dense_macs": dense_ctr.total,
                             "lscm_time_s": t1 - t0, "dense_time_s": t2 - t1})
    ns = [row["n"] for row in report.bench]
    report.slopes = {
        "lscm": loglog_slope(ns, [row["lscm_macs"] for row in report.bench]),
        "lscm_spatial": loglog_slope(ns, [row["lscm_spatial_macs"] for row in report.bench]),
        "dense": loglog_slope(ns, [row["dense_macs"] for row in report.bench]),
    }
    report.complexity = [dict(row, n=n, c=c, k=k, r=r) for n in ns for row in complexity_table2(n, c, k, r)]
    return report


# -- rendering --------------------------------------------------------------------------


def emit_report(report: AnalysisReport, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2)
    if fmt == "markdown":
        return _markdown(report)
    raise ValueError(f"unknown report format {fmt!r}")


def _shape_str(shape) -> str:
    if shape and isinstance(shape[0], list):
        return " / ".join(_shape_str(s) for s in shape)
    if len(shape) == 3:
        c, h, w = shape
        return f"{h}x{w}x{c}"
    return "x".join(str(s) for s in shape)


def _markdown(report: AnalysisReport) -> str:
    lines = []
    if report.layers:
        lines += ["| Layer | Path | Name | Operation | Output (HxWxC) | Params | MACs |",
                  "|---|---|---|---|---|---|---|"]
        for row in report.layers:
            lines.append(f"| {row.get('layer', '')} | {row.get('path', '')} | {row['name']} | {row['kind']} "
                         f"| {_shape_str(row['out_shape'])} | {row['params']:,} | {row['macs']:,} |")
        lines.append(f"\n**Total:** {report.totals['params']:,} params, {report.totals['macs']:,} MACs")
    if report.complexity:
        lines += ["", "| Method | n | c | Similarity | Reweight | Total |", "|---|---|---|---|---|---|"]
        for row in report.complexity:
            lines.append(f"| {row['method']} | {row.get('n', '')} | {row.get('c', '')} | {row['similarity']:,} "
                         f"| {row['reweight']:,} | {row['total']:,} |")
    if report.bench:
        lines += ["", "| n | LSCM MACs | LSCM spatial MACs | Dense MACs | LSCM s | Dense s |",
                  "|---|---|---|---|---|---|"]
        for row in report.bench:
            lines.append(f"| {row['n']} | {row['lscm_macs']:,} | {row['lscm_spatial_macs']:,} | {row['dense_macs']:,} "
                         f"| {row['lscm_time_s']:.4f} | {row['dense_time_s']:.4f} |")
        lines.append("")
        lines += [f"- slope {k}: {v:.4f}" for k, v in report.slopes.items()]
    return "\n".join(lines)


def bench_csv(report: AnalysisReport) -> str:
    cols = ["n", "side", "lscm_macs", "lscm_spatial_macs", "lscm_channel_macs", "dense_macs",
            "lscm_time_s", "dense_time_s"]
    out = [",".join(cols)]
    for row in report.bench:
        out.append(",".join(str(row[c]) for c in cols))
    return "\n".join(out) + "\n"
