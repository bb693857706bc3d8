import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from dpnet.analyzer import (AnalysisReport, bench_csv, complexity_table2, count_params_macs, emit_report,
                            loglog_slope, scaling_bench)
from dpnet.blocks import BlockConfig
from dpnet.network import NetworkGraph, Node, build_dpnet


def _by_method(rows):
    return {r["method"]: r for r in rows}


def test_lone_pointwise_conv_counts():
    node = Node("p", "pred", ("image",), ("out",), {"c_in": 128, "c_out": 128})
    graph = NetworkGraph(nodes=[node], num_classes=1, input_size=40, block=BlockConfig())
    report = count_params_macs(graph)
    assert report.totals == {"params": 16_512, "macs": 26_214_400}
    assert report.layers[0]["out_shape"] == [[128, 40, 40]]


def test_empty_graph_counts_zero():
    report = count_params_macs(NetworkGraph(nodes=[], num_classes=1, input_size=32, block=BlockConfig()))
    assert report.totals == {"params": 0, "macs": 0} and report.layers == []


def test_totals_are_row_sums_and_order_invariant():
    graph = build_dpnet(num_classes=3, input_size=128, cfg=BlockConfig(k=3))
    report = count_params_macs(graph)
    assert report.totals["params"] == sum(r["params"] for r in report.layers)
    assert report.totals["macs"] == sum(r["macs"] for r in report.layers)
    # emit the three heads in reverse order: still a valid topological order
    heads = [n for n in graph.nodes if n.path == "head"]
    rest = [n for n in graph.nodes if n.path != "head"]
    reordered = rest + sorted(heads, key=lambda n: -int(n.name[4]))
    other = count_params_macs(NetworkGraph(**{**graph.__dict__, "nodes": reordered}))
    assert other.totals == report.totals


def test_input_size_override():
    graph = build_dpnet(num_classes=3, input_size=128, cfg=BlockConfig(k=3))
    bigger = count_params_macs(graph, input_size=256)
    assert bigger.totals["params"] == count_params_macs(graph).totals["params"]
    assert bigger.totals["macs"] > count_params_macs(graph).totals["macs"]


def test_complexity_table_examples():
    rows = _by_method(complexity_table2(1600, 128, 5, 8))
    assert rows["LSCM"]["total"] == 1_100_800
    assert rows["Non-local"]["total"] == 655_360_000
    unit = _by_method(complexity_table2(1, 1, 1, 1))
    assert unit["LSCM"]["total"] == 4 and unit["Non-local"]["total"] == 2


@given(st.integers(1, 5000), st.integers(1, 512), st.integers(1, 7), st.integers(1, 16))
def test_complexity_table_matches_arithmetic_oracle(n, c, k, r):
    rows = _by_method(complexity_table2(n, c, k, r))
    non_local, danet, lscm = oracles.table2(n, c, k, r)
    assert rows["Non-local"]["total"] == non_local
    assert rows["DANet"]["total"] == danet
    assert rows["LSCM"]["total"] == pytest.approx(lscm, rel=1e-15)
    if (k * k * c * (n + c)) % r == 0:
        assert isinstance(rows["LSCM"]["total"], int)


@given(st.integers(1, 3000), st.integers(1, 256), st.integers(1, 6), st.integers(1, 12),
       st.sampled_from(["n", "c", "k", "r"]))
def test_complexity_monotonicity(n, c, k, r, arg):
    base = dict(n=n, c=c, k=k, r=r)
    bumped = dict(base, **{arg: base[arg] + 1})
    a, b = _by_method(complexity_table2(**base)), _by_method(complexity_table2(**bumped))
    for method in ("Non-local", "DANet"):
        # neither depends on k or r
        if arg in ("n", "c"):
            assert b[method]["total"] > a[method]["total"]
        else:
            assert b[method]["total"] == a[method]["total"]
    if arg in ("n", "c"):
        assert b["LSCM"]["total"] > a["LSCM"]["total"]


def test_loglog_slope_recovers_power():
    ns = [10, 100, 1000]
    assert loglog_slope(ns, [3 * x ** 2 for x in ns]) == pytest.approx(2.0)
    assert loglog_slope(ns, [7 * x for x in ns]) == pytest.approx(1.0)


def test_scaling_bench_small():
    report = scaling_bench(c=16, k=2, r=4, sides=(4, 8, 16))
    assert [r["n"] for r in report.bench] == [16, 64, 256]
    assert report.slopes["dense"] == pytest.approx(2.0, abs=0.1)
    assert 0.9 <= report.slopes["lscm_spatial"] <= 1.1
    for row in report.bench:
        assert row["dense_macs"] == 2 * row["n"] ** 2 * 16
    # doubling the side quadruples n and the n-linear part of the count
    a, b = report.bench[0], report.bench[1]
    fixed = a["lscm_macs"] - (b["lscm_macs"] - a["lscm_macs"]) / 3
    assert (b["lscm_macs"] - fixed) == 4 * (a["lscm_macs"] - fixed)
    with pytest.raises(ValueError, match="at least 3"):
        scaling_bench(sides=(4, 8))


def test_bench_csv_header_and_rows():
    report = scaling_bench(c=8, k=1, r=2, sides=(2, 4, 8))
    lines = bench_csv(report).strip().splitlines()
    assert lines[0].startswith("n,side,lscm_macs")
    assert len(lines) == 4


def test_empty_report_json():
    data = json.loads(emit_report(AnalysisReport()))
    assert data == {"layers": [], "totals": {"params": 0, "macs": 0}, "complexity": [], "bench": [], "slopes": {}}


def test_json_roundtrip():
    graph = build_dpnet(num_classes=3, input_size=128, cfg=BlockConfig(k=3))
    report = count_params_macs(graph)
    report.complexity = complexity_table2(256, 128, 3, 8)
    back = AnalysisReport.from_dict(json.loads(emit_report(report, "json")))
    assert back == report


def test_markdown_one_row_table():
    node = Node("p", "pred", ("image",), ("out",), {"c_in": 4, "c_out": 4}, "1", "LRP")
    report = count_params_macs(NetworkGraph(nodes=[node], num_classes=1, input_size=8, block=BlockConfig()))
    md = emit_report(report, "markdown")
    table = [line for line in md.splitlines() if line.startswith("|")]
    assert len(table) == 3
    assert table[0].startswith("| Layer") and set(table[1]) <= set("|-")
    assert "8x8x4" in table[2] and "20" in table[2]
    with pytest.raises(ValueError):
        emit_report(report, "yaml")
