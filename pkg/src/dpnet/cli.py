"""``dpnet`` command line. Exit codes: 0 success, 1 validation or format error, 2 numeric or internal error."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TextIO

import numpy as np

from dpnet import analyzer, gradsuites, training
from dpnet.config import FIELDS, RunConfig, config_load
from dpnet.network import HRP_WIDTH, NumericError, decode, forward_full, nms, shape_trace
from dpnet.tensor import Tensor
from dpnet.weights import WeightStore, load_weights, save_weights

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

# train-toy runs on small synthetic scenes; k=3 fits its 4x4 stride-32 maps
TOY_BASE = {"num_classes": len(training.COLORS), "input_size": 128, "k": 3}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--input-size", type=int)
    p.add_argument("--k", type=int, help="attention pooling size")
    p.add_argument("--r", type=int, help="attention reduction ratio")
    p.add_argument("--neck-width", type=int)
    p.add_argument("--head-width", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", help="write the result here instead of stdout")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="dpnet", description="Dual-path detector: analysis, verification and toy training.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("analyze", parents=[common], help="per-layer params/MACs and complexity table")
    p.add_argument("--format", choices=["json", "markdown"], default="json")
    sub.add_parser("trace", parents=[common], help="backbone shape trace as JSON")
    p = sub.add_parser("forward", parents=[common], help="run an input tensor file, emit detections as JSON")
    p.add_argument("--weights", default=argparse.SUPPRESS)
    p.add_argument("--input", default=argparse.SUPPRESS, help="weight-format file with one entry named 'input'")
    p.add_argument("--score-threshold", type=float, default=argparse.SUPPRESS)
    p.add_argument("--iou-threshold", type=float, default=argparse.SUPPRESS)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference suites")
    p.add_argument("--suite", choices=["ops", "blocks", "network", "all"], default="all")
    p = sub.add_parser("bench", parents=[common], help="LSCM vs dense attention scaling bench as CSV")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--sides", default="10,20,40,80", help="comma-separated map sides; n = side**2")
    p = sub.add_parser("train-toy", parents=[common], help="overfit synthetic scenes, emit loss CSV")
    p.add_argument("--steps", type=int, default=argparse.SUPPRESS)
    p.add_argument("--scenes", type=int, default=4)
    p = sub.add_parser("init", parents=[common], help="seeded random weights to a file")
    p.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    return parser


def _emit(text: str, args: argparse.Namespace, out: TextIO) -> None:
    path = getattr(args, "output", None)
    if path:
        Path(path).write_text(text if text.endswith("\n") else text + "\n")
    else:
        out.write(text if text.endswith("\n") else text + "\n")


def _json_rows(rows: List[Dict]) -> str:
    """A JSON array with one object per line."""
    return "[\n" + ",\n".join(" " + json.dumps(r) for r in rows) + "\n]" if rows else "[]"


def _config(args: argparse.Namespace, base: Optional[Dict] = None) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k in FIELDS}
    return config_load(getattr(args, "config", None), overrides, base)


def cmd_analyze(args, out, err) -> int:
    cfg = _config(args)
    graph = cfg.graph()
    report = analyzer.count_params_macs(graph)
    report.complexity = [dict(row, n=n, c=c, k=cfg.k, r=cfg.r)
                         for n, c in ((cfg.input_size ** 2 // 64, HRP_WIDTH),)
                         for row in analyzer.complexity_table2(n, c, cfg.k, cfg.r)]
    _emit(analyzer.emit_report(report, args.format), args, out)
    return EXIT_OK


def cmd_trace(args, out, err) -> int:
    _emit(_json_rows(shape_trace(_config(args).graph())), args, out)
    return EXIT_OK


def _check_store(store: WeightStore, graph) -> None:
    missing = [s.name for s in graph.slots() if s.name not in store]
    if missing:
        raise KeyError(f"weights file lacks {len(missing)} entries, first {missing[0]!r}")
    for s in graph.slots():
        if store[s.name].shape != s.shape:
            raise ValueError(f"weight {s.name!r} has shape {store[s.name].shape}, graph expects {s.shape}")


def cmd_forward(args, out, err) -> int:
    cfg = _config(args)
    if not cfg.weights or not cfg.input:
        raise ValueError("forward needs --weights and --input")
    graph = cfg.graph()
    store = load_weights(cfg.weights)
    _check_store(store, graph)
    image = load_weights(cfg.input).require("input")
    dtype = store[graph.slots()[0].name].dtype
    if image.ndim == 4 and image.shape[0] == 1:
        image = Tensor(image.data[0])
    heads = forward_full(graph, store, Tensor(image.data.astype(dtype)))
    dets = nms(decode(heads, graph.num_classes, score_threshold=cfg.score_threshold), cfg.iou_threshold)
    _emit(_json_rows([d.to_dict() for d in dets]), args, out)
    return EXIT_OK


def cmd_gradcheck(args, out, err) -> int:
    seed = _config(args).seed
    names = list(gradsuites.SUITES) if args.suite == "all" else [args.suite]
    lines, ok = ["suite,group,max_rel_error,tolerance,checked,status"], True
    for name in names:
        report = gradsuites.SUITES[name](seed=seed)
        ok &= report.passed
        for group, e in report.max_rel_error.items():
            status = "PASS" if e < report.tolerance else "FAIL"
            lines.append(f"{name},{group},{e:.3e},{report.tolerance:g},{report.checked[group]},{status}")
    _emit("\n".join(lines), args, out)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_bench(args, out, err) -> int:
    cfg = _config(args)
    try:
        sides = [int(s) for s in args.sides.split(",") if s.strip()]
    except ValueError:
        raise ValueError(f"--sides must be comma-separated integers, got {args.sides!r}") from None
    report = analyzer.scaling_bench(c=args.channels, k=cfg.k, r=cfg.r, sides=sides, seed=cfg.seed)
    _emit(analyzer.bench_csv(report), args, out)
    err.write("".join(f"slope {k}: {v:.4f}\n" for k, v in report.slopes.items()))
    return EXIT_OK


def cmd_train_toy(args, out, err) -> int:
    cfg = _config(args, TOY_BASE)
    if cfg.num_classes != len(training.COLORS):
        raise ValueError(f"train-toy scenes have {len(training.COLORS)} classes, got num_classes={cfg.num_classes}")
    graph = cfg.graph()
    scenes = training.make_scenes(args.scenes, cfg.input_size, seed=cfg.seed)
    trace = training.toy_overfit(graph, scenes, cfg.steps, seed=cfg.seed, optim=cfg.optim(max(cfg.steps, 1)),
                                 loss_cfg=cfg.loss)
    _emit(training.trace_csv(trace), args, out)
    return EXIT_OK


def cmd_init(args, out, err) -> int:
    cfg = _config(args)
    path = getattr(args, "output", None) or cfg.weights
    if not path:
        raise ValueError("init needs --output (or weights=... in the config)")
    store = cfg.graph().init_weights(seed=cfg.seed, dtype=np.float32 if args.dtype == "f32" else np.float64)
    save_weights(store, path)
    err.write(f"wrote {len(store)} tensors to {path}\n")
    return EXIT_OK


COMMANDS: Dict[str, Callable] = {
    "analyze": cmd_analyze, "trace": cmd_trace, "forward": cmd_forward, "gradcheck": cmd_gradcheck,
    "bench": cmd_bench, "train-toy": cmd_train_toy, "init": cmd_init,
}


def main(argv: Optional[Sequence[str]] = None, out: TextIO = None, err: TextIO = None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
    except UsageError as exc:
        err.write(f"{exc}\n")
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, out, err)
    except (NumericError, ArithmeticError) as exc:
        err.write(f"dpnet {args.command}: numeric error: {exc}\n")
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        err.write(f"dpnet {args.command}: {msg}\n")
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        err.write(f"dpnet {args.command}: internal error: {type(exc).__name__}: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
