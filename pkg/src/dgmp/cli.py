"""Command line interface: ``dgmp pool | gradcheck | bench | train | eval``.

Exit codes: 0 success, 1 gradient check failure, 2 input/config error,
3 solver failure, 4 degenerate data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import bench, grad, io, pooling, retrieval
from .errors import (
    ConfigError,
    DegenerateBatch,
    DGMPError,
    FileFormatError,
    InvalidInput,
    NoRelevant,
    NotEnoughClasses,
    NotPositiveDefinite,
    UnknownOp,
    ZeroVector,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_DEGENERATE = 4

log = logging.getLogger("dgmp")


def _emit(text, path):
    if path is None:
        sys.stdout.write(text)
    else:
        io.atomic_write(path, text)


def _input_files(path):
    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.is_file() and not p.name.startswith("."))
    if not path.exists():
        raise FileFormatError(path, 0, "no such file or directory")
    return [path]


def cmd_pool(args):
    cfg = pooling.PoolingConfig(
        method=args.method,
        lam=args.lam,
        mix_weight=args.mix_weight,
        lse_r=args.lse_r,
        normalize_output=not args.no_normalize,
        gmp_strategy=args.strategy,
    )
    lines = []
    for path in _input_files(args.input):
        ds = io.read_descriptor_file(path)
        xi = pooling.pool(ds, cfg).xi
        lines.append(",".join([ds.source_id] + [io.format_float(v) for v in xi]))
    _emit("\n".join(lines) + "\n", args.output)
    return EXIT_OK


def cmd_gradcheck(args):
    ops = list(grad.OPS) if args.ops == "all" else [o.strip() for o in args.ops.split(",") if o.strip()]
    unknown = [o for o in ops if o not in grad.OPS]
    if unknown:
        raise UnknownOp(f"unknown op(s) {', '.join(unknown)}; known ops: {', '.join(grad.OPS)}")
    reports = [grad.grad_check(op, trials=args.trials, tolerance=args.tol, seed=args.seed) for op in ops]
    if args.json:
        print(json.dumps([r.to_dict() for r in reports], indent=2))
    else:
        print(f"{'op':<10}{'block':<14}{'max rel err':>14}  {'skipped':>7}  result")
        for r in reports:
            for block, err in sorted(r.errors.items()):
                print(f"{r.op:<10}{block:<14}{err:>14.3e}  {r.skipped:>7}  {'pass' if err <= r.tolerance else 'FAIL'}")
            if not r.errors:
                print(f"{r.op:<10}{'-':<14}{'-':>14}  {r.skipped:>7}  no differentiable trials")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK_FAILED


BENCH_KEYS = ("generator", "poolings", "names", "metric")


def parse_bench_config(data):
    io.check_keys(data, BENCH_KEYS, "bench config")
    gen = io.from_dict(bench.BurstyGenConfig, data.get("generator", {}), "generator")
    raw = data.get("poolings", [{"method": "avg"}, {"method": "max"}, {"method": "gmp"}])
    if not isinstance(raw, list) or not raw:
        raise ConfigError("poolings: expected a non-empty list")
    cfgs = [io.from_dict(pooling.PoolingConfig, p, f"poolings[{i}]") for i, p in enumerate(raw)]
    names = data.get("names")
    if names is not None and len(names) != len(cfgs):
        raise ConfigError("names: must have one entry per pooling config")
    metric = data.get("metric", "euclidean")
    if metric not in retrieval.DISTANCES:
        raise ConfigError(f"metric: unknown distance {metric!r}")
    return gen, cfgs, names, metric


def _sidecar(out, payload):
    payload = dict(payload, timestamp=datetime.now(timezone.utc).isoformat())
    io.atomic_write(Path(str(out) + ".meta.json"), json.dumps(payload, indent=2) + "\n")


def cmd_bench(args):
    gen, cfgs, names, metric = parse_bench_config(io.load_json(args.config))
    rows = bench.run_benchmark(gen, cfgs, metric=metric, names=names)
    _emit(bench.rows_to_csv(rows), args.out)
    if args.json:
        io.atomic_write(args.json, json.dumps(bench.rows_to_records(rows), indent=2) + "\n")
    if args.out is not None:
        _sidecar(args.out, {"config": str(args.config), "wall_time": {r.name: r.wall_time for r in rows}})
    return EXIT_OK


TRAIN_KEYS = ("generator", "pooling", "train")


def parse_train_config(data):
    io.check_keys(data, TRAIN_KEYS, "train config")
    gen = io.from_dict(bench.BurstyGenConfig, data.get("generator", {}), "generator")
    pool_cfg = io.from_dict(pooling.PoolingConfig, data.get("pooling", {}), "pooling")
    cfg = io.from_dict(bench.TrainConfig, data.get("train", {}), "train")
    return gen, pool_cfg, cfg


def cmd_train(args):
    gen, pool_cfg, cfg = parse_train_config(io.load_json(args.config))
    data = bench.gen_bursty(gen)
    t0 = time.perf_counter()
    result = bench.train(bench.default_model(data, pool_cfg, cfg), data, cfg)
    text = "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in result.log)
    _emit(text, args.log)
    if args.model:
        model = {"W": result.model.W.tolist(), "pooling": io.to_dict(result.model.pooling),
                 "best_epoch": result.best_epoch}
        io.atomic_write(args.model, json.dumps(model, indent=2) + "\n")
    if args.log is not None:
        _sidecar(args.log, {"config": str(args.config), "wall_time": time.perf_counter() - t0})
    return EXIT_OK


def cmd_eval(args):
    ids, emb = io.read_embeddings_csv(args.embeddings)
    labels = io.read_labels_csv(args.labels)
    missing = [i for i in ids if i not in labels]
    if missing:
        raise FileFormatError(args.labels, 0, f"no label for id(s) {', '.join(missing[:5])}")
    emb = np.vstack([pooling.l2_normalize(e) for e in emb])
    gallery = retrieval.EmbeddingGallery(emb, [labels[i] for i in ids], ids)
    report = retrieval.evaluate(gallery, leave_one_out=not args.no_leave_one_out, metric=args.metric)
    print(f"mAP {report.mAP:.6f}  top1 {report.top1:.6f}  queries {int(np.sum(~np.isnan(report.ap)))}")
    if args.json:
        io.atomic_write(args.json, report.to_json() + "\n")
    if args.csv:
        io.atomic_write(args.csv, report.to_csv())
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="dgmp", description="Generalized max pooling toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pool", help="pool descriptor files into global descriptors")
    p.add_argument("--input", required=True, help="dgmp-csv file or directory of them")
    p.add_argument("--method", choices=["avg", "max", "mixed", "lse", "gmp"], default="gmp")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--mix-weight", type=float, default=0.5)
    p.add_argument("--lse-r", type=float, default=1.0)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--strategy", choices=["auto", "primal", "dual"], default="auto")
    p.add_argument("--output", help="CSV output (default: stdout)")
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--ops", default="all", help="'all' or a comma-separated list")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="print reports as JSON")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="compare pooling methods on synthetic bursty data")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="CSV output (default: stdout)")
    p.add_argument("--json", help="also write the table as JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="train a linear embedding with learnable pooling")
    p.add_argument("--config", required=True)
    p.add_argument("--log", help="JSON-lines training log (default: stdout)")
    p.add_argument("--model", help="write the best model as JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval evaluation of precomputed embeddings")
    p.add_argument("--embeddings", required=True, help="CSV rows: id,v1,...,vD")
    p.add_argument("--labels", required=True, help="CSV rows: id,label")
    p.add_argument("--metric", choices=list(retrieval.DISTANCES), default="euclidean")
    p.add_argument("--no-leave-one-out", action="store_true")
    p.add_argument("--json")
    p.add_argument("--csv", help="per-query AP table")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NotPositiveDefinite as exc:
        print(f"dgmp: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (DegenerateBatch, NotEnoughClasses, NoRelevant, ZeroVector) as exc:
        print(f"dgmp: degenerate data: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (FileFormatError, ConfigError, InvalidInput, UnknownOp, DGMPError) as exc:
        msg = exc.args[0] if isinstance(exc, UnknownOp) else exc
        print(f"dgmp: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
