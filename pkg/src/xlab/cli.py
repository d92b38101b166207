"""Command-line entry point: ``xlab <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import models
from .engine import EvalSet, ExtractionConfig, run_extraction
from .forge import DataPool
from .oracle import Oracle, OracleServer, RemoteOracle, parse_address

RUN_KEYS = ("victim", "data_root", "pool_size")


def _bench_config(args):
    from .bench.experiments import BenchConfig

    data = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.data_root:
        data["data_root"] = args.data_root
    if args.out:
        data["out_dir"] = args.out
    if getattr(args, "seeds", None):
        data["seeds"] = args.seeds
    if getattr(args, "workers", None):
        data["workers"] = args.workers
    return BenchConfig.from_dict(data)


def _finish(report, out_dir, check: bool) -> int:
    from .bench.experiments import format_report, write_report

    json_path, csv_path = write_report(out_dir, report)
    print(format_report(report.to_json()))
    print(f"wrote {json_path} and {csv_path}")
    return 1 if check and not report.passed else 0


def cmd_train_victim(args) -> int:
    from .bench.experiments import run_train_victims

    config = _bench_config(args)
    if args.epochs is not None:
        config.victim_recipe = {**config.victim_recipe, "epochs": args.epochs}
    return _finish(run_train_victims(config, tuple(args.arch)), config.out_dir, args.check)


def cmd_experiment(args) -> int:
    from .bench.experiments import RUNNERS

    config = _bench_config(args)
    return _finish(RUNNERS[args.name](config), config.out_dir, args.check)


def cmd_report(args) -> int:
    from .bench.experiments import all_checks, format_report, load_reports

    reports = load_reports(args.dir)
    if not reports:
        print(f"no reports found in {args.dir}", file=sys.stderr)
        return 2
    for r in reports:
        print(format_report(r))
    failed = any(not c["passed"] for r in reports for c in all_checks(r))
    return 1 if args.check and failed else 0


def cmd_extract(args) -> int:
    data = json.loads(Path(args.config).read_text())
    run = {k: data.pop(k) for k in RUN_KEYS if k in data}
    config = ExtractionConfig.from_dict(data)
    pool, eval_set = DataPool(), None
    if run.get("data_root"):
        from .bench.data import limited_pool, load_dataset

        train, test = load_dataset(run["data_root"], "fashionmnist")
        eval_set = EvalSet(test.images, test.labels)
        if run.get("pool_size"):
            pool = DataPool(limited_pool(train, run["pool_size"], config.seed))
    if args.oracle == "local":
        if not run.get("victim"):
            print("a local oracle needs 'victim' (checkpoint path) in the config", file=sys.stderr)
            return 2
        oracle = Oracle(models.TrainedModel.load(run["victim"]).model, config.budget)
    else:
        oracle = RemoteOracle(parse_address(args.oracle))
    result = run_extraction(config, oracle, pool=pool, eval_set=eval_set)
    result.save(args.out)
    if args.dump_transfer_set:
        from .bench.data import write_idx

        images, labels = result.transfer.all()
        base = Path(args.dump_transfer_set)
        write_idx(base.with_name(base.name + "-images.idx"), np.ascontiguousarray(images, dtype=np.float32))
        write_idx(base.with_name(base.name + "-labels.idx"), np.ascontiguousarray(labels, dtype=np.float32))
    print(json.dumps({"best_accuracy": result.best_accuracy, "queries": result.queries,
                      "wall_clock": round(result.wall_clock, 2)}))
    return 0


def cmd_serve_oracle(args) -> int:
    victim = models.TrainedModel.load(args.checkpoint).model
    host, port = parse_address(args.listen)
    server = OracleServer(Oracle(victim, args.budget), host, port)
    print(f"serving on {server.address[0]}:{server.address[1]} with budget {args.budget}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    from .bench.experiments import EXPERIMENTS

    parser = argparse.ArgumentParser(prog="xlab", description="Black-box model extraction toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def bench_args(p):
        p.add_argument("--config", help="JSON bench config")
        p.add_argument("--data-root", help="directory holding FashionMNIST/MNIST IDX files")
        p.add_argument("--out", help="output directory")
        p.add_argument("--check", action="store_true", help="exit nonzero when an acceptance check fails")

    p = sub.add_parser("train-victim", help="train victim models")
    bench_args(p)
    p.add_argument("--arch", nargs="+", default=["mlp", "lenet"], choices=sorted(models.NOMINAL_PARAMS))
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("extract", help="run one extraction")
    p.add_argument("--config", required=True, help="JSON extraction config")
    p.add_argument("--oracle", default="local", help="'local' or host:port of a served oracle")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-transfer-set", metavar="PREFIX", help="write queries and soft labels as IDX files")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("serve-oracle", help="serve a victim checkpoint over TCP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--listen", default="127.0.0.1:7070")
    p.set_defaults(func=cmd_serve_oracle)

    p = sub.add_parser("experiment", help="run a benchmark experiment")
    p.add_argument("name", choices=EXPERIMENTS)
    bench_args(p)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="summarise report files in a directory")
    p.add_argument("dir")
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
