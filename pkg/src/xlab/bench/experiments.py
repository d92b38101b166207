"""Experiment drivers: victims, white-noise grid, exclusion study, benchmark, optimizer and OOD transfer."""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import models
from ..engine import METHODS, EvalSet, ExtractionConfig, post_train, run_extraction
from ..forge import DataPool
from ..models import TrainedModel, TrainingRecipe
from ..oracle import Oracle
from .data import DatasetSplit, load_dataset, limited_pool
from .filters import ExclusionFilter, apply_filter
from .metrics import excluded_class_metrics

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXPERIMENTS = ("table2", "table3", "table4", "optimizer", "mnist-transfer")
TABLE3_CLASSES = ((9,), (1, 9), (0, 1, 9), (0, 1, 2, 3, 4, 5, 7, 9))


@dataclass
class BenchConfig:
    data_root: str | None = None  # holds FashionMNIST (and MNIST) IDX files
    out_dir: str = "runs"
    seeds: tuple[int, ...] = (0, 1, 2)
    victim_seed: int = 0
    victim_arch: str = "lenet"
    victim_recipe: dict = field(default_factory=dict)
    workers: int = 1
    # white-noise grid
    table2_archs: tuple[str, ...] = ("mlp", "lenet", "alexnet-mini")
    table2_queries: int = 60_000
    table2_epochs: int = 30
    # query-once transfer protocol (exclusion study, MNIST transfer)
    transfer_attacker: str = "lenet"
    transfer_epochs: int = 30
    transfer_eval_every: int = 1
    table3_classes: tuple[tuple[int, ...], ...] = TABLE3_CLASSES
    # benchmark and optimizer study
    table4_methods: tuple[str, ...] = ("algorithm1", "variant", "baseline1", "baseline2")
    table4_regimes: tuple[str, ...] = ("data-free", "limited-data")
    pool_size: int = 20
    extraction: dict = field(default_factory=dict)  # ExtractionConfig overrides
    optimizer_methods: tuple[str, ...] = ("sgd", "adam")
    adam_lr: float = 1e-3
    attacker_lr: float = 0.01
    batch_size: int = 64

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.table2_archs = tuple(self.table2_archs)
        self.table3_classes = tuple(tuple(int(k) for k in ks) for ks in self.table3_classes)
        self.table4_methods = tuple(self.table4_methods)
        self.table4_regimes = tuple(self.table4_regimes)
        self.optimizer_methods = tuple(self.optimizer_methods)
        unknown = set(self.table4_methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @classmethod
    def from_dict(cls, data: dict) -> "BenchConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "BenchConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def recipe(self) -> TrainingRecipe:
        return TrainingRecipe(**self.victim_recipe)


@dataclass
class Check:
    criterion: str
    description: str
    value: object
    passed: bool
    timing: bool = False  # wall-clock based; reported under "timing"


@dataclass
class Report:
    experiment: str
    config: dict
    rows: list[dict]
    summary: dict
    checks: list[Check] = field(default_factory=list)
    assumptions: list[str] = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "experiment": self.experiment, "config": self.config,
                "assumptions": self.assumptions, "summary": self.summary, "rows": self.rows,
                "checks": [_check_json(c) for c in self.checks if not c.timing],
                "timing": {"wall_clock_s": self.wall_clock,
                           "checks": [_check_json(c) for c in self.checks if c.timing]}}


def _check_json(check: Check) -> dict:
    data = asdict(check)
    data.pop("timing")
    return data


def write_report(out_dir, report: Report) -> tuple[Path, Path]:
    """``<experiment>.json`` plus ``<experiment>.csv``; only the timing block varies between seeded reruns."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out / f"{report.experiment}.json", out / f"{report.experiment}.csv"
    json_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True, default=_jsonable) + "\n")
    columns = list(dict.fromkeys(k for row in report.rows for k in row))
    with open(csv_path, "w", newline="") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(report.rows)
    return json_path, csv_path


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def load_reports(directory) -> list[dict]:
    reports = []
    for path in sorted(Path(directory).glob("*.json")):
        data = json.loads(path.read_text())
        if isinstance(data, dict) and "schema_version" in data and "checks" in data:
            reports.append(data)
    return reports


def all_checks(report: dict) -> list[dict]:
    return report["checks"] + report.get("timing", {}).get("checks", [])


def format_report(report: dict) -> str:
    lines = [f"== {report['experiment']} (schema v{report['schema_version']}, "
             f"{report.get('timing', {}).get('wall_clock_s', 0):.0f}s)"]
    for key, value in sorted(report["summary"].items()):
        lines.append(f"  {key}: {_fmt(value)}")
    for a in report.get("assumptions", []):
        lines.append(f"  assumption: {a}")
    for c in all_checks(report):
        lines.append(f"  [{'PASS' if c['passed'] else 'FAIL'}] criterion {c['criterion']}: "
                     f"{c['description']} (value {_fmt(c['value'])})")
    return "\n".join(lines)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    if isinstance(value, dict):
        return "{" + ", ".join(f"{k}: {_fmt(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    return str(value)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- data and victims -------------------------------------------------------------

def fashion(config: BenchConfig) -> tuple[DatasetSplit, DatasetSplit]:
    if not config.data_root:
        raise FileNotFoundError("data_root is not set; point it at a directory holding the FashionMNIST IDX files")
    return load_dataset(config.data_root, "fashionmnist")


def victim_path(config: BenchConfig, arch: str) -> Path:
    return Path(config.out_dir) / "victims" / f"{arch}-seed{config.victim_seed}.xlab"


def train_victim(config: BenchConfig, arch: str, train: DatasetSplit, test: DatasetSplit) -> tuple[TrainedModel, float]:
    """Train and checkpoint a victim; returns it with the training wall clock in seconds."""
    start = time.time()
    model = models.build(arch, seed=config.victim_seed)
    trained = models.train_supervised(model, train.images, train.labels, test.images, test.labels,
                                      config.recipe(), seed=config.victim_seed)
    elapsed = time.time() - start
    path = victim_path(config, arch)
    path.parent.mkdir(parents=True, exist_ok=True)
    trained.save(path)
    models.write_training_log(path.with_suffix(".csv"), trained.log)
    return trained, elapsed


def get_victim(config: BenchConfig, arch: str, train: DatasetSplit, test: DatasetSplit) -> TrainedModel:
    path = victim_path(config, arch)
    if path.exists():
        return TrainedModel.load(path)
    log.info("training %s victim", arch)
    return train_victim(config, arch, train, test)[0]


def run_train_victims(config: BenchConfig, archs=("mlp", "lenet")) -> Report:
    start = time.time()
    train, test = fashion(config)
    rows, checks = [], []
    floors = {"mlp": 0.86, "lenet": 0.885}
    for arch in archs:
        trained, elapsed = train_victim(config, arch, train, test)
        rows.append({"arch": arch, "test_accuracy": trained.test_accuracy, "train_seconds": round(elapsed, 1)})
        if arch in floors:
            checks.append(Check("2", f"{arch} victim test accuracy >= {floors[arch]}", trained.test_accuracy,
                                trained.test_accuracy >= floors[arch]))
            checks.append(Check("2", f"{arch} victim training <= 30 min", elapsed, elapsed <= 1800, timing=True))
    summary = {r["arch"]: r["test_accuracy"] for r in rows}
    return Report("train-victim", config.to_dict(), rows, summary, checks,
                  [f"victim recipe: {asdict(config.recipe())}"], time.time() - start)


# -- query-once transfer protocol ---------------------------------------------------

def query_all(victim, images: np.ndarray, chunk: int = 1000) -> np.ndarray:
    """Send every image to a fresh oracle exactly once."""
    oracle = Oracle(victim, budget=len(images))
    out = [oracle.query(images[i:i + chunk]) for i in range(0, len(images), chunk)]
    assert oracle.remaining == 0
    return np.concatenate(out) if out else np.zeros((0, 10), dtype=np.float32)


def transfer_extract(victim, queries: np.ndarray, attacker_arch: str, epochs: int, test: DatasetSplit,
                     seed: int, *, optimizer: str = "sgd", lr: float = 0.01, batch_size: int = 64,
                     eval_every: int = 1):
    """Label each query once with the victim, then train a fresh attacker on the soft labels.

    Returns (attacker holding its best-accuracy weights, best top-1).
    """
    labels = query_all(victim, queries)
    attacker = models.build(attacker_arch, seed=seed)
    best, _ = post_train(attacker, queries, labels, epochs, optimizer=optimizer, lr=lr, batch_size=batch_size,
                         eval_set=EvalSet(test.images, test.labels), eval_every=eval_every, seed=seed)
    return attacker, best


def white_noise(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 8]).random((n, *models.INPUT_SHAPE), dtype=np.float32)


def run_table2(config: BenchConfig) -> Report:
    start = time.time()
    train, test = fashion(config)
    seed = config.seeds[0]
    queries = white_noise(config.table2_queries, seed)
    rows = []
    for v_arch in config.table2_archs:
        victim = get_victim(config, v_arch, train, test)
        for a_arch in config.table2_archs:
            _, best = transfer_extract(victim.model, queries, a_arch, config.table2_epochs, test, seed,
                                       lr=config.attacker_lr, batch_size=config.batch_size,
                                       eval_every=config.transfer_eval_every)
            rows.append({"victim": v_arch, "attacker": a_arch, "victim_accuracy": victim.test_accuracy,
                         "best_top1": best})
            log.info("table2 %s -> %s: %.4f", v_arch, a_arch, best)
    grid = {f"{r['victim']}->{r['attacker']}": r["best_top1"] for r in rows}
    return Report("table2", config.to_dict(), rows, grid, table2_checks(rows),
                  [f"query budget per cell: {config.table2_queries} uniform-noise images, each queried once",
                   f"attacker trained {config.table2_epochs} epochs on the labeled noise"], time.time() - start)


def table2_checks(rows: list[dict]) -> list[Check]:
    cell = {(r["victim"], r["attacker"]): r["best_top1"] for r in rows}
    checks = []
    if ("mlp", "mlp") in cell:
        v = cell["mlp", "mlp"]
        checks.append(Check("3", "MLP->MLP best top-1 in [0.30, 0.50]", v, 0.30 <= v <= 0.50))
    if ("lenet", "lenet") in cell:
        v = cell["lenet", "lenet"]
        checks.append(Check("3", "LeNet->LeNet best top-1 in [0.50, 0.72]", v, 0.50 <= v <= 0.72))
    victims = sorted({v for v, _ in cell})
    row_mean = {v: float(np.mean([a for (vv, _), a in cell.items() if vv == v])) for v in victims}
    for v in victims:
        worst = min(a for (vv, _), a in cell.items() if vv == v)
        ok = worst >= 0.20
        desc = f"{v} victim row: every cell >= 0.20"
        if v == "alexnet-mini" and not ok:
            others = [row_mean[o] for o in victims if o != v]
            ok = bool(others) and row_mean[v] < min(others)
            desc += " (or the row degrades below the other victims)"
        checks.append(Check("3", desc, worst, ok))
    return checks


def run_table3(config: BenchConfig) -> Report:
    start = time.time()
    train, test = fashion(config)
    victim = get_victim(config, config.victim_arch, train, test).model
    seed = config.seeds[0]
    rows = []
    for classes in config.table3_classes:
        for mode in ("by-label", "by-confidence"):
            filt = ExclusionFilter(classes, mode)
            pool = apply_filter(train, filt, victim)
            attacker, best = transfer_extract(victim, pool.images, config.transfer_attacker,
                                              config.transfer_epochs, test, seed, lr=config.attacker_lr,
                                              batch_size=config.batch_size, eval_every=config.transfer_eval_every)
            m = excluded_class_metrics(attacker, test.images, test.labels, classes)
            rows.append({"pool": filt.name, "excluded": " ".join(map(str, filt.classes)), "pool_size": len(pool),
                         "recall": m.recall, "precision": m.precision, "best_top1": best})
            log.info("table3 %s: R_EC %s P_EC %s", filt.name, m.recall, m.precision)
    summary = {r["pool"]: {"recall": r["recall"], "precision": r["precision"]} for r in rows}
    return Report("table3", config.to_dict(), rows, summary, table3_checks(rows),
                  [f"attacker architecture: {config.transfer_attacker}",
                   "every pool image is queried once; no augmentation",
                   f"attacker trained {config.transfer_epochs} epochs, weights at best test top-1 kept"],
                  time.time() - start)


def table3_checks(rows: list[dict]) -> list[Check]:
    by = {r["pool"]: r for r in rows}
    checks = []

    def metric(pool, key):
        r = by.get(pool)
        return None if r is None else r[key]

    r1, p1 = metric("FMNIST-1", "recall"), metric("FMNIST-1", "precision")
    if r1 is not None or p1 is not None:
        checks.append(Check("4", "FMNIST-1 R_EC >= 0.85", r1, r1 is not None and r1 >= 0.85))
        checks.append(Check("4", "FMNIST-1 P_EC >= 0.90", p1, p1 is not None and p1 >= 0.90))
    r3 = metric("FMNIST-3", "recall")
    if "FMNIST-3" in by:
        checks.append(Check("4", "FMNIST-3 R_EC >= 0.80", r3, r3 is not None and r3 >= 0.80))
    pairs = [(p, p + "S") for p in ("FMNIST-1", "FMNIST-2", "FMNIST-3", "FMNIST-8") if p in by and p + "S" in by]
    for plain, strict in pairs:
        a, b = by[plain]["recall"], by[strict]["recall"]
        checks.append(Check("4", f"{strict} R_EC < {plain} R_EC", [b, a], None not in (a, b) and b < a))
    cells = [r for r in rows if r["recall"] is not None and r["precision"] is not None]
    n_ok = sum(r["precision"] >= r["recall"] for r in cells)
    need = max(1, round(0.75 * len(rows)))  # 6 of the 8 cells in the full table
    checks.append(Check("4", f"P_EC >= R_EC in >= {need} of {len(rows)} cells", n_ok, n_ok >= need))
    return checks


def run_mnist_transfer(config: BenchConfig) -> Report:
    start = time.time()
    train, test = fashion(config)
    mnist_train, _ = load_dataset(config.data_root, "mnist")
    victim = get_victim(config, config.victim_arch, train, test).model
    seed = config.seeds[0]
    _, best = transfer_extract(victim, mnist_train.images, config.transfer_attacker, config.transfer_epochs, test,
                               seed, lr=config.attacker_lr, batch_size=config.batch_size,
                               eval_every=config.transfer_eval_every)
    rows = [{"pool": "mnist-train", "queries": len(mnist_train), "best_top1": best}]
    checks = [Check("5", "MNIST-as-pool FashionMNIST top-1 >= 0.55", best, best >= 0.55)]
    return Report("mnist-transfer", config.to_dict(), rows, {"best_top1": best}, checks,
                  ["each MNIST training image is queried once; no augmentation"], time.time() - start)


# -- method benchmark ------------------------------------------------------------------

def _extraction_cell(args) -> dict:
    config, method, regime, seed, overrides = args
    train, test = fashion(config)
    victim = get_victim(config, config.victim_arch, train, test).model
    cfg = ExtractionConfig.for_method(method, **{**config.extraction, **overrides, "seed": seed})
    pool = DataPool(limited_pool(train, config.pool_size, seed)) if regime == "limited-data" else DataPool()
    start = time.time()
    result = run_extraction(cfg, Oracle(victim, cfg.budget), pool=pool, eval_set=EvalSet(test.images, test.labels))
    return {"method": method, "regime": regime, "seed": seed, "optimizer": cfg.attacker_optimizer,
            "best_top1": result.best_accuracy, "queries": result.queries, "seconds": round(time.time() - start, 1)}


def _aggregate(rows: list[dict], keys: tuple[str, ...]) -> dict:
    groups: dict[str, list[float]] = {}
    for r in rows:
        groups.setdefault("/".join(str(r[k]) for k in keys), []).append(r["best_top1"])
    return {k: {"mean": float(np.mean(v)), "std": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0, "n": len(v)}
            for k, v in groups.items()}


def run_table4(config: BenchConfig) -> Report:
    start = time.time()
    fashion(config)  # fail fast without data
    cells = [(config, m, r, s, {}) for r in config.table4_regimes for m in config.table4_methods
             for s in config.seeds]
    rows = _map(_extraction_cell, cells, config.workers)
    summary = _aggregate(rows, ("method", "regime"))
    cfg = ExtractionConfig.for_method("algorithm1", **config.extraction)
    return Report("table4", config.to_dict(), rows, summary, table4_checks(summary, cfg, time.time() - start),
                  [f"victim architecture: {config.victim_arch}", f"limited-data pool size: {config.pool_size}",
                   "std over seeds uses ddof=1"], time.time() - start)


def table4_checks(summary: dict, cfg: ExtractionConfig, elapsed: float) -> list[Check]:
    def mean(method, regime):
        s = summary.get(f"{method}/{regime}")
        return None if s is None else s["mean"]

    checks = []
    full = cfg.budget >= 10_000
    a1 = mean("algorithm1", "data-free")
    if a1 is not None and full:
        checks.append(Check("6", "algorithm1 data-free mean >= 0.45", a1, a1 >= 0.45))
        for b in ("baseline1", "baseline2"):
            m = mean(b, "data-free")
            if m is not None:
                checks.append(Check("6", f"algorithm1 data-free mean > {b}", [a1, m], a1 > m))
        b1 = mean("baseline1", "data-free")
        if b1 is not None:
            checks.append(Check("6", "baseline1 data-free <= algorithm1 - 0.08", [b1, a1], b1 <= a1 - 0.08))
        al = mean("algorithm1", "limited-data")
        if al is not None:
            checks.append(Check("6", "algorithm1 limited-data mean >= 0.65", al, al >= 0.65))
            for b in ("baseline1", "baseline2"):
                m = mean(b, "limited-data")
                if m is not None:
                    checks.append(Check("6", f"algorithm1 limited-data mean >= {b}", [al, m], al >= m))
    elif a1 is not None:
        b1 = mean("baseline1", "data-free")
        if b1 is not None:
            checks.append(Check("6", f"smoke (B={cfg.budget}): algorithm1 >= baseline1", [a1, b1], a1 >= b1))
            checks.append(Check("6", "smoke run under 45 min", elapsed, elapsed < 45 * 60, timing=True))
    return checks


def run_optimizer(config: BenchConfig) -> Report:
    start = time.time()
    fashion(config)
    cells = []
    for opt in config.optimizer_methods:
        lr = config.adam_lr if opt == "adam" else config.attacker_lr
        for s in config.seeds:
            cells.append((config, "algorithm1", "data-free", s, {"attacker_optimizer": opt, "attacker_lr": lr}))
    rows = _map(_extraction_cell, cells, config.workers)
    summary = _aggregate(rows, ("optimizer",))
    checks = []
    if "sgd" in summary and "adam" in summary:
        s, a = summary["sgd"]["mean"], summary["adam"]["mean"]
        checks.append(Check("7", "SGD attacker mean >= Adam attacker mean", [s, a], s >= a))
    return Report("optimizer", config.to_dict(), rows, summary, checks,
                  [f"Adam lr {config.adam_lr}, SGD lr {config.attacker_lr} momentum 0.9",
                   "extraction configuration: algorithm1, data-free"], time.time() - start)


RUNNERS = {"table2": run_table2, "table3": run_table3, "table4": run_table4, "optimizer": run_optimizer,
           "mnist-transfer": run_mnist_transfer}
