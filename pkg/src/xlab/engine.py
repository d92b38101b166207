"""The extraction loop: controller -> generator -> oracle -> attacker training -> evaluator -> reward."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import models
from .agent import AgentConfig, DDPGController, RandomController
from .evaluator import (RewardWeights, TransferSet, WindowStats, assemble_observation, combine,
                        observation_size, reward_terms, window_stats)
from .forge import EPS_MAX, DataPool, ForgeRequest, draw_base, ifgsm, uniform_perturb
from .nn import Sequential, make_optimizer
from .nn import checkpoint
from .nn.functional import softmax_np
from .oracle import BudgetExhausted

log = logging.getLogger(__name__)

# (controller, generator, reward mode) for each benchmarked method
METHODS = {
    "algorithm1": ("ddpg", "ifgsm", "discrete"),
    "variant": ("ddpg", "ifgsm", "continuous"),
    "baseline1": ("random", "uniform-noise", "discrete"),
    "baseline2": ("random", "ifgsm", "discrete"),
}


class ExtractionError(RuntimeError):
    pass


@dataclass
class ExtractionConfig:
    budget: int = 10_000
    scope: int = 640
    fgsm_iterations: int = 10
    reward_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    reward_mode: str = "discrete"
    controller: str = "ddpg"
    generator: str = "ifgsm"
    attacker: str = "lenet"
    attacker_optimizer: str = "sgd"
    attacker_lr: float = 0.01
    attacker_momentum: float = 0.9
    batch_size: int = 64
    train_every: int = 1
    eval_every: int = 250
    post_train_epochs: int = 1000
    post_eval_every: int = 5
    per_class_loss: bool = False
    eps_max: float = EPS_MAX
    agent: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.reward_weights = tuple(float(w) for w in self.reward_weights)
        if min(self.budget, self.scope, self.fgsm_iterations, self.batch_size, self.train_every) < 1:
            raise ValueError("budget, scope, iterations, batch size and train_every must be positive")
        if self.scope > self.budget:
            raise ValueError(f"evaluation scope {self.scope} exceeds budget {self.budget}")
        if self.reward_mode not in ("discrete", "continuous"):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")
        if self.controller not in ("ddpg", "random"):
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.generator not in ("ifgsm", "uniform-noise"):
            raise ValueError(f"unknown generator {self.generator!r}")
        if len(self.reward_weights) != 4:
            raise ValueError("reward_weights needs four entries")

    @classmethod
    def for_method(cls, method: str, **overrides) -> "ExtractionConfig":
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
        controller, generator, mode = METHODS[method]
        return cls(**{"controller": controller, "generator": generator, "reward_mode": mode, **overrides})

    @classmethod
    def from_dict(cls, data: dict) -> "ExtractionConfig":
        data = dict(data)
        method = data.pop("method", None)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if method is not None:
            return cls.for_method(method, **data)
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalSet:
    images: np.ndarray
    labels: np.ndarray


@dataclass
class RunResult:
    attacker: Sequential
    best_accuracy: float | None
    iterations: list[dict]
    evaluations: list[dict]
    queries: int
    wall_clock: float
    config: dict
    transfer: TransferSet | None = None

    def summary(self) -> dict:
        return {"best_accuracy": self.best_accuracy, "queries": self.queries,
                "wall_clock": self.wall_clock, "evaluations": self.evaluations, "config": self.config}

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "result.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        write_iteration_log(out / "iterations.csv", self.iterations)
        checkpoint.save(out / "attacker.xlab", self.attacker, optimizer=self.config.get("attacker_optimizer"),
                        meta={"best_accuracy": self.best_accuracy})


LOG_FIELDS = ["j", "loss", "range", "min_std", "spread", "r_ce", "r_range", "r_std", "r_avg",
              "reward", "epsilon", "target_argmax", "victim_argmax"]


def write_iteration_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def train_attacker_window(attacker: Sequential, opt, images: np.ndarray, labels: np.ndarray,
                          batch_size: int, rng: np.random.Generator) -> float:
    """One shuffled minibatch pass over the window against the victim soft labels."""
    if len(images) == 0:
        raise ValueError("no transfer-set pairs to train on")
    return models.fit_epoch(attacker, opt, images, labels, batch_size, rng)


def post_train(attacker: Sequential, images: np.ndarray, labels: np.ndarray, epochs: int, *,
               optimizer: str = "sgd", lr: float = 0.01, momentum: float = 0.9, batch_size: int = 64,
               eval_set: EvalSet | None = None, eval_every: int = 5, seed: int = 0,
               best: float | None = None, best_weights=None) -> tuple[float | None, list[dict]]:
    """Constant-rate training over the whole transfer set, keeping the best-accuracy weights.

    ``best``/``best_weights`` carry the incumbent from an earlier phase.
    Returns the best accuracy seen and the evaluation trace; with an
    evaluation set the attacker is left holding the best weights.
    """
    if len(images) == 0:
        raise ValueError("post-training needs a nonempty transfer set")
    if best_weights is None:
        best_weights = attacker.get_weights()
    trace = []
    if epochs <= 0:
        if eval_set is not None:
            attacker.set_weights(best_weights)
        return best, trace
    rng = np.random.default_rng([seed, 7])
    opt = make_optimizer(optimizer, attacker.parameters(), lr, momentum)
    for epoch in range(1, epochs + 1):
        loss = models.fit_epoch(attacker, opt, images, labels, batch_size, rng)
        if eval_set is not None and (epoch % eval_every == 0 or epoch == epochs):
            acc = models.evaluate_top1(attacker, eval_set.images, eval_set.labels)
            trace.append({"phase": "post", "step": epoch, "train_loss": loss, "accuracy": acc})
            if best is None or acc > best:
                best, best_weights = acc, attacker.get_weights()
    if eval_set is not None:
        attacker.set_weights(best_weights)
    return best, trace


def make_controller(config: ExtractionConfig, num_classes: int):
    if config.controller == "random":
        return RandomController(seed=config.seed, num_classes=num_classes, eps_max=config.eps_max)
    agent_cfg = AgentConfig(**{"obs_dim": observation_size(num_classes), "action_dim": num_classes + 1,
                               "seed": config.seed, **config.agent})
    return DDPGController(agent_cfg, eps_max=config.eps_max)


def run_extraction(config: ExtractionConfig, oracle, pool: DataPool | None = None,
                   eval_set: EvalSet | None = None, attacker: Sequential | None = None,
                   progress=None) -> RunResult:
    """Spend exactly ``config.budget`` queries, then post-train on the transfer set.

    ``oracle`` is only ever used through ``oracle.query``.
    """
    start = time.time()
    pool = pool or DataPool()
    attacker = attacker or models.build(config.attacker, seed=config.seed)
    num_classes = attacker.layers[-1].out_features
    image_shape = pool.image_shape
    controller = make_controller(config, num_classes)
    weights = RewardWeights.from_sequence(config.reward_weights)
    opt = make_optimizer(config.attacker_optimizer, attacker.parameters(), config.attacker_lr,
                         config.attacker_momentum)
    gen_rng = np.random.default_rng([config.seed, 4])
    train_rng = np.random.default_rng([config.seed, 5])

    transfer = TransferSet(config.budget, image_shape, num_classes)
    obs = np.zeros(observation_size(num_classes), dtype=np.float32)
    prev = WindowStats.zeros(num_classes)
    rows: list[dict] = []
    evaluations: list[dict] = []
    best, best_weights = None, attacker.get_weights()

    for j in range(config.budget):
        action, raw = controller.act(obs, j)
        base = draw_base(pool, gen_rng)
        if config.generator == "ifgsm":
            query = ifgsm(attacker, base, ForgeRequest(action.target, action.epsilon, config.fgsm_iterations))
        else:
            query = uniform_perturb(base, action.epsilon, gen_rng)
        try:
            victim_out = oracle.query(query[None])[0]
        except BudgetExhausted as exc:
            raise ExtractionError(f"oracle budget ran out at query {j + 1} of {config.budget}; "
                                  "the configured budget must not exceed the oracle's") from exc
        transfer.append(query, victim_out)

        win_images, win_labels = transfer.window(config.scope)
        if (j + 1) % config.train_every == 0:
            train_attacker_window(attacker, opt, win_images, win_labels, config.batch_size, train_rng)
        win_logits = attacker.logits(win_images, batch_size=config.scope)
        stats = window_stats(win_labels, win_logits, config.per_class_loss)
        next_obs = assemble_observation(softmax_np(win_logits[-1]), victim_out, stats)
        terms = reward_terms(prev, stats, config.reward_mode)
        reward = combine(terms, weights)
        controller.observe(obs, raw, reward, next_obs)

        rows.append({"j": j, "loss": stats.loss, "range": stats.range, "min_std": float(stats.std.min()),
                     "spread": stats.spread, "r_ce": terms[0], "r_range": terms[1], "r_std": terms[2],
                     "r_avg": terms[3], "reward": reward, "epsilon": action.epsilon,
                     "target_argmax": int(np.argmax(action.target)), "victim_argmax": int(np.argmax(victim_out))})
        obs, prev = next_obs, stats

        if eval_set is not None and config.eval_every and (j + 1) % config.eval_every == 0:
            acc = models.evaluate_top1(attacker, eval_set.images, eval_set.labels)
            evaluations.append({"phase": "sampling", "step": j + 1, "accuracy": acc})
            if best is None or acc > best:
                best, best_weights = acc, attacker.get_weights()
            log.info("query %d: test accuracy %.4f", j + 1, acc)
        if progress is not None:
            progress(j + 1, config.budget)

    if eval_set is not None:
        acc = models.evaluate_top1(attacker, eval_set.images, eval_set.labels)
        evaluations.append({"phase": "sampling", "step": config.budget, "accuracy": acc})
        if best is None or acc > best:
            best, best_weights = acc, attacker.get_weights()

    images, labels = transfer.all()
    best, trace = post_train(attacker, images, labels, config.post_train_epochs,
                             optimizer=config.attacker_optimizer, lr=config.attacker_lr,
                             momentum=config.attacker_momentum, batch_size=config.batch_size,
                             eval_set=eval_set, eval_every=config.post_eval_every, seed=config.seed,
                             best=best, best_weights=best_weights)
    evaluations.extend(trace)

    return RunResult(attacker=attacker, best_accuracy=best, iterations=rows, evaluations=evaluations,
                     queries=len(transfer), wall_clock=time.time() - start, config=config.to_dict(),
                     transfer=transfer)
