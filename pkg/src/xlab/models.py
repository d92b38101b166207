"""Architectures (MLP, widened LeNet, 28x28 AlexNet) and supervised training."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import (Conv2d, Flatten, Linear, MaxPool2d, ReLU, Sequential, Tensor, make_optimizer,
                 softmax_cross_entropy)
from .nn import checkpoint

log = logging.getLogger(__name__)

INPUT_SHAPE = (1, 28, 28)
NUM_CLASSES = 10

# Nominal trainable-parameter counts each architecture is sized to.
NOMINAL_PARAMS = {"mlp": 100_000, "lenet": 400_000, "alexnet-mini": 4_000_000}


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    input_shape: tuple[int, ...] = INPUT_SHAPE
    num_classes: int = NUM_CLASSES
    hidden: int | None = None


def _mlp(spec: ArchitectureSpec) -> list:
    h = spec.hidden or 128
    return [Flatten(), Linear(int(np.prod(spec.input_shape)), h), ReLU(), Linear(h, spec.num_classes)]


def _lenet(spec: ArchitectureSpec) -> list:
    # classic LeNet-5 widened (16/32 channels, 720-unit fc) to reach ~4e5 parameters
    h = spec.hidden or 720
    c, side = spec.input_shape[0], spec.input_shape[1]
    flat = 32 * (((side - 4) // 2 - 4) // 2) ** 2
    return [Conv2d(c, 16, 5), ReLU(), MaxPool2d(2),
            Conv2d(16, 32, 5), ReLU(), MaxPool2d(2),
            Flatten(), Linear(flat, h), ReLU(), Linear(h, spec.num_classes)]


def _alexnet_mini(spec: ArchitectureSpec) -> list:
    h = spec.hidden or 1200
    c, side = spec.input_shape[0], spec.input_shape[1]
    flat = 128 * ((side // 2) // 2 // 2) ** 2
    return [Conv2d(c, 64, 3, padding=1), ReLU(), MaxPool2d(2),
            Conv2d(64, 128, 3, padding=1), ReLU(), MaxPool2d(2),
            Conv2d(128, 256, 3, padding=1), ReLU(),
            Conv2d(256, 256, 3, padding=1), ReLU(),
            Conv2d(256, 128, 3, padding=1), ReLU(), MaxPool2d(2),
            Flatten(), Linear(flat, h), ReLU(), Linear(h, h), ReLU(), Linear(h, spec.num_classes)]


_BUILDERS = {"mlp": _mlp, "lenet": _lenet, "alexnet-mini": _alexnet_mini}


def build(spec: ArchitectureSpec | str, seed: int) -> Sequential:
    """Xavier-initialized model for ``spec``; identical seeds give identical weights."""
    if isinstance(spec, str):
        spec = ArchitectureSpec(spec)
    if spec.name not in _BUILDERS:
        raise ValueError(f"unknown architecture {spec.name!r}; expected one of {sorted(_BUILDERS)}")
    model = Sequential(*_BUILDERS[spec.name](spec), input_shape=spec.input_shape, name=spec.name)
    model.reset_parameters(np.random.default_rng(seed))
    return model


@dataclass
class TrainingRecipe:
    epochs: int = 50
    batch_size: int = 64
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    decay_epoch: int | None = 35
    decay_factor: float = 0.1


@dataclass
class TrainedModel:
    model: Sequential
    log: list[dict] = field(default_factory=list)
    test_accuracy: float | None = None

    def save(self, path) -> None:
        checkpoint.save(path, self.model, meta={"test_accuracy": self.test_accuracy})

    @classmethod
    def load(cls, path) -> "TrainedModel":
        model, manifest = checkpoint.load(path)
        return cls(model=model, test_accuracy=manifest["meta"].get("test_accuracy"))


def evaluate_top1(model: Sequential, images: np.ndarray, labels: np.ndarray, batch_size: int = 1000) -> float:
    """Fraction of samples whose argmax prediction equals the label."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    pred = model.logits(images, batch_size).argmax(axis=1)
    return float((pred == labels).mean())


def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def fit_epoch(model: Sequential, opt, images: np.ndarray, targets: np.ndarray, batch_size: int,
              rng: np.random.Generator) -> float:
    """One shuffled pass of minibatch soft-target cross-entropy; returns the mean batch loss."""
    order = rng.permutation(len(images))
    total = 0.0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        loss = softmax_cross_entropy(model(Tensor(images[idx])), targets[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        total += loss.item() * len(idx)
    return total / len(order)


def train_supervised(model: Sequential, train_images: np.ndarray, train_labels: np.ndarray,
                     test_images: np.ndarray, test_labels: np.ndarray,
                     recipe: TrainingRecipe | None = None, seed: int = 0) -> TrainedModel:
    """Train on hard labels, keeping the weights with the best test accuracy seen."""
    recipe = recipe or TrainingRecipe()
    if len(train_images) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    targets = one_hot(np.asarray(train_labels), model.layers[-1].out_features)
    opt = make_optimizer(recipe.optimizer, model.parameters(), recipe.lr, recipe.momentum)
    best_acc = evaluate_top1(model, test_images, test_labels)
    best = model.get_weights()
    history = [{"epoch": 0, "train_loss": float("nan"), "test_acc": best_acc}]
    for epoch in range(1, recipe.epochs + 1):
        if recipe.decay_epoch is not None and epoch == recipe.decay_epoch + 1:
            opt.lr *= recipe.decay_factor
        loss = fit_epoch(model, opt, train_images, targets, recipe.batch_size, rng)
        acc = evaluate_top1(model, test_images, test_labels)
        history.append({"epoch": epoch, "train_loss": loss, "test_acc": acc})
        log.info("epoch %d loss %.4f test_acc %.4f", epoch, loss, acc)
        if acc > best_acc:
            best_acc, best = acc, model.get_weights()
    model.set_weights(best)
    return TrainedModel(model=model, log=history, test_accuracy=best_acc)


def write_training_log(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "test_acc"])
        writer.writeheader()
        writer.writerows(history)
