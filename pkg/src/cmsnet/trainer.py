"""Desk-scale supervised training: SGD with momentum under a linear poly schedule."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import runtime as R
from . import tensor as T
from .errors import ConfigError, NumericError
from .graph import Graph
from .metrics import ConfusionMatrix

log = logging.getLogger(__name__)

BUFFER_ROLES = ("mean", "var")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    base_lr: float = 0.007
    momentum: float = 0.9
    seed: int = 42
    augment: bool = False
    ignore_id: int | None = None
    max_iter: int | None = None

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "iter", "lr", "loss", "miou"], lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "lr": f"{r['lr']:.10g}", "loss": f"{r['loss']:.10g}", "miou": f"{r['miou']:.10g}"})


def poly_lr(iteration: int, max_iter: int, base_lr: float) -> float:
    """First-order (linear) polynomial decay reaching exactly 0 at ``max_iter``."""
    if max_iter <= 0:
        raise ConfigError("max_iter must be positive")
    if not 0 <= iteration <= max_iter:
        raise ConfigError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter)


def sgd_step(weights: dict, grads: dict, lr: float, momentum: float, velocity: dict) -> dict:
    """``v <- momentum * v + g``; ``w <- w - lr * v``.  Updates ``velocity`` in place."""
    out = dict(weights)
    for name, g in grads.items():
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v.astype(weights[name].dtype, copy=False)
        out[name] = (weights[name] - lr * velocity[name]).astype(weights[name].dtype, copy=False)
    return out


def trainable(graph: Graph) -> list[str]:
    names = []
    for node in graph.nodes:
        for role, w in node.params.items():
            if not (node.op == "batch_norm" and role in BUFFER_ROLES):
                names.append(w)
    return names


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(graph: Graph, dataset, config: TrainConfig, augment_fn=None, callback=None):
    """Train ``graph`` on ``dataset`` (a sequence of ``(image, mask)`` pairs).

    Returns ``(trained_graph, log)``.  The input graph is not modified.  With
    a fixed seed and no augmentation two runs produce identical weights.
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    cfg_classes = graph.meta.get("config", {}).get("num_classes")
    images = np.stack([R.preprocess(img)[0] for img, _ in dataset])
    masks = np.stack([np.asarray(m, dtype=np.int64) for _, m in dataset])
    if cfg_classes is not None:
        bad = (masks >= cfg_classes) | (masks < 0)
        if config.ignore_id is not None:
            bad &= masks != config.ignore_id
        if bad.any():
            raise ConfigError(f"dataset masks contain class ids outside [0, {cfg_classes})")

    g = graph.copy()
    rng = np.random.default_rng(config.seed)
    iters_per_epoch = math.ceil(len(dataset) / config.batch_size)
    max_iter = config.max_iter or config.epochs * iters_per_epoch
    names = trainable(g)
    velocity: dict[str, np.ndarray] = {}
    tlog = TrainLog()
    it = 0
    num_classes = cfg_classes or int(masks.max()) + 1

    for epoch in range(config.epochs):
        cm = ConfusionMatrix(num_classes)
        losses = []
        for idx in _batches(len(dataset), config.batch_size, rng):
            if it >= max_iter:
                break
            x, y = images[idx], masks[idx]
            if config.augment and augment_fn is not None:
                pairs = [augment_fn(img, m, int(rng.integers(2**31))) for img, m in
                         zip((dataset[i][0] for i in idx), (dataset[i][1] for i in idx))]
                x = np.stack([R.preprocess(p[0])[0] for p in pairs])
                y = np.stack([np.asarray(p[1], np.int64) for p in pairs])
            lr = poly_lr(it, max_iter, config.base_lr)
            (logits,), tape = R.execute(g, x, training=True, record=True)
            loss, grad = T.softmax_cross_entropy(logits, y, config.ignore_id)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at iteration {it}")
            wgrads, _ = R.backward(g, tape, [grad])
            new = sgd_step({n: g.weights[n] for n in names}, {n: wgrads[n] for n in names},
                           lr, config.momentum, velocity)
            new.update(R.updated_running_stats(g, tape))
            for k, v in new.items():
                if not np.all(np.isfinite(v)):
                    raise NumericError(f"weight {k} became non-finite at iteration {it}")
            g.weights.update(new)
            cm.accumulate(y, R.argmax_mask(logits), config.ignore_id)
            losses.append(loss)
            tlog.step_losses.append(loss)
            it += 1
            last_lr = lr
        if not losses:
            break
        try:
            miou = cm.miou()
        except Exception:
            miou = float("nan")
        row = {"epoch": epoch, "iter": it, "lr": last_lr, "loss": float(np.mean(losses)), "miou": miou}
        tlog.rows.append(row)
        log.debug("epoch %d iter %d lr %.6g loss %.5f miou %.4f", epoch, it, last_lr, row["loss"], miou)
        if callback is not None:
            callback(row)
    return g, tlog


def evaluate(graph: Graph, dataset, num_classes: int, ignore_id: int | None = None, batch_size: int = 4) -> ConfusionMatrix:
    """Inference-mode confusion matrix over ``(image, mask)`` pairs."""
    cm = ConfusionMatrix(num_classes)
    for i in range(0, len(dataset), batch_size):
        chunk = dataset[i:i + batch_size]
        x = np.concatenate([R.preprocess(img) for img, _ in chunk])
        pred = R.predict(graph, x)
        for p, (_, m) in zip(pred, chunk):
            cm.accumulate(np.asarray(m), p, ignore_id)
    return cm
