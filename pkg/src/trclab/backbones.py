"""Supervised tabular backbones (MLP / residual MLP) and their training loop."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, FeatureSchema, Preprocessor, Split, Task
from .ndiff import (AdamW, Embedding, Linear, Param, ReLU, Residual, Sequential,
                    loss_cross_entropy, loss_mse, mlp)

ARCHITECTURES = ("mlp", "residual_mlp")


class FrozenError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    architecture: str = "mlp"
    depth: int = 2
    width: int = 32
    embed_dim: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.depth < 1 or self.width < 2 or self.embed_dim < 1:
            raise ValueError(f"invalid backbone config {self}")


@dataclass(frozen=True)
class TrainHP:
    lr: float = 1e-4
    wd: float = 1e-5
    batch: int = 128
    patience: int = 10
    max_epochs: int = 100
    restore_best: bool = True


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float | None = None
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def task_loss(out: np.ndarray, y: np.ndarray, task: Task) -> tuple[float, np.ndarray]:
    if task.is_regression:
        return loss_mse(out, np.asarray(y, dtype=np.float64).reshape(-1, 1))
    return loss_cross_entropy(out, y)


def evaluate(preds: np.ndarray, labels: np.ndarray, task: Task, label_pre: Preprocessor | None = None) -> float:
    """RMSE in original label units for regression, accuracy otherwise."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    if preds.shape[0] != labels.shape[0]:
        raise ValueError(f"{preds.shape[0]} predictions for {labels.shape[0]} labels")
    if task.is_regression:
        p = preds.reshape(-1)
        t = labels.astype(np.float64).reshape(-1)
        if p.shape != t.shape:
            raise ValueError("regression predictions must be one value per row")
        if label_pre is not None:
            p, t = label_pre.inverse_y(p), label_pre.inverse_y(t)
        return float(np.sqrt(np.mean((p - t) ** 2)))
    if preds.ndim != 2 or preds.shape[1] != task.n_classes:
        raise ValueError(f"expected logits with {task.n_classes} columns, got {preds.shape}")
    return float(np.mean(np.argmax(preds, axis=1) == labels.astype(np.int64)))


def is_better(new: float, best: float | None, task: Task) -> bool:
    if best is None:
        return True
    return new < best if task.is_regression else new > best


def params_checksum(params: list[Param]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


class Backbone:
    """Encoder + body (G_f) and a linear head (G_h)."""

    def __init__(self, cfg: BackboneConfig, schema: FeatureSchema, task: Task):
        self.cfg, self.schema, self.task = cfg, schema, task
        rng = np.random.default_rng([cfg.seed, 101])
        self.num_idx = schema.numerical_idx
        self.cat_idx = schema.categorical_idx
        self.embeddings = [Embedding(schema.columns[j].cardinality, cfg.embed_dim, rng, name=f"emb.{schema.columns[j].name}")
                           for j in self.cat_idx]
        self.in_dim = len(self.num_idx) + cfg.embed_dim * len(self.cat_idx)
        D = cfg.width
        if cfg.architecture == "mlp":
            self.body = mlp([self.in_dim] + [D] * cfg.depth, rng, final_relu=True, name="body")
        else:
            layers = [Linear(self.in_dim, D, rng, name="body.in"), ReLU()]
            for k in range(cfg.depth):
                layers.append(Residual(Sequential([Linear(D, D, rng, name=f"body.res{k}"), ReLU()])))
            self.body = Sequential(layers, name="body")
        self.head = Sequential([Linear(D, task.n_outputs, rng, name="head")], name="head")
        self.frozen = False

    @property
    def width(self) -> int:
        return self.cfg.width

    # parameters
    def feature_params(self) -> list[Param]:
        return [e.table for e in self.embeddings] + self.body.params()

    def head_params(self) -> list[Param]:
        return self.head.params()

    def params(self) -> list[Param]:
        return self.feature_params() + self.head_params()

    def checksum(self) -> str:
        return params_checksum(self.params())

    def freeze(self) -> "Backbone":
        self.frozen = True
        return self

    # passes
    def _check_schema(self, X: np.ndarray) -> None:
        if X.ndim != 2 or X.shape[1] != self.schema.d:
            raise ValueError(f"expected {self.schema.d} feature columns, got shape {X.shape}")

    def encode(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        self._check_schema(X)
        parts = [X[:, self.num_idx]]
        parts += [emb.forward(X[:, j]) for emb, j in zip(self.embeddings, self.cat_idx)]
        return np.hstack(parts) if parts else np.zeros((X.shape[0], 0))

    def represent(self, X: np.ndarray) -> np.ndarray:
        return self.body.forward(self.encode(X))

    def forward(self, X: np.ndarray) -> np.ndarray:
        return self.head.forward(self.represent(X))

    def backward(self, grad_out: np.ndarray) -> None:
        g = self.body.backward(self.head.backward(grad_out))
        off = len(self.num_idx)
        for emb in self.embeddings:
            emb.backward(g[:, off:off + emb.dim])
            off += emb.dim

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    # serialization
    def state(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.params()]

    def load_state(self, values: list[np.ndarray]) -> None:
        params = self.params()
        if len(values) != len(params):
            raise ValueError("parameter count mismatch")
        for p, v in zip(params, values):
            v = np.asarray(v, dtype=np.float64)
            if v.shape != p.value.shape:
                raise ValueError(f"{p.name}: shape {v.shape} != {p.value.shape}")
            p.value[...] = v


def build_backbone(cfg: BackboneConfig, schema: FeatureSchema, task: Task) -> Backbone:
    if schema.d < 1:
        raise ValueError("empty schema")
    return Backbone(cfg, schema, task)


def run_epochs(*, n_train: int, hp: TrainHP, rng: np.random.Generator, task: Task,
               step: Callable[[np.ndarray], float], validate: Callable[[], float],
               snapshot: Callable[[], object], restore: Callable[[object], None],
               before_epoch: Callable[[], None] | None = None) -> TrainLog:
    """Shuffled minibatch epochs with patience-based early stopping.

    Only strict improvement resets patience; the best snapshot is restored at
    the end.
    """
    log = TrainLog()
    best_state = None
    waited = 0
    for epoch in range(hp.max_epochs):
        if before_epoch is not None:
            before_epoch()
        order = rng.permutation(n_train)
        losses, sizes = [], []
        for start in range(0, n_train, hp.batch):
            idx = order[start:start + hp.batch]
            losses.append(step(idx))
            sizes.append(len(idx))
        log.train_loss.append(float(np.average(losses, weights=sizes)))
        metric = validate()
        log.val_metric.append(metric)
        if is_better(metric, log.best_metric, task):
            log.best_metric, log.best_epoch = metric, epoch
            best_state = snapshot()
            waited = 0
        else:
            waited += 1
            if waited >= hp.patience:
                log.stopped_early = True
                break
    if best_state is not None and hp.restore_best:
        restore(best_state)
    return log


def train_backbone(bb: Backbone, split: Split, hp: TrainHP = TrainHP(),
                   label_pre: Preprocessor | None = None, seed: int | None = None) -> TrainLog:
    if bb.frozen:
        raise FrozenError("cannot train a frozen backbone")
    for name, part in (("train", split.train), ("val", split.val)):
        if len(part) == 0:
            raise ValueError(f"empty {name} part")
    rng = np.random.default_rng([bb.cfg.seed if seed is None else seed, 202])
    opt = AdamW(bb.params(), hp.lr, hp.wd)
    X, y = split.train.X, split.train.y

    def step(idx):
        out = bb.forward(X[idx])
        loss, grad = task_loss(out, y[idx], bb.task)
        bb.backward(grad)
        opt.step()
        return loss

    def validate():
        return evaluate(bb.forward(split.val.X), split.val.y, bb.task, label_pre)

    return run_epochs(n_train=len(split.train), hp=hp, rng=rng, task=bb.task, step=step,
                      validate=validate, snapshot=bb.state, restore=bb.load_state)


def extract_representations(bb: Backbone, ds: Dataset) -> np.ndarray:
    if ds.schema.fingerprint() != bb.schema.fingerprint():
        raise ValueError("dataset schema does not match the backbone")
    return bb.represent(ds.X)


def predict(bb: Backbone, ds: Dataset) -> np.ndarray:
    return bb.forward(ds.X)
