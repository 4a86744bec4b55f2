"""Bag classification on top of MIVPG, trained with Adam on BCE."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..attention import linear
from ..config import MivpgConfig
from ..errors import ConfigError, TrainingError
from ..model import Bag, init_params, mivpg_forward
from ..rng import Rng
from ..tensor import Tape, Tensor
from .data import Dataset, Example

MODELS = ("mivpg", "mean_pool")


def witness_config(instance_dim: int = 32, **overrides) -> MivpgConfig:
    """Small stack that trains in seconds per epoch on the witness task."""
    base = dict(num_blocks=2, num_queries=4, model_dim=32, num_heads=2, cross_attn_every=1,
                ffn_hidden=64, instance_dim=instance_dim, abmil_hidden=32)
    base.update(overrides)
    return MivpgConfig(**base)


class MivpgClassifier:
    """MIVPG followed by a linear head on the mean of the R query embeddings."""

    def __init__(self, config: MivpgConfig, rng: Rng):
        self.config = config
        self.params = init_params(config, rng)
        self.head_w = T.parameter(rng.normal((config.model_dim, 1), std=1.0 / math.sqrt(config.model_dim)))
        self.head_b = T.parameter(np.zeros(1))

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.params.named_parameters()
        out.update({"head.w": self.head_w, "head.b": self.head_b})
        return out

    def logit(self, bag: Bag) -> Tensor:
        q, _ = mivpg_forward(bag, self.config, self.params)
        pooled = T.mean(q, axis=0, keepdims=True)
        return T.reshape(linear(pooled, self.head_w, self.head_b), ())


class MeanPoolClassifier:
    """Baseline: mean of every instance in the bag, then a one-hidden-layer MLP."""

    def __init__(self, instance_dim: int, hidden: int, rng: Rng):
        self.w1 = T.parameter(rng.normal((instance_dim, hidden), std=1.0 / math.sqrt(instance_dim)))
        self.b1 = T.parameter(np.zeros(hidden))
        self.w2 = T.parameter(rng.normal((hidden, 1), std=1.0 / math.sqrt(hidden)))
        self.b2 = T.parameter(np.zeros(1))

    @classmethod
    def matched(cls, instance_dim: int, num_params: int, rng: Rng) -> "MeanPoolClassifier":
        """Pick the hidden width whose parameter count is closest to ``num_params``."""
        hidden = max(1, round((num_params - 1) / (instance_dim + 2)))
        return cls(instance_dim, hidden, rng)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def logit(self, bag: Bag) -> Tensor:
        pooled = T.tensor(bag.instances.mean(axis=0, keepdims=True))
        hidden = T.gelu(linear(pooled, self.w1, self.b1))
        return T.reshape(linear(hidden, self.w2, self.b2), ())


def count_parameters(model) -> int:
    return sum(p.data.size for p in model.named_parameters().values())


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, scale: float = 1.0) -> None:
        """Apply one update from the accumulated ``.grad`` (multiplied by ``scale``)."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        T.zero_grad(self.params)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class RunMetrics:
    seed: int
    config_digest: str
    model: str
    num_parameters: int
    epochs: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = -1
    test_accuracy: float = float("nan")

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].train_loss

    def to_rows(self) -> list[dict]:
        rows = [dict(epoch=e.epoch, train_loss=e.train_loss, val_accuracy=e.val_accuracy, test_accuracy="")
                for e in self.epochs]
        best = next(e for e in self.epochs if e.epoch == self.best_epoch)
        rows.append(dict(epoch="best", train_loss=best.train_loss, val_accuracy=best.val_accuracy,
                         test_accuracy=self.test_accuracy))
        for r in rows:
            r.update(seed=self.seed, model=self.model, num_parameters=self.num_parameters,
                     config_digest=self.config_digest)
        return rows


def accuracy(model, examples: Sequence[Example]) -> float:
    if not examples:
        return float("nan")
    hits = sum(int((model.logit(e.bag).item() > 0) == bool(e.label)) for e in examples)
    return hits / len(examples)


def build_model(kind: str, config: MivpgConfig, rng: Rng, match_params: int | None = None):
    if kind == "mivpg":
        return MivpgClassifier(config, rng)
    if kind == "mean_pool":
        target = match_params if match_params is not None else count_parameters(MivpgClassifier(config, Rng(0)))
        return MeanPoolClassifier.matched(config.instance_dim, target, rng)
    raise ConfigError(f"unknown model {kind!r}; expected one of {MODELS}")


def train(
    dataset: Dataset,
    config: MivpgConfig,
    model="mivpg",
    epochs: int = 20,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 16,
    patience: int | None = None,
    return_model: bool = False,
):
    """Fit a bag classifier on the 70/10/20 split of ``dataset``.

    ``model`` is ``"mivpg"``, ``"mean_pool"`` or an already built classifier
    (anything with ``named_parameters()`` and ``logit(bag)``), trained in place.

    The checkpoint with the best validation accuracy (earliest on ties) is
    scored on the test split. ``patience`` stops after that many epochs
    without validation improvement.
    """
    if not (math.isfinite(lr) and lr >= 0):
        raise ConfigError(f"learning rate must be finite and >= 0, got {lr}")
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    rng = Rng(seed)
    train_set, val_set, test_set = dataset.split(rng.next_u64())
    if not train_set:
        raise TrainingError("training split is empty")
    init_rng = rng.spawn()
    if isinstance(model, str):
        clf, name = build_model(model, config, init_rng), model
    else:
        clf, name = model, type(model).__name__
    named = clf.named_parameters()
    opt = Adam(list(named.values()), lr=lr)
    metrics = RunMetrics(seed, config.digest(), name, count_parameters(clf))

    best_val, best_state, stale = -1.0, None, 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        total = 0.0
        for lo in range(0, len(order), batch_size):
            batch = order[lo:lo + batch_size]
            opt.zero_grad()
            for i in batch:
                ex = train_set[i]
                with Tape() as tape:
                    loss = T.bce_with_logits(clf.logit(ex.bag), ex.label)
                tape.backward(loss)
                total += loss.item()
            opt.step(scale=1.0 / len(batch))
        train_loss = total / len(train_set)
        if not math.isfinite(train_loss):
            raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
        val_acc = accuracy(clf, val_set) if val_set else accuracy(clf, train_set)
        metrics.epochs.append(EpochMetrics(epoch, train_loss, val_acc))
        if val_acc > best_val:
            best_val, stale = val_acc, 0
            metrics.best_epoch = epoch
            best_state = {k: p.data.copy() for k, p in named.items()}
        else:
            stale += 1
            if patience is not None and stale >= patience:
                break

    for k, p in named.items():
        p.data = best_state[k]
    metrics.test_accuracy = accuracy(clf, test_set)
    return (metrics, clf) if return_model else metrics
