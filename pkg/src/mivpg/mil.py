"""Embedding-level MIL pooling and the permutation-equivalence layer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, EmptyBagError, ShapeError
from .rng import Rng
from .tensor import Tensor

POOLING_KINDS = ("mean", "max", "cls_select", "ab_mil")


@dataclass
class PoolingSpec:
    """Which aggregator to use; ``w`` (L_a x 1) and ``u`` (L_a x D) only for ab_mil."""

    kind: str
    w: Tensor | None = None
    u: Tensor | None = None
    index: int = 0

    def __post_init__(self):
        if self.kind not in POOLING_KINDS:
            raise ConfigError(f"unknown pooling kind {self.kind!r}")
        if self.kind == "ab_mil":
            if self.w is None or self.u is None:
                raise ConfigError("ab_mil pooling needs both w and u")
            hidden = self.u.shape[0]
            if self.u.ndim != 2 or self.w.shape != (hidden, 1):
                raise ConfigError(f"ab_mil shapes inconsistent: w {self.w.shape}, u {self.u.shape}")

    @classmethod
    def ab_mil(cls, dim: int, rng: Rng, hidden: int = 64) -> "PoolingSpec":
        u = T.parameter(rng.normal((hidden, dim), std=1.0 / math.sqrt(dim)))
        w = T.parameter(rng.normal((hidden, 1), std=1.0 / math.sqrt(hidden)))
        return cls("ab_mil", w=w, u=u)

    @property
    def dim(self) -> int | None:
        return None if self.u is None else self.u.shape[1]

    def named_parameters(self) -> dict[str, Tensor]:
        if self.kind != "ab_mil":
            return {}
        return {"w": self.w, "u": self.u}


@dataclass
class BagEmbedding:
    vector: Tensor
    weights: Tensor | None = None


def _check_bag(spec: PoolingSpec, bag: Tensor) -> None:
    if bag.ndim != 2:
        raise ShapeError(f"bag must be a matrix (M x D), got shape {bag.shape}")
    if bag.shape[0] == 0:
        raise EmptyBagError("cannot pool an empty bag")
    if spec.kind == "ab_mil" and spec.dim != bag.shape[1]:
        raise ConfigError(f"ab_mil u expects dim {spec.dim}, bag has dim {bag.shape[1]}")


def _ab_mil_scores(spec: PoolingSpec, bag: Tensor) -> Tensor:
    # w^T tanh(u x_i^T) for every row at once: tanh(X u^T) w
    hidden = T.tanh_elem(T.matmul(bag, T.transpose(spec.u)))
    return T.reshape(T.matmul(hidden, spec.w), (bag.shape[0],))


def ab_mil_weights(spec: PoolingSpec, bag: Tensor) -> Tensor:
    """Normalized AB-MIL instance weights alpha (length M)."""
    if spec.kind != "ab_mil":
        raise ConfigError(f"ab_mil_weights called with a {spec.kind!r} spec")
    _check_bag(spec, bag)
    return T.softmax(_ab_mil_scores(spec, bag), axis=-1)


def pool_bag(spec: PoolingSpec, bag: Tensor) -> BagEmbedding:
    _check_bag(spec, bag)
    if spec.kind == "mean":
        return BagEmbedding(T.mean(bag, axis=0))
    if spec.kind == "max":
        return BagEmbedding(T.max_rows(bag))
    if spec.kind == "cls_select":
        if not 0 <= spec.index < bag.shape[0]:
            raise IndexError(f"cls index {spec.index} out of range for bag of {bag.shape[0]}")
        return BagEmbedding(T.reshape(T.take_rows(bag, [spec.index]), (bag.shape[1],)))
    alpha = ab_mil_weights(spec, bag)
    pooled = T.matmul(T.reshape(alpha, (1, -1)), bag)
    return BagEmbedding(T.reshape(pooled, (bag.shape[1],)), alpha)


def ab_mil_pool_groups(spec: PoolingSpec, groups: Sequence[Tensor]) -> tuple[Tensor, list[np.ndarray]]:
    """AB-MIL pooling of several bags sharing one spec, in a single pass.

    Returns the (n_groups x D) matrix of pooled embeddings and the per-group
    weight vectors. Equivalent to calling ``pool_bag`` on each group.
    """
    if not groups:
        raise EmptyBagError("no image groups to pool")
    lengths = [g.shape[0] for g in groups]
    if min(lengths) == 0:
        raise EmptyBagError(f"empty image group at index {lengths.index(0)}")
    stacked = groups[0] if len(groups) == 1 else T.concat_rows(list(groups))
    _check_bag(spec, stacked)
    weights = T.segment_softmax(_ab_mil_scores(spec, stacked), lengths)
    pooled = T.matmul(weights, stacked)
    bounds = np.cumsum([0] + lengths)
    alphas = [weights.data[i, bounds[i]:bounds[i + 1]].copy() for i in range(len(groups))]
    return pooled, alphas


def perm_equivalence_layer(
    x: Tensor,
    pool: PoolingSpec,
    lam,
    gamma,
    activation: Callable[[Tensor], Tensor] | None = None,
) -> Tensor:
    """Row i -> activation(lam * x_i + gamma * pool(x)).

    ``lam`` and ``gamma`` are floats or scalar tensors (learnable).
    """
    pooled = pool_bag(pool, x).vector
    a = T.scale(x, lam) if isinstance(lam, (int, float)) else T.mul(x, lam)
    b = T.scale(pooled, gamma) if isinstance(gamma, (int, float)) else T.mul(pooled, gamma)
    out = T.add(a, b)
    return out if activation is None else activation(out)
