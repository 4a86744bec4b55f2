"""Scaled dot-product and multi-head attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, EmptyBagError, ShapeError
from .rng import Rng
from .tensor import Tensor

# MAC counter tags: "attn" is the pairwise score/aggregation work, "proj" the
# per-row linear maps.
ATTN = "attn"
PROJ = "proj"


@dataclass
class AttentionMap:
    """Softmax weights, shape (heads, n_queries, n_keys)."""

    weights: np.ndarray

    @property
    def num_heads(self) -> int:
        return self.weights.shape[0]

    def mean_over_heads(self) -> np.ndarray:
        return self.weights.mean(axis=0)


@dataclass
class AttentionParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    num_heads: int

    def __post_init__(self):
        dim = self.w_q.shape[0]
        if self.num_heads < 1 or dim % self.num_heads:
            raise ConfigError(f"model dim {dim} not divisible by {self.num_heads} heads")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (dim, dim):
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {(dim, dim)}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @classmethod
    def init(cls, dim: int, num_heads: int, rng: Rng, std: float | None = None) -> "AttentionParams":
        if num_heads < 1 or dim % num_heads:
            raise ConfigError(f"model dim {dim} not divisible by {num_heads} heads")
        std = 1.0 / math.sqrt(dim) if std is None else std
        mats = {}
        for name in ("q", "k", "v", "o"):
            mats[f"w_{name}"] = T.parameter(rng.normal((dim, dim), std=std))
            mats[f"b_{name}"] = T.parameter(np.zeros(dim))
        return cls(num_heads=num_heads, **mats)

    def named_parameters(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")}


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b, rows of x are instances."""
    y = T.matmul(x, w, tag=PROJ)
    return y if b is None else T.add(y, b)


def _core(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    if k.shape[-2] == 0:
        raise EmptyBagError("attention over zero keys is undefined")
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2), tag=ATTN), 1.0 / math.sqrt(q.shape[-1]))
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v, tag=ATTN), weights


def _core_chunked(q: Tensor, k: Tensor, v: Tensor, chunk: int) -> Tensor:
    # inference only: never materializes the full (n_q x n_k) map
    parts = []
    for lo in range(0, q.shape[-2], chunk):
        out, _ = _core(Tensor(q.data[..., lo:lo + chunk, :]), k, v)
        parts.append(out.data)
    return Tensor(np.concatenate(parts, axis=-2))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, AttentionMap]:
    """softmax(q k^T / sqrt(d)) v for 2-D inputs (one head)."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"expected matrices, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"incompatible attention shapes q={q.shape} k={k.shape} v={v.shape}")
    out, weights = _core(q, k, v)
    return out, AttentionMap(weights.data[None])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, dim = x.shape
    return T.swapaxes(T.reshape(x, (n, heads, dim // heads)), 0, 1)


def _merge_heads(x: Tensor) -> Tensor:
    heads, n, d = x.shape
    return T.reshape(T.swapaxes(x, 0, 1), (n, heads * d))


def multi_head_attention(
    params: AttentionParams,
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    query_chunk: int | None = None,
) -> tuple[Tensor, AttentionMap | None]:
    """Project, attend per head on split channels, concatenate, project out.

    ``query_chunk`` processes query rows in blocks without keeping the
    attention map (inference-only, used for large benchmark bags).
    """
    if k_in.shape[0] == 0:
        raise EmptyBagError("attention over an empty bag")
    for x in (q_in, k_in, v_in):
        if x.ndim != 2 or x.shape[1] != params.dim:
            raise ShapeError(f"input of shape {x.shape} does not match model dim {params.dim}")
    if k_in.shape[0] != v_in.shape[0]:
        raise ShapeError(f"keys {k_in.shape} and values {v_in.shape} differ in length")
    h = params.num_heads
    qh = _split_heads(linear(q_in, params.w_q, params.b_q), h)
    kh = _split_heads(linear(k_in, params.w_k, params.b_k), h)
    vh = _split_heads(linear(v_in, params.w_v, params.b_v), h)
    if query_chunk is not None:
        out = _core_chunked(qh, kh, vh, query_chunk)
        attn_map = None
    else:
        out, weights = _core(qh, kh, vh)
        attn_map = AttentionMap(weights.data)
    return linear(_merge_heads(out), params.w_o, params.b_o), attn_map


def query_residual_cross_attention(q: Tensor, bag: Tensor, params: AttentionParams) -> Tensor:
    """q + MHA(q, bag, bag): the query update is a weighted pool of the bag."""
    if bag.shape[0] == 0:
        raise EmptyBagError("cross-attention over an empty bag")
    update, _ = multi_head_attention(params, q, bag, bag)
    return T.add(q, update)
