"""The MIVPG block stack.

Learnable queries pool a bag of instance embeddings through cross-attention
(a multi-head MIL aggregator). Optional pieces: correlated self-attention
(CSA) that refreshes the bag from the previous block's queries at O(M R)
cost, a pyramid positional encoding (PPEG) over a square token grid, and
AB-MIL patch pooling that turns a sample of several images into one bag of
image embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionMap, AttentionParams, linear, multi_head_attention
from .config import MivpgConfig
from .errors import EmptyBagError, ShapeError
from .mil import PoolingSpec, ab_mil_pool_groups
from .rng import Rng
from .tensor import Tensor


@dataclass
class Bag:
    """A sample's instances.

    Flat bags hold one (M x D) matrix. Hierarchical bags hold N image groups,
    each (P_i x D_I); P_i may differ between images.
    """

    groups: list[np.ndarray]
    hierarchical: bool

    def __post_init__(self):
        self.groups = [np.ascontiguousarray(g, dtype=np.float64) for g in self.groups]
        if not self.groups:
            raise EmptyBagError("bag has no images")
        dims = set()
        for i, g in enumerate(self.groups):
            if g.ndim != 2:
                raise ShapeError(f"group {i} must be a matrix, got shape {g.shape}")
            if g.shape[0] == 0:
                raise EmptyBagError(f"image group {i} is empty")
            dims.add(g.shape[1])
        if len(dims) != 1:
            raise ShapeError(f"instance dims differ across groups: {sorted(dims)}")
        if not self.hierarchical and len(self.groups) != 1:
            raise ShapeError("a flat bag has exactly one group")

    @classmethod
    def flat(cls, instances) -> "Bag":
        return cls([np.asarray(instances)], hierarchical=False)

    @classmethod
    def nested(cls, images) -> "Bag":
        return cls(list(images), hierarchical=True)

    @property
    def num_images(self) -> int:
        return len(self.groups)

    @property
    def instance_dim(self) -> int:
        return self.groups[0].shape[1]

    @property
    def patch_counts(self) -> list[int]:
        return [g.shape[0] for g in self.groups]

    @property
    def instances(self) -> np.ndarray:
        """All instance rows, concatenated in group order."""
        return self.groups[0] if len(self.groups) == 1 else np.concatenate(self.groups, axis=0)

    def flattened(self) -> "Bag":
        return Bag.flat(self.instances)

    def as_hierarchical(self) -> "Bag":
        return Bag(self.groups, hierarchical=True)


@dataclass
class BlockState:
    q: Tensor
    bag: Tensor


@dataclass
class PpegParams:
    kernels: list[Tensor]

    @classmethod
    def init(cls, dim: int, sizes, rng: Rng) -> "PpegParams":
        return cls([T.parameter(rng.normal((k, k, dim), std=1.0 / k)) for k in sizes])

    @classmethod
    def zeros(cls, dim: int, sizes) -> "PpegParams":
        return cls([T.parameter(np.zeros((k, k, dim))) for k in sizes])

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"kernel{k.shape[0]}": k for k in self.kernels}


@dataclass
class BlockParams:
    self_attn: AttentionParams
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    cross_attn: AttentionParams | None = None
    csa: AttentionParams | None = None

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"self_attn.{k}": v for k, v in self.self_attn.named_parameters().items()}
        if self.csa is not None:
            out.update({f"csa.{k}": v for k, v in self.csa.named_parameters().items()})
        if self.cross_attn is not None:
            out.update({f"cross_attn.{k}": v for k, v in self.cross_attn.named_parameters().items()})
        out.update(ffn_w1=self.ffn_w1, ffn_b1=self.ffn_b1, ffn_w2=self.ffn_w2, ffn_b2=self.ffn_b2)
        return out


@dataclass
class MivpgParams:
    queries: Tensor
    in_w: Tensor
    in_b: Tensor
    patch_pool: PoolingSpec
    blocks: list[BlockParams]
    ppeg: PpegParams | None = None

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"queries": self.queries, "in_w": self.in_w, "in_b": self.in_b}
        out.update({f"patch_pool.{k}": v for k, v in self.patch_pool.named_parameters().items()})
        if self.ppeg is not None:
            out.update({f"ppeg.{k}": v for k, v in self.ppeg.named_parameters().items()})
        for i, block in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in block.named_parameters().items()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = sorted(set(named) - set(state))
        extra = sorted(set(state) - set(named))
        if missing or extra:
            raise ShapeError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for k, p in named.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: stored shape {state[k].shape} != {p.shape}")
            p.data = np.ascontiguousarray(state[k], dtype=np.float64)


@dataclass
class Diagnostics:
    """Attention exported for inspection.

    ``cross_maps`` maps block index to the (heads x R x M) image-level
    cross-attention; ``patch_alphas`` holds the AB-MIL weights of each image
    (hierarchical bags only).
    """

    cross_maps: dict[int, AttentionMap] = field(default_factory=dict)
    patch_alphas: list[np.ndarray] | None = None


def init_queries(config: MivpgConfig, rng: Rng) -> Tensor:
    return T.parameter(rng.normal((config.num_queries, config.model_dim), std=config.init_std))


def _ffn_init(rng: Rng, fan_in: int, fan_out: int) -> Tensor:
    return T.parameter(rng.normal((fan_in, fan_out), std=1.0 / math.sqrt(fan_in)))


def init_params(config: MivpgConfig, rng: Rng) -> MivpgParams:
    d, di = config.model_dim, config.instance_dim
    queries = init_queries(config, rng)
    in_w = _ffn_init(rng, di, d)
    in_b = T.parameter(np.zeros(d))
    patch_pool = PoolingSpec.ab_mil(di, rng, hidden=config.abmil_hidden)
    blocks = []
    for i in range(config.num_blocks):
        blocks.append(BlockParams(
            self_attn=AttentionParams.init(d, config.num_heads, rng),
            ffn_w1=_ffn_init(rng, d, config.ffn_hidden),
            ffn_b1=T.parameter(np.zeros(config.ffn_hidden)),
            ffn_w2=_ffn_init(rng, config.ffn_hidden, d),
            ffn_b2=T.parameter(np.zeros(d)),
            cross_attn=AttentionParams.init(d, config.num_heads, rng) if config.has_cross_attention(i) else None,
            csa=AttentionParams.init(d, config.num_heads, rng) if config.use_csa else None,
        ))
    ppeg = PpegParams.init(d, config.ppeg_kernels, rng) if config.use_ppeg else None
    return MivpgParams(queries, in_w, in_b, patch_pool, blocks, ppeg)


# ------------------------------------------------------------------ PPEG

def ppeg(x: Tensor, params: PpegParams) -> Tensor:
    """Multi-scale depthwise convolutions over tokens laid out on a square grid.

    The sequence is padded to S*S by repeating its leading tokens, convolved
    (identity + sum over kernel sizes), flattened, and cut back to M rows.
    """
    m, d = x.shape
    if m == 0:
        raise EmptyBagError("ppeg over an empty bag")
    side = math.isqrt(m - 1) + 1
    idx = np.arange(side * side) % m
    grid = T.reshape(T.take_rows(x, idx), (side, side, d))
    out = grid
    for kernel in params.kernels:
        out = T.add(out, T.depthwise_conv2d(grid, kernel))
    return T.take_rows(T.reshape(out, (side * side, d)), np.arange(m))


# ---------------------------------------------------------- bag updates

def csa_update(bag_prev: Tensor, q_prev: Tensor, params: AttentionParams) -> Tensor:
    """LayerNorm(B + MHA(Q=B, K=q, V=q)); each instance attends to R queries."""
    update, _ = multi_head_attention(params, bag_prev, q_prev, q_prev)
    return T.layer_norm(T.add(bag_prev, update))


@dataclass
class LowRankParams:
    """Probe matrix (M' x D) and the two attention stages that use it."""

    probe: Tensor
    gather: AttentionParams
    scatter: AttentionParams

    @classmethod
    def init(cls, dim: int, probe_size: int, num_heads: int, rng: Rng) -> "LowRankParams":
        probe = T.parameter(rng.normal((probe_size, dim), std=1.0 / math.sqrt(dim)))
        return cls(probe, AttentionParams.init(dim, num_heads, rng), AttentionParams.init(dim, num_heads, rng))


def low_rank_self_attention(bag: Tensor, probe: Tensor, params: LowRankParams) -> Tensor:
    """Two-stage attention through M' probe rows, O(M M') instead of O(M^2).

    Stage one summarizes the bag into the probe (probe attends to bag);
    stage two lets every instance read the summary back.
    """
    summary, _ = multi_head_attention(params.gather, probe, bag, bag)
    out, _ = multi_head_attention(params.scatter, bag, summary, summary)
    return out


def full_self_attention(bag: Tensor, params: AttentionParams, query_chunk: int | None = None) -> Tensor:
    """Pairwise instance self-attention, O(M^2); the baseline CSA replaces."""
    out, _ = multi_head_attention(params, bag, bag, bag, query_chunk=query_chunk)
    return out


# ---------------------------------------------------------------- blocks

def _residual_ln(x: Tensor, update: Tensor) -> Tensor:
    return T.layer_norm(T.add(x, update))


def mivpg_block(
    state: BlockState,
    block_index: int,
    config: MivpgConfig,
    params: BlockParams,
) -> tuple[BlockState, AttentionMap | None]:
    q = state.q
    sa, _ = multi_head_attention(params.self_attn, q, q, q)
    q1 = _residual_ln(q, sa)

    bag = state.bag
    if config.use_csa:
        source = state.q if config.csa_source == "previous" else q1
        bag = csa_update(bag, source, params.csa)

    q2, cross_map = q1, None
    if config.has_cross_attention(block_index):
        ca, cross_map = multi_head_attention(params.cross_attn, q1, bag, bag)
        q2 = _residual_ln(q1, ca)

    hidden = T.gelu(linear(q2, params.ffn_w1, params.ffn_b1))
    q3 = _residual_ln(q2, linear(hidden, params.ffn_w2, params.ffn_b2))
    return BlockState(q3, bag), cross_map


def embed_bag(bag: Bag, config: MivpgConfig, params: MivpgParams) -> tuple[Tensor, list[np.ndarray] | None]:
    """Turn a bag into the (M x D) instance matrix the blocks consume."""
    if bag.instance_dim != config.instance_dim:
        raise ShapeError(f"bag instance dim {bag.instance_dim} != config instance_dim {config.instance_dim}")
    alphas = None
    if bag.hierarchical:
        rows, alphas = ab_mil_pool_groups(params.patch_pool, [T.tensor(g) for g in bag.groups])
    else:
        rows = T.tensor(bag.groups[0])
    x = linear(rows, params.in_w, params.in_b)
    if config.use_ppeg:
        x = ppeg(x, params.ppeg)
    return x, alphas


def run_blocks(x: Tensor, config: MivpgConfig, params: MivpgParams) -> tuple[Tensor, dict[int, AttentionMap]]:
    state = BlockState(params.queries, x)
    maps = {}
    for i, block in enumerate(params.blocks):
        state, cross_map = mivpg_block(state, i, config, block)
        if cross_map is not None:
            maps[i] = cross_map
    return state.q, maps


def mivpg_forward(bag: Bag, config: MivpgConfig, params: MivpgParams) -> tuple[Tensor, Diagnostics]:
    """Final query embeddings (R x D) plus exported attention."""
    x, alphas = embed_bag(bag, config, params)
    q, maps = run_blocks(x, config, params)
    return q, Diagnostics(maps, alphas)


def flatten_baseline_forward(bag: Bag, config: MivpgConfig, params: MivpgParams) -> tuple[Tensor, Diagnostics]:
    """Concatenate every image's patches into one flat bag and run the stack."""
    return mivpg_forward(bag.flattened(), config.replace(use_ppeg=False), params)
