"""Architecture configuration and its JSON file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

CSA_SOURCES = ("previous", "current")


@dataclass(frozen=True)
class MivpgConfig:
    num_blocks: int = 12
    num_queries: int = 32
    model_dim: int = 64
    num_heads: int = 4
    cross_attn_every: int = 2
    use_csa: bool = True
    use_ppeg: bool = False
    ffn_hidden: int | None = None
    ppeg_kernels: tuple[int, ...] = (3, 5, 7)
    low_rank_probe_size: int = 16
    # dimension of incoming instance embeddings; defaults to model_dim
    instance_dim: int | None = None
    # AB-MIL hidden width used for patch pooling of hierarchical bags
    abmil_hidden: int = 64
    # which queries CSA attends to: the incoming block state ("previous") or
    # the block's post-self-attention queries ("current")
    csa_source: str = "previous"
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "ppeg_kernels", tuple(int(k) for k in self.ppeg_kernels))
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 4 * self.model_dim)
        if self.instance_dim is None:
            object.__setattr__(self, "instance_dim", self.model_dim)
        self.validate()

    def validate(self) -> None:
        positive = ("num_blocks", "num_queries", "model_dim", "num_heads", "cross_attn_every",
                    "ffn_hidden", "low_rank_probe_size", "instance_dim", "abmil_hidden")
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if any(k < 1 or k % 2 == 0 for k in self.ppeg_kernels):
            raise ConfigError(f"ppeg kernel sizes must be odd and positive: {self.ppeg_kernels}")
        if self.csa_source not in CSA_SOURCES:
            raise ConfigError(f"csa_source must be one of {CSA_SOURCES}, got {self.csa_source!r}")
        for flag in ("use_csa", "use_ppeg"):
            if not isinstance(getattr(self, flag), bool):
                raise ConfigError(f"{flag} must be a boolean")

    def has_cross_attention(self, block_index: int) -> bool:
        return block_index % self.cross_attn_every == 0

    def replace(self, **changes) -> "MivpgConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ppeg_kernels"] = list(self.ppeg_kernels)
        return d

    def digest(self) -> str:
        """sha256 over canonical JSON, stable across platforms."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "MivpgConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "MivpgConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def desk(cls, **overrides) -> "MivpgConfig":
        """Small default used by tests: L=4, R=8, D=64, h=4, G=2."""
        base = dict(num_blocks=4, num_queries=8, model_dim=64, num_heads=4, cross_attn_every=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def qformer(cls, **overrides) -> "MivpgConfig":
        """QFormer-sized stack: 12 blocks, 32 queries."""
        base = dict(num_blocks=12, num_queries=32)
        base.update(overrides)
        return cls(**base)
