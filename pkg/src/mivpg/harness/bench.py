"""Scaling benchmark for bag-level attention: wall time and exact MAC counts.

Three mechanisms update an (M x D) bag:

* ``full_sa``: pairwise self-attention over instances.
* ``low_rank_sa``: two-stage attention through R probe rows.
* ``csa``: every instance attends to the R query embeddings.

MACs come from the instrumented ``matmul``; the ``attn`` tag isolates the
score and weighting products, which carry the M-dependence being compared.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..attention import ATTN, AttentionParams
from ..errors import ConfigError
from ..model import LowRankParams, csa_update, full_self_attention, low_rank_self_attention
from ..rng import Rng

MECHANISMS = ("full_sa", "low_rank_sa", "csa")
MODES = ("time", "mac")
# bound on one chunk of the (heads x rows x M) score tensor, in float64 entries
CHUNK_ENTRIES = 1 << 24


@dataclass
class BenchRow:
    m: int
    median_time: float | None  # seconds; None in MAC mode or when capped
    attn_macs: int | None
    total_macs: int | None
    status: str = "ok"  # ok | capped


@dataclass
class BenchResult:
    mechanism: str
    r: int
    dim: int
    repeats: int
    mode: str
    rows: list[BenchRow] = field(default_factory=list)

    @property
    def time_slope(self) -> float:
        pts = [(r.m, r.median_time) for r in self.rows if r.median_time is not None]
        return loglog_slope(*zip(*pts)) if len(pts) >= 2 else float("nan")

    @property
    def mac_slope(self) -> float:
        pts = [(r.m, r.attn_macs) for r in self.rows if r.attn_macs is not None]
        return loglog_slope(*zip(*pts)) if len(pts) >= 2 else float("nan")

    def row(self, m: int) -> BenchRow:
        return next(r for r in self.rows if r.m == m)

    def mac_ratios(self) -> list[float]:
        """attn MAC ratio between consecutive rows."""
        macs = [r.attn_macs for r in self.rows]
        return [b / a for a, b in zip(macs, macs[1:])]


def loglog_slope(ms: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(M)."""
    x = np.log(np.asarray(ms, dtype=np.float64))
    y = np.log(np.asarray(ys, dtype=np.float64))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


# ------------------------------------------------------- closed-form counts

def attention_macs(n_q: int, n_k: int, dim: int) -> int:
    """Score and weighting products of one multi-head attention (heads cancel)."""
    return 2 * n_q * n_k * dim


def projection_macs(n_q: int, n_k: int, dim: int) -> int:
    """Q and output projections on the query side, K and V on the key side."""
    return 2 * n_q * dim * dim + 2 * n_k * dim * dim


def closed_form_macs(mechanism: str, m: int, r: int, dim: int) -> tuple[int, int]:
    """(attn, total) MACs of one forward pass of ``mechanism``."""
    if mechanism == "full_sa":
        parts = [(m, m)]
    elif mechanism == "csa":
        parts = [(m, r)]
    elif mechanism == "low_rank_sa":
        parts = [(r, m), (m, r)]
    else:
        raise ConfigError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")
    attn = sum(attention_macs(q, k, dim) for q, k in parts)
    return attn, attn + sum(projection_macs(q, k, dim) for q, k in parts)


# ---------------------------------------------------------------- runners

def make_runner(mechanism: str, r: int, dim: int, heads: int, rng: Rng):
    """Return ``run(bag)`` for one mechanism with fresh random parameters."""
    if mechanism == "full_sa":
        params = AttentionParams.init(dim, heads, rng)

        def run(bag):
            chunk = max(1, CHUNK_ENTRIES // (heads * bag.shape[0]))
            return full_self_attention(bag, params, query_chunk=chunk if chunk < bag.shape[0] else None)
    elif mechanism == "csa":
        params = AttentionParams.init(dim, heads, rng)
        queries = T.tensor(rng.normal((r, dim)))

        def run(bag):
            return csa_update(bag, queries, params)
    elif mechanism == "low_rank_sa":
        params = LowRankParams.init(dim, r, heads, rng)

        def run(bag):
            return low_rank_self_attention(bag, params.probe, params)
    else:
        raise ConfigError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")
    return run


def bench_complexity(
    mechanism: str,
    m_list: Sequence[int],
    r: int = 32,
    repeats: int = 5,
    mode: str = "time",
    dim: int = 64,
    heads: int = 4,
    seed: int = 0,
) -> BenchResult:
    """Time (median of ``repeats``) and count one forward pass per bag size.

    A bag size that runs out of memory yields a ``capped`` row.
    """
    if mechanism not in MECHANISMS:
        raise ConfigError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    m_list = [int(m) for m in m_list]
    if not m_list or any(m < 1 for m in m_list) or m_list != sorted(set(m_list)):
        raise ConfigError(f"m_list must be strictly ascending positive sizes, got {m_list}")
    if repeats < 5:
        raise ConfigError(f"need at least 5 repeats, got {repeats}")
    if r < 1 or dim % heads:
        raise ConfigError("r must be positive and dim divisible by heads")

    rng = Rng(seed)
    run = make_runner(mechanism, r, dim, heads, rng)
    result = BenchResult(mechanism, r, dim, repeats, mode)
    bags = {}
    for m in m_list:
        try:
            bag = T.tensor(rng.normal((m, dim)))
            # the counted pass doubles as warm-up for the timed rounds
            with T.mac_counter() as counter:
                run(bag)
            bags[m] = bag
            result.rows.append(BenchRow(m, None, counter[ATTN], counter.total))
        except MemoryError:
            result.rows.append(BenchRow(m, None, None, None, status="capped"))
    if mode == "time":
        # interleave sizes within each round so drift in machine speed hits
        # every size alike instead of skewing the fitted slope
        times = {m: [] for m in bags}
        for _ in range(repeats):
            for m in list(bags):
                try:
                    start = time.perf_counter()
                    run(bags[m])
                    times[m].append(time.perf_counter() - start)
                except MemoryError:
                    del bags[m]
                    times[m] = []
        for row in result.rows:
            if times.get(row.m):
                row.median_time = statistics.median(times[row.m])
            elif row.m in times:
                row.status = "capped"
    return result


BENCH_FIELDS = ("mechanism", "M", "R", "D", "repeats", "median_time_s", "attn_macs", "total_macs", "status")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def bench_csv(results: Sequence[BenchResult]) -> str:
    """Per-size rows, then one ``slope`` row per mechanism.

    In the slope row ``median_time_s`` holds the time slope (empty in MAC mode)
    and ``attn_macs`` the MAC slope.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_FIELDS)
    for res in results:
        for row in res.rows:
            w.writerow([res.mechanism, row.m, res.r, res.dim, res.repeats, _fmt(row.median_time),
                        _fmt(row.attn_macs), _fmt(row.total_macs), row.status])
        time_slope = res.time_slope if res.mode == "time" else None
        w.writerow([res.mechanism, "slope", res.r, res.dim, res.repeats, _fmt(time_slope),
                    _fmt(res.mac_slope), "", "fit"])
    return buf.getvalue()
