"""Grid runner for the structural properties of the pipeline.

Each grid cell (scenario, CSA on/off, PPEG on/off) gets fresh random
parameters and a random bag, then four checks:

* ``perm_invariance``: reordering instances, images or patches leaves the
  final queries unchanged. Not applicable with PPEG (skip).
* ``csa_equivariance``: the CSA bag update commutes with instance reordering.
  Skipped when CSA is off.
* ``attention_stochastic``: every exported attention row is a distribution.
* ``positional_sensitivity``: whether reordering changes the output. With
  PPEG the change must be detected; without it, it must not be.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .. import tensor as T
from ..config import MivpgConfig
from ..errors import ConfigError
from ..model import Bag, csa_update, init_params, mivpg_forward
from ..rng import Rng

INVARIANTS = ("perm_invariance", "csa_equivariance", "attention_stochastic", "positional_sensitivity")
INVARIANCE_TOL = 1e-9
SENSITIVITY_TOL = 1e-6
STOCHASTIC_TOL = 1e-9
EXHAUSTIVE_MAX = 5
RANDOM_PERMS = 100


@dataclass(frozen=True)
class GridCell:
    scenario: int
    use_csa: bool
    use_ppeg: bool


@dataclass
class InvariantRow:
    cell: GridCell
    invariant: str
    status: str  # pass | fail | skip
    max_abs: float
    checked: int
    detail: str = ""


def default_grid() -> list[GridCell]:
    return [GridCell(s, c, p) for s in (1, 2, 3) for c in (True, False) for p in (True, False)]


def parse_grid(text: str) -> list[GridCell]:
    """``default`` or ``scenario=1,2;csa=on,off;ppeg=off`` (omitted axes take all values)."""
    text = text.strip()
    if text in ("", "default"):
        return default_grid()
    axes = {"scenario": [1, 2, 3], "csa": [True, False], "ppeg": [True, False]}
    switch = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        key, sep, values = part.partition("=")
        key = key.strip()
        if not sep or key not in axes:
            raise ConfigError(f"bad grid axis {part!r}; expected scenario=, csa= or ppeg=")
        vals = [v.strip().lower() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"grid axis {key!r} has no values")
        try:
            axes[key] = [int(v) for v in vals] if key == "scenario" else [switch[v] for v in vals]
        except (KeyError, ValueError):
            raise ConfigError(f"bad value in grid axis {part!r}") from None
        if key == "scenario" and not set(axes[key]) <= {1, 2, 3}:
            raise ConfigError(f"scenario must be 1, 2 or 3: {part!r}")
    return [GridCell(s, c, p) for s in axes["scenario"] for c in axes["csa"] for p in axes["ppeg"]]


# ------------------------------------------------------------ permutations

def permutations(n: int, rng: Rng, count: int = RANDOM_PERMS) -> Iterator[np.ndarray]:
    """All non-identity orderings when n <= 5, else ``count`` random ones."""
    if n <= EXHAUSTIVE_MAX:
        for p in itertools.islice(itertools.permutations(range(n)), 1, None):
            yield np.array(p)
    else:
        for _ in range(count):
            yield rng.permutation(n)


def permute_bag(bag: Bag, image_perm: Sequence[int], patch_perms: Sequence[np.ndarray] | None = None) -> Bag:
    """Reorder images (or the instances of a flat bag), then patches within each image.

    ``patch_perms[i]`` applies to the image that ends up at position ``i``.
    """
    if not bag.hierarchical:
        return Bag.flat(bag.groups[0][np.asarray(image_perm)])
    groups = [bag.groups[i] for i in image_perm]
    if patch_perms is not None:
        groups = [g[p] for g, p in zip(groups, patch_perms)]
    return Bag.nested(groups)


def bag_permutations(bag: Bag, rng: Rng, count: int = RANDOM_PERMS) -> Iterator[Bag]:
    """Reorderings of a bag at every level it has.

    Top-level orderings are exhaustive for small bags. Hierarchical bags also
    get a random patch shuffle per image, and one pass that only shuffles
    patches.
    """
    n = bag.num_images if bag.hierarchical else bag.groups[0].shape[0]
    for perm in permutations(n, rng, count):
        patch_perms = None
        if bag.hierarchical:
            patch_perms = [rng.permutation(bag.groups[i].shape[0]) for i in perm]
        yield permute_bag(bag, perm, patch_perms)
    if bag.hierarchical and max(bag.patch_counts) > 1:
        yield permute_bag(bag, range(n), [rng.permutation(c) for c in bag.patch_counts])


def random_bag(scenario: int, dim: int, rng: Rng, size: int | None = None, patches=(2, 6)) -> Bag:
    n = size if size is not None else int(rng.integers(3, EXHAUSTIVE_MAX + 1))
    if scenario == 1:
        return Bag.flat(rng.normal((n, dim)))
    if scenario == 2:
        return Bag.nested([rng.normal((1, dim)) for _ in range(n)])
    return Bag.nested([rng.normal((int(rng.integers(patches[0], patches[1] + 1)), dim)) for _ in range(n)])


def max_perm_deviation(bag: Bag, config: MivpgConfig, params, rng: Rng, count: int = RANDOM_PERMS) -> tuple[float, int]:
    base, _ = mivpg_forward(bag, config, params)
    worst, n = 0.0, 0
    for shuffled in bag_permutations(bag, rng, count):
        out, _ = mivpg_forward(shuffled, config, params)
        worst = max(worst, float(np.max(np.abs(out.data - base.data))))
        n += 1
    return worst, n


def csa_equivariance_error(bag: np.ndarray, queries: np.ndarray, params, perm: np.ndarray) -> float:
    ref = csa_update(T.tensor(bag), T.tensor(queries), params).data
    out = csa_update(T.tensor(bag[perm]), T.tensor(queries), params).data
    return float(np.max(np.abs(out - ref[perm])))


# -------------------------------------------------------------------- suite

def suite_config(cell: GridCell, base: MivpgConfig | None = None) -> MivpgConfig:
    base = base or MivpgConfig.desk(instance_dim=16, abmil_hidden=16)
    return base.replace(use_csa=cell.use_csa, use_ppeg=cell.use_ppeg)


def _check_cell(cell: GridCell, config: MivpgConfig, seed: int) -> list[InvariantRow]:
    rng = Rng(seed)
    params = init_params(config, rng)
    if config.use_ppeg:
        # desk-scale PPEG kernels are small; make position effects clearly visible
        for k in params.ppeg.kernels:
            k.data = rng.normal(k.shape)
    bag = random_bag(cell.scenario, config.instance_dim, rng)
    rows = []

    deviation, checked = max_perm_deviation(bag, config, params, rng)
    if config.use_ppeg:
        rows.append(InvariantRow(cell, "perm_invariance", "skip", deviation, checked, "order-dependent by design"))
    else:
        status = "pass" if deviation < INVARIANCE_TOL else "fail"
        rows.append(InvariantRow(cell, "perm_invariance", status, deviation, checked))

    if config.use_csa:
        m = bag.num_images
        x = rng.normal((max(m, 4), config.model_dim))
        q = rng.normal((config.num_queries, config.model_dim))
        errs = [csa_equivariance_error(x, q, params.blocks[0].csa, p) for p in permutations(len(x), rng)]
        worst = max(errs)
        rows.append(InvariantRow(cell, "csa_equivariance", "pass" if worst < INVARIANCE_TOL else "fail",
                                 worst, len(errs)))
    else:
        rows.append(InvariantRow(cell, "csa_equivariance", "skip", 0.0, 0, "CSA disabled"))

    _, diag = mivpg_forward(bag, config, params)
    dists = [m.weights for m in diag.cross_maps.values()] + list(diag.patch_alphas or [])
    worst = max(max(float(np.max(np.abs(w.sum(axis=-1) - 1.0))) for w in dists),
                max(float(-w.min()) for w in dists), 0.0)
    rows.append(InvariantRow(cell, "attention_stochastic", "pass" if worst < STOCHASTIC_TOL else "fail",
                             worst, len(dists)))

    base, _ = mivpg_forward(bag, config, params)
    changed = 0
    checked = 0
    n = bag.num_images if bag.hierarchical else bag.groups[0].shape[0]
    for perm in permutations(n, rng):
        out, _ = mivpg_forward(permute_bag(bag, perm), config, params)
        changed += int(np.max(np.abs(out.data - base.data)) > SENSITIVITY_TOL)
        checked += 1
    detected = changed > 0 and changed >= 0.99 * checked
    if config.use_ppeg:
        status = "pass" if detected else "fail"
        detail = f"detected {changed}/{checked}"
    else:
        status = "pass" if changed == 0 else "fail"
        detail = f"not detected {checked - changed}/{checked}"
    rows.append(InvariantRow(cell, "positional_sensitivity", status, float(changed) / max(checked, 1), checked, detail))
    return rows


def run_invariant_suite(
    grid: Iterable[GridCell] | None = None,
    seed: int = 0,
    base_config: MivpgConfig | None = None,
) -> list[InvariantRow]:
    """One row per (cell, invariant); cells are seeded independently from ``seed``."""
    grid = list(default_grid() if grid is None else grid)
    root = Rng(seed)
    rows: list[InvariantRow] = []
    for cell in grid:
        rows.extend(_check_cell(cell, suite_config(cell, base_config), root.next_u64()))
    return rows


def suite_passed(rows: Sequence[InvariantRow]) -> bool:
    return all(r.status != "fail" for r in rows)


REPORT_FIELDS = ("scenario", "use_csa", "use_ppeg", "invariant", "status", "max_abs", "checked", "detail")


def report_csv(rows: Sequence[InvariantRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    for r in rows:
        writer.writerow([r.cell.scenario, int(r.cell.use_csa), int(r.cell.use_ppeg), r.invariant,
                         r.status, repr(r.max_abs), r.checked, r.detail])
    return buf.getvalue()
