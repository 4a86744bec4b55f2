"""Write attention weights as CSV for inspection.

``cross_attn_block<l>.csv`` (one per block with cross-attention)
    columns ``head, query, w_0 .. w_{N-1}``: the weight query ``query`` of head
    ``head`` puts on image (or flat-bag instance) ``n``. One row per (head, query).
``patch_weights_image<n>.csv`` (hierarchical bags only, one per image)
    columns ``patch, alpha``: AB-MIL weight of each patch within image ``n``.

Every weight row (and every alpha column) sums to 1.
"""

from __future__ import annotations

import csv
from pathlib import Path

from ..config import MivpgConfig
from ..model import Bag, MivpgParams, mivpg_forward


def export_attention(bag: Bag, config: MivpgConfig, params: MivpgParams, out_dir) -> list[Path]:
    """Run one forward pass and dump its attention; returns the files written.

    Raises ``OSError`` when ``out_dir`` cannot be created or written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, diag = mivpg_forward(bag, config, params)
    written = []
    for block, amap in sorted(diag.cross_maps.items()):
        path = out / f"cross_attn_block{block}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            heads, queries, n = amap.weights.shape
            w.writerow(["head", "query"] + [f"w_{i}" for i in range(n)])
            for h in range(heads):
                for q in range(queries):
                    w.writerow([h, q] + [repr(float(v)) for v in amap.weights[h, q]])
        written.append(path)
    for i, alpha in enumerate(diag.patch_alphas or []):
        path = out / f"patch_weights_image{i}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patch", "alpha"])
            for p, a in enumerate(alpha.reshape(-1)):
                w.writerow([p, repr(float(a))])
        written.append(path)
    return written
