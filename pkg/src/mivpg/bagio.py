"""Plain-text bag files.

Layout::

    MIVPG-BAG v1
    N <n>
    P <p> D <d>
    <p lines of d space-separated floats>
    ...            (one P/D header plus rows per image)

A flat bag is written as a single image (N=1), so reading a one-image file
always yields a flat bag. Floats are written with ``repr`` and round-trip
bit-exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ShapeError
from .model import Bag

MAGIC = "MIVPG-BAG v1"


class BagFormatError(ShapeError):
    pass


def format_bag(bag: Bag) -> str:
    lines = [MAGIC, f"N {bag.num_images}"]
    for g in bag.groups:
        lines.append(f"P {g.shape[0]} D {g.shape[1]}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in g)
    return "\n".join(lines) + "\n"


def parse_bag(text: str) -> Bag:
    lines = [ln.strip() for ln in text.splitlines()]
    while lines and not lines[-1]:
        lines.pop()
    if not lines or lines[0] != MAGIC:
        raise BagFormatError(f"missing {MAGIC!r} header")
    pos = 1

    def header(expected: tuple[str, ...]) -> list[int]:
        nonlocal pos
        if pos >= len(lines):
            raise BagFormatError(f"unexpected end of file, wanted {' '.join(expected)} header")
        parts = lines[pos].split()
        if len(parts) != 2 * len(expected) or tuple(parts[::2]) != expected:
            raise BagFormatError(f"line {pos + 1}: expected {' '.join(k + ' <int>' for k in expected)}, got {lines[pos]!r}")
        try:
            values = [int(v) for v in parts[1::2]]
        except ValueError:
            raise BagFormatError(f"line {pos + 1}: non-integer size in {lines[pos]!r}") from None
        pos += 1
        return values

    (n,) = header(("N",))
    if n < 1:
        raise BagFormatError("a bag needs at least one image")
    groups = []
    for _ in range(n):
        p, d = header(("P", "D"))
        if p < 1 or d < 1:
            raise BagFormatError(f"line {pos}: sizes must be positive")
        if pos + p > len(lines):
            raise BagFormatError("unexpected end of file inside an image block")
        try:
            rows = [[float(v) for v in lines[pos + i].split()] for i in range(p)]
        except ValueError as exc:
            raise BagFormatError(f"bad float near line {pos + 1}: {exc}") from None
        if any(len(r) != d for r in rows):
            raise BagFormatError(f"image block at line {pos}: every row needs {d} values")
        groups.append(np.array(rows, dtype=np.float64))
        pos += p
    if pos != len(lines):
        raise BagFormatError(f"trailing content at line {pos + 1}")
    return Bag.flat(groups[0]) if n == 1 else Bag.nested(groups)


def write_bag(bag: Bag, path) -> None:
    Path(path).write_text(format_bag(bag))


def read_bag(path) -> Bag:
    return parse_bag(Path(path).read_text())
