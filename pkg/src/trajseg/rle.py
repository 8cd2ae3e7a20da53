"""Run-length text format for binary masks.

Line 1: "RLE v1 H W". Line 2: space-separated run lengths, row-major,
alternating zero-run / one-run and always starting with the zero count
(which may be 0). Runs must sum to H*W. UTF-8, LF line endings.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError, ShapeError

HEADER = "RLE v1"


def encode_mask(mask: np.ndarray) -> str:
    mask = np.asarray(mask)
    if mask.ndim != 2 or 0 in mask.shape:
        raise ShapeError(f"expected a non-empty (H, W) mask, got shape {mask.shape}")
    flat = mask.astype(bool).reshape(-1)
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    h, w = mask.shape
    return f"{HEADER} {h} {w}\n" + " ".join(str(int(r)) for r in runs) + "\n"


def decode_mask(text: str) -> np.ndarray:
    lines = text.split("\n")
    if len(lines) < 2:
        raise FormatError("mask text needs a header line and a run line")
    head = lines[0].split()
    if len(head) != 4 or " ".join(head[:2]) != HEADER:
        raise FormatError(f"bad header {lines[0]!r}")
    try:
        h, w = int(head[2]), int(head[3])
    except ValueError:
        raise FormatError(f"non-integer dimensions in header {lines[0]!r}") from None
    if h <= 0 or w <= 0:
        raise FormatError(f"non-positive dimensions {h}x{w}")
    try:
        runs = [int(tok) for tok in lines[1].split()]
    except ValueError:
        raise FormatError("runs must be integers") from None
    if any(r < 0 for r in runs):
        raise FormatError("runs must be non-negative")
    if sum(runs) != h * w:
        raise FormatError(f"runs sum to {sum(runs)}, expected {h * w}")
    values = np.arange(len(runs)) % 2  # zeros run first, then alternate
    return np.repeat(values.astype(bool), runs).reshape(h, w)


def write_mask(path, mask: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(encode_mask(mask))


def read_mask(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        return decode_mask(fh.read())
