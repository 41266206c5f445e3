"""How a decoding mode / ablation variant positions and masks its tokens.

Sequential decoding addresses the flat sequence as coordinates ``(0, t)``;
two-pass decoding uses grid coordinates ``(line, position)``.

The ``no_line_pe`` variant gives every token its index in the serialized
document instead, which depends on the lengths of all earlier rows. Training
knows them; a parallel decoder only knows the lengths decoded so far.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import masks
from .posenc import sinusoid, pe_doc_batch

MODES = ("dan", "fasterdan")
VARIANTS = ("base", "no_line_pe", "single_line_ctx", "first_pass_ctx", "sum_pe")

_RULES = {
    "base": "base",
    "no_line_pe": "base",
    "sum_pe": "base",
    "single_line_ctx": "single_line",
    "first_pass_ctx": "first_pass_ctx",
}


def flat_index(lines, cols, row_lengths) -> np.ndarray:
    """Serialized position of grid cells; the duplicated first token at
    column 1 shares the index of column 0."""
    if row_lengths is None:
        raise ValueError("no_line_pe positions need the row lengths")
    starts = np.concatenate([[0], np.cumsum(np.asarray(row_lengths, dtype=np.int64))])
    lines = np.asarray(lines, dtype=np.int64)
    if lines.size and lines.max() >= len(row_lengths):
        raise ValueError("row index beyond the given row lengths")
    return starts[lines] + np.maximum(np.asarray(cols, dtype=np.int64) - 1, 0)


@dataclass(frozen=True)
class Scheme:
    mode: str = "fasterdan"
    variant: str = "base"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.mode == "dan" and self.variant != "base":
            raise ValueError(f"variant {self.variant!r} requires mode fasterdan")

    def positions(self, coords, d: int, row_lengths=None) -> np.ndarray:
        """``row_lengths[j]`` is the token count of grid row ``j`` (row 0 is
        ``<sot>``); only ``no_line_pe`` reads it."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        lines, cols = coords[:, 0], coords[:, 1]
        if self.mode == "dan":
            return sinusoid(cols, d)
        if self.variant == "no_line_pe":
            return sinusoid(flat_index(lines, cols, row_lengths), d)
        return pe_doc_batch(lines, cols, d, "sum" if self.variant == "sum_pe" else "concat")

    def visible(self, queries, keys) -> np.ndarray:
        if self.mode == "dan":
            q = np.asarray(queries, dtype=np.int64).reshape(-1, 2)[:, 1]
            k = np.asarray(keys, dtype=np.int64).reshape(-1, 2)[:, 1]
            return k[None, :] <= q[:, None]
        return masks.rule_visible(queries, keys, _RULES[self.variant])
