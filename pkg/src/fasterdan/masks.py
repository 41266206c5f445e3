"""Attention visibility matrices for the two-pass decoder.

Tokens are addressed by grid coordinates ``(j, i)``: line ``j``, in-line
position ``i``. Builders that take a :class:`LineSegmentedTarget` prepend the
``<sot>`` row, so target line ``k`` sits at row ``k + 1``. A line of ``n``
tokens occupies columns ``0..n`` (column 1 is the duplicated first token),
except unit lines (``n == 1``) which only occupy column 0. Pad cells have no
coordinate and therefore never appear as keys or queries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .vocab import LineSegmentedTarget

RULES = ("base", "single_line", "first_pass_ctx")

Coords = tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class AttentionMask:
    visible: np.ndarray  # [Q, K], True = may attend
    queries: Coords
    keys: Coords

    @property
    def shape(self) -> tuple[int, int]:
        return self.visible.shape

    def to_pbm(self) -> str:
        """Plain PBM (P1) dump, one row per query, 1 = visible."""
        q, k = self.visible.shape
        rows = [" ".join("1" if v else "0" for v in row) for row in self.visible]
        return "\n".join([f"P1\n{k} {q}", *rows]) + "\n"


def grid_lengths(seg: Union[LineSegmentedTarget, Sequence[int]]) -> list[int]:
    if isinstance(seg, LineSegmentedTarget):
        return [1, *seg.lengths]
    return list(seg)


def grid_coords(lengths: Sequence[int]) -> Coords:
    coords = []
    for j, n in enumerate(lengths):
        coords.append((j, 0))
        if n >= 2:
            coords.extend((j, i) for i in range(1, n + 1))
    return tuple(coords)


def rule_visible(queries: np.ndarray, keys: np.ndarray, rule: str = "base") -> np.ndarray:
    """Visibility of key coords to query coords under a named rule.

    Line-initial queries ``(j, 0)`` always see the line-initial keys of lines
    ``<= j``. Completion queries ``(j, i >= 1)`` see, depending on ``rule``:

    * ``base``: every ``(l, k)`` with ``k <= i``
    * ``single_line``: ``(j, k)`` with ``k <= i``
    * ``first_pass_ctx``: ``(j, k)`` with ``k <= i`` plus every ``(l, 0)``
    """
    queries = np.asarray(queries, dtype=np.int64).reshape(-1, 2)
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 2)
    qj, qi = queries[:, 0:1], queries[:, 1:2]
    kl, kk = keys[None, :, 0], keys[None, :, 1]
    first = (qi == 0) & (kk == 0) & (kl <= qj)
    prefix = kk <= qi
    if rule == "base":
        second = prefix
    elif rule == "single_line":
        second = prefix & (kl == qj)
    elif rule == "first_pass_ctx":
        second = (prefix & (kl == qj)) | (kk == 0)
    else:
        raise ValueError(f"unknown mask rule {rule!r}")
    return first | ((qi >= 1) & second)


def _build(queries: Coords, keys: Coords, rule: str = "base") -> AttentionMask:
    visible = rule_visible(np.array(queries), np.array(keys), rule)
    return AttentionMask(visible, queries, keys)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def first_pass_mask(L: int) -> AttentionMask:
    if L < 1:
        raise ValueError("first pass needs at least one line")
    coords = tuple((j, 0) for j in range(L))
    return AttentionMask(causal_mask(L), coords, coords)


def second_pass_mask(lengths: Sequence[int], upto: int) -> AttentionMask:
    """Completion queries up to column ``upto`` against every grid token."""
    if upto < 1:
        raise ValueError("second pass starts at column 1")
    lengths = list(lengths)
    queries = tuple(
        (j, i) for j, n in enumerate(lengths) if n >= 2 for i in range(1, min(upto, n) + 1)
    )
    return _build(queries, grid_coords(lengths))


def joint_training_mask(seg: Union[LineSegmentedTarget, Sequence[int]]) -> AttentionMask:
    coords = grid_coords(grid_lengths(seg))
    return _build(coords, coords)


def ablation_mask(seg: Union[LineSegmentedTarget, Sequence[int]], variant: str) -> AttentionMask:
    if variant not in ("single_line", "first_pass_ctx"):
        raise ValueError(f"unknown ablation variant {variant!r}")
    coords = grid_coords(grid_lengths(seg))
    return _build(coords, coords, variant)
