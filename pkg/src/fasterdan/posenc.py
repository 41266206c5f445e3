"""Fixed sinusoidal positional encodings (1D, 2D, and the two-index document encoding)."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

DEFAULT_L_MAX = 256
DEFAULT_N_MAX = 256
DEFAULT_N_MAX_FLAT = 3000

VARIANTS = ("concat", "sum")


def _frequencies(d: int) -> np.ndarray:
    return 1.0 / np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)


def sinusoid(pos: np.ndarray, d: int) -> np.ndarray:
    if d <= 0 or d % 2:
        raise ValueError(f"encoding width must be a positive even number, got {d}")
    angles = np.asarray(pos, dtype=np.float64)[..., None] * _frequencies(d)
    out = np.empty(angles.shape[:-1] + (d,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def pe_1d(pos: int, d: int) -> np.ndarray:
    """channel 2k = sin(pos / 10000^(2k/d)), channel 2k+1 = cos(same)."""
    if pos < 0:
        raise ValueError("position must be non-negative")
    return sinusoid(np.array(pos), d)


@lru_cache(maxsize=32)
def pe_1d_table(n: int, d: int) -> np.ndarray:
    table = sinusoid(np.arange(n), d)
    table.flags.writeable = False
    return table


def pe_1d_half(pos: int, d: int) -> np.ndarray:
    return pe_1d(pos, d // 2)


@lru_cache(maxsize=32)
def pe_2d(h: int, w: int, d: int) -> np.ndarray:
    """[h, w, d]; first d/2 channels encode the row, last d/2 the column."""
    if d % 4:
        raise ValueError(f"2D encoding width must be divisible by 4, got {d}")
    rows = sinusoid(np.arange(h), d // 2)
    cols = sinusoid(np.arange(w), d // 2)
    table = np.concatenate(
        [np.broadcast_to(rows[:, None, :], (h, w, d // 2)),
         np.broadcast_to(cols[None, :, :], (h, w, d // 2))],
        axis=-1,
    )
    table.flags.writeable = False
    return table


def pe_doc(
    j: int,
    i: int,
    d: int,
    variant: str = "concat",
    l_max: int = DEFAULT_L_MAX,
    n_max: int = DEFAULT_N_MAX,
) -> np.ndarray:
    """Encoding of the token at line ``j``, in-line position ``i``."""
    if not (0 <= j < l_max and 0 <= i < n_max):
        raise ValueError(f"position ({j}, {i}) outside caps ({l_max}, {n_max})")
    return pe_doc_batch(np.array([j]), np.array([i]), d, variant)[0]


def pe_doc_batch(lines: np.ndarray, cols: np.ndarray, d: int, variant: str = "concat") -> np.ndarray:
    lines = np.asarray(lines)
    cols = np.asarray(cols)
    if variant == "concat":
        if d % 4:
            raise ValueError(f"concatenated encoding needs d divisible by 4, got {d}")
        return np.concatenate([sinusoid(lines, d // 2), sinusoid(cols, d // 2)], axis=-1)
    if variant == "sum":
        return sinusoid(lines, d) + sinusoid(cols, d)
    raise ValueError(f"unknown document encoding variant {variant!r}")
