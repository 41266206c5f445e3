import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fasterdan.posenc import pe_1d, pe_1d_half, pe_1d_table, pe_2d, pe_doc

ALTERNATING = [0, 1, 0, 1, 0, 1, 0, 1]


def reference_pe(pos, d):
    # straight from the formula, one channel at a time
    out = []
    for c in range(d):
        k = c // 2
        angle = pos / 10000 ** (2 * k / d)
        out.append(math.sin(angle) if c % 2 == 0 else math.cos(angle))
    return np.array(out)


def test_origin_alternates():
    np.testing.assert_array_equal(pe_1d(0, 8), ALTERNATING)


def test_first_channel_of_pos_one():
    assert pe_1d(1, 2)[0] == pytest.approx(0.841471, abs=1e-6)


@given(st.integers(0, 5000), st.sampled_from([2, 4, 8, 16, 64]))
def test_matches_scalar_formula(pos, d):
    np.testing.assert_allclose(pe_1d(pos, d), reference_pe(pos, d), atol=1e-12)


@given(st.integers(0, 10**6), st.sampled_from([2, 8, 32]))
def test_bounded(pos, d):
    assert np.all(np.abs(pe_1d(pos, d)) <= 1.0)


def test_odd_width_rejected():
    with pytest.raises(ValueError):
        pe_1d(3, 7)
    with pytest.raises(ValueError):
        pe_1d(-1, 8)


def test_table_rows_and_read_only():
    table = pe_1d_table(10, 8)
    np.testing.assert_allclose(table[7], pe_1d(7, 8))
    with pytest.raises(ValueError):
        table[0, 0] = 5.0


class TestTwoDimensional:
    def test_origin(self):
        np.testing.assert_array_equal(pe_2d(1, 1, 8)[0, 0], ALTERNATING)

    @given(st.integers(0, 9), st.integers(0, 14))
    def test_row_then_column_halves(self, r, c):
        table = pe_2d(10, 15, 16)
        np.testing.assert_allclose(table[r, c, :8], pe_1d_half(r, 16))
        np.testing.assert_allclose(table[r, c, 8:], pe_1d_half(c, 16))

    def test_transposed_positions_differ(self):
        table = pe_2d(2, 3, 8)
        assert not np.allclose(table[0, 1], table[1, 0])

    def test_width_must_divide_by_four(self):
        with pytest.raises(ValueError):
            pe_2d(2, 2, 6)


class TestDocumentEncoding:
    def test_origin(self):
        np.testing.assert_array_equal(pe_doc(0, 0, 8), ALTERNATING)

    @given(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255))
    def test_line_half_ignores_position(self, j, i, k):
        np.testing.assert_array_equal(pe_doc(j, i, 16)[:8], pe_doc(j, k, 16)[:8])

    def test_sum_variant(self):
        np.testing.assert_allclose(pe_doc(2, 5, 16, "sum"), reference_pe(2, 16) + reference_pe(5, 16), atol=1e-12)

    @given(st.integers(0, 100), st.integers(0, 100))
    def test_sum_variant_is_symmetric(self, a, b):
        np.testing.assert_array_equal(pe_doc(a, b, 16, "sum"), pe_doc(b, a, 16, "sum"))

    def test_concat_injective_on_small_grid(self):
        seen = {pe_doc(j, i, 8).round(9).tobytes() for j in range(64) for i in range(64)}
        assert len(seen) == 64 * 64

    def test_caps(self):
        with pytest.raises(ValueError):
            pe_doc(256, 0, 8)
        with pytest.raises(ValueError):
            pe_doc(0, 10, 8, n_max=10)
        with pytest.raises(ValueError):
            pe_doc(0, 0, 8, "product")
