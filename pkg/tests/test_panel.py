import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from dfmvi.errors import DomainError, PanelFormatError
from dfmvi.panel import (
    StandardizationRecord,
    TimeSeriesPanel,
    from_arrays,
    load_csv,
    standardize,
    unstandardize,
    write_csv,
)


def test_load_csv_single_missing_cell(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("a,b\n1.0,2.0\n3.0,\n5.0,6.0\n")
    pan = load_csv(path)
    assert pan.T == 3 and pan.n == 2
    assert pan.mask.sum() == 5
    assert not pan.mask[1, 1]
    assert np.isnan(pan.values[1, 1])
    assert pan.names == ("a", "b")


def test_load_csv_all_missing(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("a,b\n,\n,\n")
    pan = load_csv(path)
    assert_array_equal(pan.availability().counts, [0, 0])


def test_load_csv_bad_cell_names_row_and_column(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("a,b\n1.0,x7\n")
    with pytest.raises(PanelFormatError, match=r"row 2, column 'b'"):
        load_csv(path)


def test_load_csv_ragged_row(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("a,b\n1.0,2.0\n3.0\n")
    with pytest.raises(PanelFormatError, match="row 3"):
        load_csv(path)


def test_load_csv_custom_missing_token(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("a\nNA\n1.5\n")
    pan = load_csv(path, missing_token="NA")
    assert not pan.mask[0, 0] and pan.mask[1, 0]


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    values = rng.standard_normal((7, 3)) * np.pi
    values[rng.random((7, 3)) < 0.3] = np.nan
    pan = from_arrays(values, names=["x", "y", "z"])
    path = tmp_path / "rt.csv"
    write_csv(pan, path)
    back = load_csv(path)
    assert back.names == pan.names
    assert_array_equal(back.mask, pan.mask)
    assert_array_equal(back.values[back.mask], pan.values[pan.mask])


def test_panel_invariants_enforced():
    with pytest.raises(DomainError):
        TimeSeriesPanel(
            values=np.array([[1.0, np.nan]]),
            mask=np.array([[True, True]]),
            names=("a", "b"),
        )
    with pytest.raises(DomainError):
        TimeSeriesPanel(
            values=np.array([[1.0, 2.0]]),
            mask=np.array([[True, False]]),
            names=("a", "b"),
        )


def test_panel_immutable():
    pan = from_arrays(np.array([[1.0, 2.0]]))
    with pytest.raises(ValueError):
        pan.values[0, 0] = 9.0


def test_standardize_three_point_column():
    pan = from_arrays(np.array([[1.0], [2.0], [3.0]]))
    out, rec = standardize(pan)
    assert_allclose(out.values[:, 0], [-1.0, 0.0, 1.0])
    assert_allclose(rec.mean, [2.0])
    assert_allclose(rec.scale, [1.0])


def test_standardize_idempotent():
    rng = np.random.default_rng(0)
    pan = from_arrays(rng.standard_normal((40, 2)))
    once, _ = standardize(pan)
    twice, _ = standardize(once)
    assert_allclose(twice.values, once.values, atol=1e-12)


def test_standardize_with_missing_middle_cell():
    pan = from_arrays(np.array([[4.0], [np.nan], [6.0]]))
    out, _ = standardize(pan)
    expected = 1.0 / math.sqrt(2.0)  # mean 5, sample stdev sqrt(2)
    assert_allclose(out.values[0, 0], -expected)
    assert np.isnan(out.values[1, 0])
    assert_allclose(out.values[2, 0], expected)


def test_standardize_zero_variance_names_column():
    pan = from_arrays(np.array([[2.0, 1.0], [2.0, 4.0]]), names=["flat", "ok"])
    with pytest.raises(DomainError, match="flat"):
        standardize(pan)


def test_standardize_degenerate_column_passthrough():
    pan = from_arrays(np.array([[4.0, 1.0], [np.nan, 2.0], [np.nan, 3.0]]))
    out, rec = standardize(pan)
    assert rec.degenerate[0] and not rec.degenerate[1]
    assert_allclose(out.values[0, 0], 4.0)


def test_standardization_record_json_round_trip():
    rec = StandardizationRecord(
        mean=np.array([1.5, -2.0]),
        scale=np.array([0.5, 3.0]),
        degenerate=np.array([False, True]),
    )
    back = StandardizationRecord.from_json(rec.to_json())
    assert_array_equal(back.mean, rec.mean)
    assert_array_equal(back.scale, rec.scale)
    assert_array_equal(back.degenerate, rec.degenerate)


@settings(deadline=None, max_examples=40)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_standardize_unstandardize_identity(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(3, 12))
    n = int(rng.integers(1, 5))
    values = rng.standard_normal((T, n)) * rng.uniform(0.5, 5.0, n) + rng.uniform(
        -3, 3, n
    )
    mask = rng.random((T, n)) > 0.2
    # guarantee enough spread per column so standardization is defined
    for i in range(n):
        mask[:3, i] = True
    pan = from_arrays(np.where(mask, values, np.nan))
    out, rec = standardize(pan)
    restored = unstandardize(out.values, rec)
    assert_allclose(restored[mask], pan.values[mask], atol=1e-10, rtol=1e-10)


@settings(deadline=None, max_examples=40)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_availability_counts_match_mask_sums(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 15))
    n = int(rng.integers(1, 6))
    mask = rng.random((T, n)) > 0.5
    values = np.where(mask, rng.standard_normal((T, n)), np.nan)
    pan = from_arrays(values)
    summary = pan.availability()
    assert_array_equal(summary.counts, mask.sum(axis=0))
