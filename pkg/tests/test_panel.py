import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from fgiv.errors import DuplicateCell, MissingCell, NonNumericValue, NotNormalized
from fgiv.panel import (
    AggregateSeries,
    Panel,
    ShareSeries,
    aggregate,
    demean_cross_section,
    load_panel_csv,
    load_series_csv,
    load_shares_csv,
    market_clearing_residual,
    write_panel_csv,
)
from fgiv.simulation import DgpConfig, simulate_design

LONG = b"unit,time,value\nA,1,1.0\nB,1,2.0\nA,2,3.0\nB,2,4.0\n"
WIDE = b"time,A,B\n1,1.0,2.0\n2,3.0,4.0\n"


def test_long_layout_reshapes():
    p = load_panel_csv(LONG, "long")
    assert_array_equal(p.values, [[1.0, 2.0], [3.0, 4.0]])
    assert p.unit_ids == ("A", "B")
    assert p.time_ids == ("1", "2")


def test_unbalanced_long_rejected():
    with pytest.raises(MissingCell):
        load_panel_csv(b"unit,time,value\nA,1,1.0\nB,1,2.0\nA,2,3.0\n", "long")


def test_duplicate_and_non_numeric_cells():
    with pytest.raises(DuplicateCell):
        load_panel_csv(LONG + b"A,1,5.0\n", "long")
    with pytest.raises(NonNumericValue):
        load_panel_csv(b"time,A,B\n1,1.0,x\n", "wide")


def test_wide_matches_long():
    a = load_panel_csv(LONG, "long")
    b = load_panel_csv(WIDE, "wide")
    assert_array_equal(a.values, b.values)
    assert a.unit_ids == b.unit_ids and a.time_ids == b.time_ids


def test_numeric_time_labels_sort_numerically():
    p = load_panel_csv(b"time,A,B\n10,3,0\n2,1,0\n9,2,0\n", "wide")
    assert p.time_ids == ("2", "9", "10")
    assert_array_equal(p.values[:, 0], [1, 2, 3])


def test_panel_values_read_only():
    p = Panel(np.ones((2, 3)))
    with pytest.raises(ValueError):
        p.values[0, 0] = 2.0


def test_demean_examples():
    assert_array_equal(demean_cross_section(np.array([[1.0, 3.0]])), [[-1.0, 1.0]])
    assert_array_equal(demean_cross_section(np.full((3, 4), 7.5)), np.zeros((3, 4)))


def test_demean_rows_sum_to_zero(rng):
    x = demean_cross_section(Panel(rng.standard_normal((5, 4))))
    assert isinstance(x, Panel)
    assert_allclose(x.values.sum(axis=1), 0.0, atol=1e-12)


@given(arrays(float, (6, 5), elements=st.floats(-1e3, 1e3)))
def test_demean_idempotent(x):
    once = demean_cross_section(x)
    assert_allclose(demean_cross_section(once), once, atol=1e-12)


@given(arrays(float, (4, 6), elements=st.floats(-1e3, 1e3)),
       arrays(float, 6, elements=st.floats(-10, 10)))
def test_demeaning_only_removes_mean_component(x, w):
    w = w - w.mean()
    lhs = aggregate(demean_cross_section(x), w).values
    rhs = aggregate(x, w).values
    assert_allclose(lhs, rhs, atol=1e-9)


def test_aggregate_examples():
    p = Panel(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert_allclose(aggregate(p, ShareSeries(np.array([0.5, 0.5]))).values, [1.5, 3.5])
    assert_allclose(aggregate(p, np.full(2, 0.5)).values, p.values.mean(axis=1))
    sel = ShareSeries(np.array([[0.0, 1.0], [0.0, 1.0]]))
    assert_allclose(aggregate(p, sel).values, p.values[:, 1])


def test_shares_must_sum_to_one():
    with pytest.raises(NotNormalized):
        ShareSeries(np.array([0.5, 0.6]))
    with pytest.raises(NotNormalized):
        ShareSeries(np.array([1.5, -0.5]))
    s = ShareSeries.normalized(np.array([2.0, 1.0, 1.0]))
    assert_allclose(s.weights, [0.5, 0.25, 0.25])
    assert s.mode == "static"


def test_market_clearing_residual():
    mk = simulate_design(DgpConfig(n=30, t=50, seed=1))
    s = ShareSeries(mk.truth["shares"])
    res = market_clearing_residual(mk.panel, s, mk.d)
    assert_allclose(res.values, 0.0, atol=1e-12)
    shifted = AggregateSeries(mk.d.values + 1.0)
    assert_allclose(market_clearing_residual(mk.panel, s, shifted).values, -1.0, atol=1e-12)


def test_panel_csv_round_trip(tmp_path, rng):
    p = Panel(rng.standard_normal((7, 4)))
    path = tmp_path / "p.csv"
    write_panel_csv(path, p)
    q = load_panel_csv(str(path), "wide")
    assert_array_equal(q.values, p.values)


def test_series_and_shares_files():
    agg = load_series_csv(b"t,d,p\n2,0.5,1.5\n1,0.25,1.0\n")
    assert_array_equal(agg["p"], [1.0, 1.5])
    assert agg["_time"] == ["1", "2"]
    s = load_shares_csv(b"unit,share\n2,0.25\n1,0.75\n")
    assert_allclose(s.weights, [0.75, 0.25])
    tv = load_shares_csv(b"time,1,2\n1,0.5,0.5\n2,0.25,0.75\n")
    assert tv.mode == "time_varying"
    with pytest.raises(MissingCell):
        load_series_csv(io.BytesIO(b"t,d\n1,2\n"), ["p"])
