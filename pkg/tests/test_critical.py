import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freqlab.critical import (
    box_counts,
    box_dimension,
    critical_summary,
    default_scales,
    detect_critical,
    zero_set_volume,
)
from freqlab.grid import make_grid, sample_field


@pytest.fixture(scope="module")
def g():
    return make_grid(2, 257, 1.0)


def test_linear_field_has_no_critical_points(g):
    u = sample_field(g, lambda x: x[:, 0])
    cs = detect_critical(u, g.h**2 / 2, g.h / 2)
    assert len(cs) == 0
    assert box_dimension(cs, default_scales(cs, 1.0)) == "empty"


def test_saddle_only_origin(g):
    u = sample_field(g, lambda x: x[:, 0] * x[:, 1])
    cs = detect_critical(u, g.h**2 / 2, g.h / 2)
    assert len(cs) == 1 and np.allclose(cs.points[0], 0.0)
    assert box_dimension(cs, default_scales(cs, 1.0)) == pytest.approx(0.0, abs=0.1)


def test_zero_field_everything(g):
    u = sample_field(g, lambda x: np.zeros(len(x)))
    cs = detect_critical(u, 1e-12, 1e-12)
    assert len(cs) == int(g.mask.sum())


def test_sorted_and_within_thresholds(g):
    u = sample_field(g, lambda x: x[:, 1] ** 2 - 0.1 * x[:, 0] ** 2 * x[:, 1])
    cs = detect_critical(u, 1e-3, 5e-2)
    assert len(cs) > 0
    idx = [tuple(row) for row in cs.indices]
    assert idx == sorted(idx)


def test_degenerate_line_dimension_one(g):
    u = sample_field(g, lambda x: x[:, 1] ** 2)
    cs = detect_critical(u)
    assert box_dimension(cs, default_scales(cs, 1.0)) == pytest.approx(1.0, abs=0.1)
    summ = critical_summary(u, minimizer=False)
    assert not summ["within_bound"] and summ["minimizer"] is False


def test_segment_box_count():
    g = make_grid(2, 257, 1.0)
    u = sample_field(g, lambda x: np.where(np.abs(x[:, 1]) < 1e-12, 0.0, 1.0))
    cs = detect_critical(u, 1e-9, np.inf)
    scales = default_scales(cs, 1.0)
    counts = box_counts(cs, scales)
    assert counts == sorted(counts, reverse=True)
    assert box_dimension(cs, scales) == pytest.approx(1.0, abs=0.1)


def test_box_dimension_errors(g):
    u = sample_field(g, lambda x: x[:, 0] * x[:, 1])
    cs = detect_critical(u, 1.0, 1.0)
    with pytest.raises(ValueError):
        box_dimension(cs, [0.1, 0.2])
    with pytest.raises(ValueError):
        box_dimension(cs, [g.h, 0.2, 0.4])


@settings(max_examples=15, deadline=None)
@given(tu=st.floats(1e-6, 1e-2), tg=st.floats(1e-4, 1e-1), f=st.floats(1.0, 4.0))
def test_monotone_in_tolerances(tu, tg, f):
    g = make_grid(2, 65, 1.0)
    u = sample_field(g, lambda x: x[:, 0] ** 2 - x[:, 1] ** 3)
    small = {tuple(i) for i in detect_critical(u, tu, tg).indices}
    large = {tuple(i) for i in detect_critical(u, tu * f, tg * f).indices}
    assert small <= large


@settings(max_examples=10, deadline=None)
@given(lam=st.floats(0.01, 100.0))
def test_dimension_scale_invariant(lam):
    g = make_grid(2, 65, 1.0)
    u = sample_field(g, lambda x: x[:, 1] ** 2 * (1 + x[:, 0]))
    base = detect_critical(u)
    scaled = detect_critical(u * lam, base.tol_u * lam, base.tol_g * lam)
    assert np.array_equal(base.indices, scaled.indices)
    dim = box_dimension(base, default_scales(base, 1.0))
    assert 0.0 <= dim <= 2.0


def test_zero_set_volume(g):
    assert zero_set_volume(sample_field(g, lambda x: np.zeros(len(x))), 1e-3) == 1.0
    u = sample_field(g, lambda x: x[:, 0])
    # the x1 = 0 node column always qualifies: lattice-aware oracle
    column = np.count_nonzero(g.mask & (np.abs(g.points[..., 0]) < 1e-12)) / np.count_nonzero(g.mask)
    assert zero_set_volume(u, g.h / 10) == pytest.approx(column)
    shifted = sample_field(g, lambda x: x[:, 0] - 0.3 * g.h)
    vols = [zero_set_volume(shifted, t) for t in (4 * g.h, g.h, g.h / 10)]
    assert vols[0] > vols[1] > vols[2] == 0.0
    with pytest.raises(ValueError):
        zero_set_volume(u, 0.0)
