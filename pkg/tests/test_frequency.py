import math

import numpy as np
import pytest

from freqlab.frequency import (
    CSV_COLUMNS,
    CenterNotSingular,
    HeightVanishes,
    components,
    corrected_frequency_scan,
    default_beta,
    doubling_and_vanishing,
    frequency_N,
    height_identity_defect,
    inner_defect,
    log_derivative_check,
    outer_defect,
    outer_equivalence,
    poincare_ratio,
)
from freqlab.grid import CutoffSpec, make_grid, sample_field
from freqlab.lagrangian import Lagrangian

QUAD = Lagrangian("quadratic")
RADII = [0.35, 0.5, 0.65, 0.8]


def harmonic(k):
    return lambda x: np.real((x[:, 0] + 1j * x[:, 1]) ** k)


@pytest.fixture(scope="module")
def g():
    return make_grid(2, 257, 1.0)


@pytest.fixture(scope="module")
def fields(g):
    return {
        "one": sample_field(g, lambda x: np.ones(len(x))),
        "zero": sample_field(g, lambda x: np.zeros(len(x))),
        "x1": sample_field(g, lambda x: x[:, 0]),
        "x1x2": sample_field(g, lambda x: x[:, 0] * x[:, 1]),
    }


def test_constant_field_components(fields):
    for r in RADII:
        c = components(fields["one"], QUAD, r)
        assert c.H == pytest.approx(2 * math.pi * r, rel=1e-4)
        assert c.D0 == c.A == c.B == 0.0


def test_zero_field(fields):
    c = components(fields["zero"], QUAD, 0.5)
    assert (c.H, c.D0, c.Dl, c.G, c.A, c.B) == (0, 0, 0, 0, 0, 0)
    with pytest.raises(HeightVanishes):
        frequency_N(c)
    assert height_identity_defect(fields["zero"], 0.5) == 0.0
    assert outer_defect(fields["zero"], QUAD, 0.5) == (0.0, 0.0)
    assert inner_defect(fields["zero"], QUAD, 0.5) == (0.0, 0.0)


def test_linear_field_cs_equality(fields):
    for r in RADII:
        c = components(fields["x1"], QUAD, r)
        assert c.A == pytest.approx(c.H, rel=1e-3)
        assert c.B == pytest.approx(c.H, rel=1e-3)
        assert abs(c.cs_gap) <= 1e-2 * c.A * c.H


@pytest.mark.parametrize("k", [1, 2, 3])
def test_harmonic_frequency_equals_degree(g, k):
    u = sample_field(g, harmonic(k))
    for r in [0.2, 0.4, 0.8]:
        assert frequency_N(components(u, QUAD, r)) == pytest.approx(k, rel=1e-2)


def test_frequency_independent_of_cutoff(fields):
    for r in [0.4, 0.7]:
        lo = frequency_N(components(fields["x1x2"], QUAD, r, CutoffSpec(0.6)))
        hi = frequency_N(components(fields["x1x2"], QUAD, r, CutoffSpec(0.95)))
        assert lo == pytest.approx(hi, rel=1e-2)


def test_quadratic_has_no_lower_order_energy(fields):
    c = components(fields["x1x2"], QUAD, 0.5)
    assert c.Dl == 0.0 and c.D == c.D0


def test_cs_gap_nonnegative_on_rough_field(g):
    rng = np.random.default_rng(3)
    coef = rng.normal(size=(4, 4))
    u = sample_field(g, lambda x: sum(coef[i, j] * np.cos((i + 1) * x[:, 0] + j * x[:, 1]) for i in range(4) for j in range(4)))
    for r in RADII:
        c = components(u, QUAD, r)
        assert c.cs_gap >= -1e-10 * (c.A * c.H + 1)


def test_height_identity_constant(fields):
    # lattice quadrature of H carries an O(h^2) error whose r-derivative shows up here
    assert height_identity_defect(fields["one"], 0.5) <= 5e-4
    coarse = sample_field(make_grid(2, 129, 1.0), lambda x: np.ones(len(x)))
    assert height_identity_defect(fields["one"], 0.5) * 4 <= height_identity_defect(coarse, 0.5)


@pytest.mark.parametrize("name", ["x1", "x1x2"])
def test_identities_on_harmonic_fields(fields, name):
    u = fields[name]
    for r in RADII:
        c = components(u, QUAD, r)
        assert height_identity_defect(u, r) <= 1e-2
        assert abs(outer_defect(u, QUAD, r)[0]) <= 1e-2 * c.D0
        assert abs(inner_defect(u, QUAD, r)[0]) <= 1e-2 * c.D0
        assert log_derivative_check(u, QUAD, r)["defect"] <= 1e-2


def test_defects_shrink_under_refinement():
    worst = {}
    for n in (129, 257):
        gg = make_grid(2, n, 1.0)
        u = sample_field(gg, lambda x: x[:, 0] * x[:, 1])
        worst[n] = max(abs(outer_defect(u, QUAD, r)[0]) / components(u, QUAD, r).D0 for r in RADII)
    assert worst[257] * 1.8 <= worst[129]


def test_poincare_homogeneous(fields):
    for r in RADII:
        c = components(fields["x1x2"], QUAD, r)
        first, second = poincare_ratio(fields["x1x2"], c)
        assert first == pytest.approx(2.0, rel=1e-2)
        assert 0 < second < 1


def test_poincare_errors(fields):
    with pytest.raises(CenterNotSingular):
        poincare_ratio(fields["x1"], components(fields["x1"], QUAD, 0.5))
    with pytest.raises(HeightVanishes):
        poincare_ratio(fields["zero"], components(fields["zero"], QUAD, 0.5))


def test_outer_equivalence(fields):
    for r in RADII:
        assert outer_equivalence(components(fields["x1"], QUAD, r)) == pytest.approx(1.0, rel=1e-2)
    with pytest.raises(ValueError):
        outer_equivalence(components(fields["one"], QUAD, 0.5))


@pytest.mark.parametrize("name,k", [("x1", 1), ("x1x2", 2)])
def test_doubling_and_order(fields, name, k):
    rep = doubling_and_vanishing(fields[name], radii=[0.35, 0.45, 0.6, 0.8])
    assert rep["vanishing_order"].value == pytest.approx(k, abs=0.05)
    for row in rep["doubling_ratio"].detail["ratios"]:
        assert row["ratio"] == pytest.approx(2 ** (2 + 2 * k), rel=2e-2)


def test_doubling_zero_field(fields):
    rep = doubling_and_vanishing(fields["zero"], radii=[0.35, 0.5, 0.8])
    assert rep["vanishing_order"].detail["status"] == "identically zero"


def test_scan_linear_field(fields):
    prof = corrected_frequency_scan(fields["x1"], QUAD, beta=0.5)
    assert np.allclose(prof.column("N"), 1.0, rtol=1e-2)
    mono = prof.monotonicity()
    assert mono["violations"] == []
    assert mono["g_increasing"] and mono["D0_nondecreasing"] and mono["G_nondecreasing"]
    header = prof.to_csv().splitlines()[0]
    assert header == ",".join(CSV_COLUMNS)


def test_scan_constant_field_trivially_monotone(fields):
    prof = corrected_frequency_scan(fields["one"], QUAD, radii=[0.4, 0.5, 0.6])
    assert np.all(prof.column("N") == 0.0)
    assert prof.monotonicity()["violations"] == []


def test_scan_truncates_on_vanishing_height(fields):
    prof = corrected_frequency_scan(fields["zero"], QUAD, radii=[0.4, 0.5])
    assert prof.rows == [] and prof.truncated_at == 0.4


def test_scan_thread_independent(fields):
    a = corrected_frequency_scan(fields["x1x2"], QUAD, radii=RADII, threads=1).to_csv()
    b = corrected_frequency_scan(fields["x1x2"], QUAD, radii=RADII, threads=4).to_csv()
    assert a == b


def test_scan_rejects_bad_arguments(fields):
    with pytest.raises(ValueError):
        corrected_frequency_scan(fields["x1"], QUAD, radii=[0.5, 0.4])
    with pytest.raises(ValueError):
        corrected_frequency_scan(fields["x1"], QUAD, radii=[0.5], beta=2.0)


def test_default_beta():
    assert default_beta(Lagrangian("power", q=3.0)) == pytest.approx(0.125)
    assert default_beta(Lagrangian("power", q=3.0), alpha=1.0, lam=4.0) == 0.5
