import json
import math

import numpy as np
import pytest

from freqlab.grid import ResolutionError, make_grid, sample_field
from freqlab.whitney import (
    Cube,
    cube_sup_check,
    decompose,
    level_ball_nodes,
    max_resolvable_depth,
    residual_set,
    verify_decomposition,
)


@pytest.fixture(scope="module")
def g3():
    # R = 3 makes Whitney coordinates coincide with x (s = R/3 = 1)
    return make_grid(2, 257, 3.0)


@pytest.fixture(scope="module")
def g():
    return make_grid(2, 257, 1.0)


def trig_field(grid, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3))
    ph = rng.uniform(0, 2 * np.pi, size=(3, 3))
    return sample_field(
        grid,
        lambda x: 0.05 * sum(a[i, j] * np.cos(2 * i * x[:, 0] + 2 * j * x[:, 1] + ph[i, j]) for i in range(3) for j in range(3)),
    )


def test_cube_geometry():
    c = Cube(3, (4, -7))
    assert c.half_side == pytest.approx(1 / 9)
    assert np.allclose(c.center, [4 / 9, -7 / 9])
    assert c.center_str() == ["4/9", "-7/9"]
    sons = list(Cube(1, (0, 0)).sons())
    assert len(sons) == 9 and (-2, -2) in sons and (2, 2) in sons


def test_linear_field_single_excess_cube(g3):
    u = sample_field(g3, lambda x: x[:, 0])
    dec = decompose(u, C0=1.0, alpha=0.25, max_depth=4)
    assert len(dec.cubes) == 1 and dec.cubes[0].cls == "excess"
    assert dec.cubes[0].excess == pytest.approx(9 * math.pi, rel=5e-3)
    assert residual_set(dec) == []
    assert dec.gamma_volume() == 0.0


def test_linear_field_large_C0_subdivides(g3):
    u = sample_field(g3, lambda x: x[:, 0])
    dec = decompose(u, C0=100.0, alpha=0.25, max_depth=4)
    root = dec.cubes[0]
    assert root.cls == "subdivided"
    assert root.height == pytest.approx(math.pi / 4 * 81, rel=5e-3)
    assert all(dec.cubes[i].level == 2 for i in root.children)
    rep = verify_decomposition(dec, u)
    assert rep["partition"].passed and rep["criteria"].passed
    for name in ("father_excess_L2", "father_excess_energy", "father_height_L2", "father_height_energy"):
        assert rep[name].value <= 9 ** (2 + 2)


def test_zero_field_everything_residual(g):
    u = sample_field(g, lambda x: np.zeros(len(x)))
    dec = decompose(u, max_depth=4)
    res = residual_set(dec)
    assert len(res) == 3 ** (2 * 3)
    assert dec.gamma_volume() == pytest.approx(4.0)
    rep = verify_decomposition(dec, u)
    assert rep.passed and rep["contact_set"].passed and rep["contact_set"].value == 0.0


def test_depth_exceeds_resolution(g):
    u = sample_field(g, lambda x: x[:, 0])
    assert max_resolvable_depth(g, 8) == 4
    assert level_ball_nodes(g, 4) >= 16 > level_ball_nodes(g, 5)
    with pytest.raises(ResolutionError, match="depth exceeds resolution"):
        decompose(u, max_depth=5)


@pytest.mark.parametrize("kw", [{"C0": 0.0}, {"alpha": 0.5}, {"alpha": 0.0}, {"max_depth": 9}, {"scale": 0.5}])
def test_rejects_bad_parameters(g, kw):
    u = sample_field(g, lambda x: x[:, 0])
    with pytest.raises(ValueError):
        decompose(u, **{"max_depth": 3, **kw})


@pytest.mark.parametrize("seed", range(4))
def test_random_fields_structural(g, seed):
    u = trig_field(g, seed)
    dec = decompose(u, C0=1e-3, max_depth=4)
    rep = verify_decomposition(dec, u)
    assert rep["partition"].passed and rep["criteria"].passed
    for c in dec.leaves():
        assert c.cls in ("excess", "height", "residual")


def test_determinism_and_json(g):
    u = trig_field(g, 11)
    a = decompose(u, C0=1e-3, max_depth=3).to_dict()
    b = decompose(u, C0=1e-3, max_depth=3).to_dict()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert a["summary"]["leaves"] == sum(a["summary"]["counts"][k] for k in ("excess", "height", "residual"))


def test_scaling_consistency(g):
    u = trig_field(g, 5)
    lam = 3.0
    a = decompose(u, C0=1e-3, max_depth=4)
    b = decompose(u * lam, C0=1e-3 * lam**2, max_depth=4)
    assert [(c.level, c.num, c.cls) for c in a.cubes] == [(c.level, c.num, c.cls) for c in b.cubes]


def test_classification_shrinks_with_C0(g):
    u = trig_field(g, 7)
    small = decompose(u, C0=1e-3, max_depth=4)
    big = decompose(u, C0=1e-2, max_depth=4)
    sub_small = {(c.level, c.num) for c in small.cubes if c.cls == "subdivided"}
    for c in big.cubes:
        if (c.level, c.num) in sub_small:
            assert c.cls in ("subdivided", "residual")


def test_quartic_residual_clusters_at_origin(g):
    u = sample_field(g, lambda x: np.sum(x**2, axis=1) ** 2)
    # root integrals are about 12.6 and 5.7, so C0 = 20 forces a subdivision
    dec = decompose(u, C0=20.0, max_depth=4)
    res = residual_set(dec)
    assert any(not np.any(c.num) for c in res)
    classified = [c for c in dec.leaves() if c.cls != "residual"]
    assert classified
    mean_res = np.mean([np.linalg.norm(c.center) for c in res])
    mean_cls = np.mean([np.linalg.norm(c.center) for c in classified])
    assert mean_res < mean_cls


def test_cube_sup_zero_field_vacuous(g):
    u = sample_field(g, lambda x: np.zeros(len(x)))
    rep = cube_sup_check(decompose(u, max_depth=3), u, 0.5, D0=0.0)
    assert rep.passed and rep["cube_sup"].value is None


def test_cube_sup_refinement_stable():
    vals = []
    for n in (129, 257):
        gg = make_grid(2, n, 1.0)
        u = sample_field(gg, lambda x: 0.05 * x[:, 0] * x[:, 1])
        dec = decompose(u, C0=1e-5, max_depth=3)
        vals.append(cube_sup_check(dec, u, 0.5, lam=0.5)["cube_sup"].value)
    assert all(math.isfinite(v) and v > 0 for v in vals)
    assert vals[1] == pytest.approx(vals[0], rel=0.2)


def test_three_dimensional_smoke():
    gg = make_grid(3, 33, 1.0)
    u = sample_field(gg, lambda x: x[:, 0] * x[:, 1] + 0.3 * x[:, 2] ** 2)
    dec = decompose(u, C0=1e-3, max_depth=2)
    rep = verify_decomposition(dec, u)
    assert rep["partition"].passed and rep["criteria"].passed
