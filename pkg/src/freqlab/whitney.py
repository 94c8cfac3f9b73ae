"""Ternary Whitney decomposition of [-1, 1]^d driven by excess and height criteria.

A cube of level j >= 1 has half-side l = 3^(1-j) and center a in (3^(1-j) Z)^d;
it is stored exactly as the integer vector m = a / l together with j.  Its
ball is B_L = B_{3l}(a).  With v the field in Whitney coordinates:

    excess  if  int_{B_L} |grad v|^2 >= C0 l^(d + 2 alpha)
    height  if  int_{B_L} v^2        >= C0 l^(d + 2 + 2 alpha)   (tested second)

otherwise the cube is split into its 3^d sons, down to ``max_depth``; cubes
still unclassified there form the residual set.

Whitney coordinates are y = x / s with s = R / 3 by default, so the root ball
B_3 is the whole field ball, and v(y) = u(s y).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import ResolutionError, ScalarField, ball_weights, gradient
from .report import VerificationReport

CLASSES = ("excess", "height", "subdivided", "residual")


@dataclass
class Cube:
    level: int
    num: tuple
    cls: str = ""
    excess: float = 0.0
    height: float = 0.0
    parent: int | None = None
    children: list = field(default_factory=list)

    @property
    def half_side(self) -> float:
        return 3.0 ** (1 - self.level)

    @property
    def center(self) -> np.ndarray:
        return np.array(self.num, dtype=float) * self.half_side

    def center_str(self) -> list:
        den = 3 ** (self.level - 1)
        return [f"{m}/{den}" if den != 1 else str(m) for m in self.num]

    def sons(self):
        for k in itertools.product((-2, 0, 2), repeat=len(self.num)):
            yield tuple(3 * m + kk for m, kk in zip(self.num, k))

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "center": self.center_str(),
            "half_side": f"1/{3 ** (self.level - 1)}",
            "class": self.cls,
            "excess": self.excess,
            "height": self.height,
        }


@dataclass
class WhitneyDecomposition:
    d: int
    C0: float
    alpha: float
    max_depth: int
    scale: float
    cubes: list

    def thresholds(self, level: int):
        l = 3.0 ** (1 - level)
        return self.C0 * l ** (self.d + 2 * self.alpha), self.C0 * l ** (self.d + 2 + 2 * self.alpha)

    def leaves(self) -> list:
        return [c for c in self.cubes if not c.children]

    def counts(self) -> dict:
        out = {k: 0 for k in CLASSES}
        for c in self.cubes:
            out[c.cls] += 1
        return out

    def gamma_volume(self) -> float:
        """Volume of the residual cubes in Whitney coordinates."""
        return float(sum((2 * c.half_side) ** self.d for c in self.cubes if c.cls == "residual"))

    def to_dict(self) -> dict:
        return {
            "params": {"d": self.d, "C0": self.C0, "alpha": self.alpha, "max_depth": self.max_depth, "scale": self.scale},
            "summary": {"counts": self.counts(), "leaves": len(self.leaves()), "gamma_volume": self.gamma_volume()},
            "cubes": [c.to_dict() for c in self.cubes],
        }


class _BallIntegrator:
    """int_{B_L} |grad v|^2 dy and int_{B_L} v^2 dy via cell-averaged ball weights."""

    def __init__(self, field_: ScalarField, scale: float):
        self.field = field_
        self.grid = field_.grid
        self.s = scale
        self.u2 = field_.values**2
        self.du2 = np.sum(gradient(field_) ** 2, axis=-1)

    def __call__(self, cube: Cube):
        g, s, d = self.grid, self.s, self.grid.d
        sl, w = ball_weights(g, cube.center * s, 3.0 * cube.half_side * s)
        vol = g.cell_volume
        # dy = s^-d dx and grad_y v = s grad_x u
        excess = vol * float(np.sum(w * self.du2[sl])) * s ** (2 - d)
        height = vol * float(np.sum(w * self.u2[sl])) * s ** (-d)
        return excess, height


def level_ball_nodes(grid, level: int, scale: float | None = None) -> int:
    """Number of lattice nodes in the origin-centred ball B_L of a level-``level`` cube."""
    s = grid.R / 3.0 if scale is None else scale
    r = 3.0 * 3.0 ** (1 - level) * s
    return int(np.count_nonzero(grid.radius <= r * (1 + 1e-12)))


def max_resolvable_depth(grid, cap: int = 8, scale: float | None = None) -> int:
    """Deepest level <= cap whose balls hold at least 4^d nodes (at least 1)."""
    depth = 1
    for j in range(1, cap + 1):
        if level_ball_nodes(grid, j, scale) >= 4**grid.d:
            depth = j
    return depth


def decompose(field_: ScalarField, C0: float = 1.0, alpha: float = 0.25, max_depth: int | None = None, scale=None):
    """Classify the ternary cube tree of [-1, 1]^d, depth-first in lexicographic son order."""
    g = field_.grid
    if C0 <= 0:
        raise ValueError("C0 must be positive")
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 1/2)")
    max_depth = (5 if g.d == 2 else 3) if max_depth is None else int(max_depth)
    if not 1 <= max_depth <= 8:
        raise ValueError("max_depth must lie in [1, 8]")
    s = g.R / 3.0 if scale is None else float(scale)
    if 3.0 * s > g.R * (1 + 1e-12):
        raise ValueError(f"root ball of radius 3s={3 * s} leaves the field ball of radius {g.R}")
    if level_ball_nodes(g, max_depth, s) < 4**g.d:
        raise ResolutionError(
            f"depth exceeds resolution: a level-{max_depth} ball holds fewer than {4 ** g.d} nodes at h={g.h}"
        )
    integ = _BallIntegrator(field_, s)
    dec = WhitneyDecomposition(g.d, float(C0), float(alpha), max_depth, s, [])

    def visit(cube: Cube, parent):
        idx = len(dec.cubes)
        cube.parent = parent
        dec.cubes.append(cube)
        cube.excess, cube.height = integ(cube)
        thr_e, thr_h = dec.thresholds(cube.level)
        if cube.excess >= thr_e:
            cube.cls = "excess"
        elif cube.height >= thr_h:
            cube.cls = "height"
        elif cube.level >= max_depth:
            cube.cls = "residual"
        else:
            cube.cls = "subdivided"
            for num in cube.sons():
                cube.children.append(len(dec.cubes))
                visit(Cube(cube.level + 1, num), idx)

    visit(Cube(1, tuple([0] * g.d)), None)
    return dec


def residual_set(decomp: WhitneyDecomposition) -> list:
    return [c for c in decomp.cubes if c.cls == "residual"]


def _cube_nodes(grid, cube, s):
    """Boolean mask of in-ball lattice nodes inside the closed cube s*L."""
    a, l = cube.center * s, cube.half_side * s
    inside = np.all(np.abs(grid.points - a) <= l * (1 + 1e-12), axis=-1)
    return inside & grid.mask


def verify_decomposition(
    decomp: WhitneyDecomposition,
    field_: ScalarField,
    tol_u: float | None = None,
    tol_g: float | None = None,
) -> VerificationReport:
    """Structural checks (hard) plus father-estimate and contact-set measurements.

    The contact-set check looks, in every residual cube, for a node with
    |u| <= tol_u and |grad u| <= tol_g (defaults 5h^2 and 5h, in field units).
    """
    g = field_.grid
    d, depth = decomp.d, decomp.max_depth
    rep = VerificationReport(params={"C0": decomp.C0, "alpha": decomp.alpha, "max_depth": depth})

    # (1) partition of the root at the finest level, exact integer painting
    side = 3 ** (depth - 1)
    occ = np.zeros((side,) * d, dtype=np.int64)
    for c in decomp.leaves():
        span = 3 ** (depth - c.level)
        # finest-cell index range covered by the cube: ((m - 1) * 3^(depth - j) + side) / 2 ...
        lo = [((m - 1) * span + side) // 2 for m in c.num]
        occ[tuple(slice(x, x + span) for x in lo)] += 1
    rep.add("partition", bool(np.all(occ == 1)), int(np.sum(occ != 1)), 0, leaves=len(decomp.leaves()))

    # (2) criteria, including the ancestry rule for classified leaves
    bad = []
    for i, c in enumerate(decomp.cubes):
        thr_e, thr_h = decomp.thresholds(c.level)
        e_ok, h_ok = c.excess >= thr_e, c.height >= thr_h
        ok = {
            "excess": e_ok and not c.children,
            "height": (not e_ok) and h_ok and not c.children,
            "subdivided": (not e_ok) and (not h_ok) and len(c.children) == 3**d and c.level < depth,
            "residual": (not e_ok) and (not h_ok) and not c.children and c.level == depth,
        }[c.cls]
        if not ok:
            bad.append(i)
    rep.add("criteria", not bad, len(bad), 0)

    # (3) father estimates (measured constants, reported)
    ce1 = ce2 = ch1 = ch2 = 0.0
    for c in decomp.cubes:
        if c.parent is None or c.cls not in ("excess", "height"):
            continue
        H = decomp.cubes[c.parent]
        l2 = c.half_side**2
        if c.cls == "excess":
            ce1 = max(ce1, H.height / (l2 * c.excess))
            ce2 = max(ce2, H.excess / c.excess)
        else:
            ch1 = max(ch1, H.height / c.height)
            ch2 = max(ch2, H.excess * l2 / c.height)
    for name, val in (
        ("father_excess_L2", ce1),
        ("father_excess_energy", ce2),
        ("father_height_L2", ch1),
        ("father_height_energy", ch2),
    ):
        rep.add(name, math.isfinite(val), val, hard=False)

    # (4) contact set: every residual cube should hold an almost-critical node
    tol_u = 5 * g.h**2 if tol_u is None else tol_u
    tol_g = 5 * g.h if tol_g is None else tol_g
    u = np.abs(field_.values)
    du = np.sqrt(np.sum(gradient(field_) ** 2, axis=-1))
    worst, misses = 0.0, 0
    for c in residual_set(decomp):
        nodes = _cube_nodes(g, c, decomp.scale)
        if not nodes.any():
            misses += 1
            worst = math.inf
            continue
        score = float(np.min(np.maximum(u[nodes] / tol_u, du[nodes] / tol_g)))
        worst = max(worst, score)
        misses += score > 1
    rep.add(
        "contact_set",
        misses == 0,
        worst,
        1.0,
        hard=False,
        tol_u=tol_u,
        tol_g=tol_g,
        residual_cubes=len(residual_set(decomp)),
        cubes_without_contact=misses,
    )
    return rep


def cube_sup_check(decomp: WhitneyDecomposition, field_: ScalarField, r: float, lam: float = 0.5, D0: float | None = None):
    """max over classified leaves meeting B_r of (sup_L |u| + sup_L |grad u|) / D0(r)^lambda."""
    g = field_.grid
    if D0 is None:
        from .frequency import components
        from .lagrangian import Lagrangian

        D0 = components(field_, Lagrangian(), r).D0
    u = np.abs(field_.values)
    du = np.sqrt(np.sum(gradient(field_) ** 2, axis=-1))
    s = decomp.scale
    C, used, violation = 0.0, 0, False
    for c in decomp.leaves():
        if c.cls not in ("excess", "height"):
            continue
        a, l = c.center * s, c.half_side * s
        # distance from the origin to the closed cube
        if np.linalg.norm(np.maximum(np.abs(a) - l, 0.0)) > r:
            continue
        nodes = _cube_nodes(g, c, s)
        if not nodes.any():
            continue
        used += 1
        sup = float(np.max(u[nodes]) + np.max(du[nodes]))
        if D0 > 0:
            C = max(C, sup / D0**lam)
        elif sup > 0:
            violation = True
            C = math.inf
    rep = VerificationReport(params={"r": r, "lambda": lam, "D0": D0, "cubes": used})
    rep.add("cube_sup", not violation, C if used else None, hard=not violation)
    return rep
