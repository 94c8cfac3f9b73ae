"""Lattice discretization of a ball, scalar fields and cutoff-weighted quadrature.

Every integral in the package is a lattice sum ``h^d * sum(weight * expr)``
over in-ball nodes.  The integrand is taken at the node; the radial cutoff
weight is averaged over the node's cell so that weighted integrals vary
smoothly with the radius (radial finite differences of them are meaningful).
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np

WEIGHT_KINDS = ("phi", "minus_phi_prime", "minus_phi_prime_times_absx", "minus_phi_prime_over_absx")

# components of the cell normal below this fraction of h are treated as flat
_FLAT_COMPONENT = 1e-4


class ResolutionError(ValueError):
    """A radius or ball is too small (or too large) for the lattice."""


@dataclass(frozen=True)
class Grid:
    """Uniform lattice on [-R, R]^d with the origin as its center node."""

    d: int
    n: int
    R: float

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.d}")
        if self.n < 3 or self.n % 2 == 0:
            raise ValueError(f"lattice size must be odd and >= 3, got {self.n}")
        if not self.R > 0:
            raise ValueError(f"radius must be positive, got {self.R}")

    @property
    def h(self) -> float:
        return 2.0 * self.R / (self.n - 1)

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.d

    @property
    def center_index(self) -> tuple:
        c = (self.n - 1) // 2
        return (c,) * self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @cached_property
    def axis(self) -> np.ndarray:
        # (i - c) * h == -R + i * h, but exactly antisymmetric about the center
        c = (self.n - 1) // 2
        return (np.arange(self.n) - c) * self.h

    @cached_property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*([self.axis] * self.d), indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def radius(self) -> np.ndarray:
        return np.sqrt(np.sum(self.points**2, axis=-1))

    @cached_property
    def mask(self) -> np.ndarray:
        m = self.radius <= self.R * (1.0 + 1e-12)
        m.flags.writeable = False
        return m

    @cached_property
    def _cell_geometry(self):
        """Per-node data for cell-averaged radial weights.

        Returns the effective cell radius (mean of |y| over the cell to second
        order), the half-width of the projected cell along the radial
        direction, and the projected side lengths h*|n_k|.
        """
        return _offset_geometry(self.points, self.h)

    @cached_property
    def _cell_variance(self) -> np.ndarray:
        """Variance of the radial offset across each cell (sum of projected side^2 / 12)."""
        return np.sum(self._cell_geometry[2] ** 2, axis=-1) / 12.0


def _offset_geometry(offsets: np.ndarray, h: float):
    """Cell geometry relative to a center, for offsets of shape (..., d)."""
    d = offsets.shape[-1]
    rho = np.sqrt(np.sum(offsets**2, axis=-1))
    normal = np.zeros_like(offsets)
    nz = rho > 0
    normal[nz] = offsets[nz] / rho[nz][:, None]
    normal[~nz, 0] = 1.0
    sides = h * np.abs(normal)
    sides[sides < _FLAT_COMPONENT * h] = 0.0
    half_support = 0.5 * sides.sum(axis=-1)
    rho_eff = rho + (d - 1) * h * h / (24.0 * np.maximum(rho, h))
    return rho_eff, half_support, sides


def make_grid(d: int, n: int, R: float) -> Grid:
    """Build the lattice for a ball of radius ``R`` in dimension ``d``.

    ``n`` must be odd (the frequency center is the middle node) and at least
    33; smaller lattices do not resolve the cutoff ramps.
    """
    if n % 2 == 0:
        raise ValueError(f"even lattice size n={n}: the origin would not be a lattice node")
    if n < 33:
        raise ValueError(f"lattice size n={n} < 33: quadrature unreliable")
    return Grid(int(d), int(n), float(R))


class ScalarField:
    """Immutable samples of a real function on the in-ball nodes of a grid."""

    def __init__(self, grid: Grid, values: np.ndarray):
        values = np.array(values, dtype=np.float64)
        if values.shape != grid.shape:
            raise ValueError(f"expected {grid.n ** grid.d} samples shaped {grid.shape}, got {values.shape}")
        values[~grid.mask] = 0.0
        values.flags.writeable = False
        self.grid = grid
        self.values = values

    @property
    def mask(self) -> np.ndarray:
        return self.grid.mask

    def sup(self) -> float:
        return float(np.max(np.abs(self.values[self.mask])))

    def __mul__(self, factor: float) -> "ScalarField":
        return ScalarField(self.grid, self.values * factor)

    __rmul__ = __mul__

    def __add__(self, other: "ScalarField") -> "ScalarField":
        if other.grid != self.grid:
            raise ValueError("fields live on different grids")
        return ScalarField(self.grid, self.values + other.values)


def sample_field(grid: Grid, f) -> ScalarField:
    """Evaluate ``f`` (vectorized over an ``(N, d)`` array of points) at every in-ball node."""
    pts = grid.points[grid.mask]
    vals = np.asarray(f(pts), dtype=np.float64)
    if vals.shape == ():
        vals = np.full(len(pts), float(vals))
    bad = ~np.isfinite(vals)
    if bad.any():
        idx = np.argwhere(grid.mask)[np.argmax(bad)]
        raise ValueError(f"non-finite value at node {tuple(int(i) for i in idx)}")
    values = np.zeros(grid.shape)
    values[grid.mask] = vals
    return ScalarField(grid, values)


def gradient(field: ScalarField) -> np.ndarray:
    """Nodal gradient, shape ``grid.shape + (d,)``.

    Central differences where both axis neighbours are in the ball, one-sided
    differences where only one is, zero outside the ball.  Rim nodes with no
    in-ball neighbour along an axis copy that component from an inward node.
    """
    g = field.grid
    u, m, h = field.values, g.mask, g.h
    out = np.zeros(g.shape + (g.d,))
    for k in range(g.d):
        fwd = np.zeros(g.shape, dtype=bool)
        bwd = np.zeros(g.shape, dtype=bool)
        up = [slice(None)] * g.d
        lo = [slice(None)] * g.d
        up[k], lo[k] = slice(1, None), slice(None, -1)
        up, lo = tuple(up), tuple(lo)
        fwd[lo] = m[lo] & m[up]
        bwd[up] = m[up] & m[lo]
        du_f = np.zeros(g.shape)
        du_b = np.zeros(g.shape)
        du_f[lo] = (u[up] - u[lo]) / h
        du_b[up] = (u[up] - u[lo]) / h
        both = fwd & bwd
        comp = np.where(both, 0.5 * (du_f + du_b), np.where(fwd, du_f, np.where(bwd, du_b, 0.0)))
        # rim tips with no in-ball neighbour along k borrow the component from
        # the inward neighbour along another axis (first-order shifted stencil)
        lone = m & ~fwd & ~bwd
        if lone.any():
            have = fwd | bwd
            for j in range(g.d):
                if j == k or not lone.any():
                    continue
                step = -np.sign(g.axis[np.nonzero(lone)[j]]).astype(int)
                src = np.nonzero(lone)
                tgt = list(src)
                tgt[j] = src[j] + step
                tgt = tuple(tgt)
                ok = have[tgt] & (step != 0)
                fill = tuple(a[ok] for a in src)
                comp[fill] = comp[tuple(a[ok] for a in tgt)]
                lone[fill] = False
        comp[~m] = 0.0
        out[..., k] = comp
    return out


@dataclass(frozen=True)
class CutoffSpec:
    """Radial cutoff: 1 up to ``upsilon``, linear ramp to 0 at 1.

    ``variant="literal"`` moves the ramp start to ``1 - upsilon`` without
    rescaling the slope, which makes the profile jump at the breakpoint; it is
    kept only for comparison runs.
    """

    upsilon: float = 0.9
    variant: str = "continuous"

    def __post_init__(self):
        if not 0.0 < self.upsilon < 1.0:
            raise ValueError(f"upsilon must lie in (0, 1), got {self.upsilon}")
        if self.variant not in ("continuous", "literal"):
            raise ValueError(f"unknown cutoff variant {self.variant!r}")

    @property
    def breakpoint(self) -> float:
        return self.upsilon if self.variant == "continuous" else 1.0 - self.upsilon

    def phi(self, t):
        t = np.asarray(t, dtype=float)
        b, v = self.breakpoint, self.upsilon
        ramp = (1.0 - t) / (1.0 - v)
        return np.where(t <= b, 1.0, np.where(t <= 1.0, ramp, 0.0))

    def minus_phi_prime(self, t):
        t = np.asarray(t, dtype=float)
        inside = (t > self.breakpoint) & (t <= 1.0)
        return np.where(inside, 1.0 / (1.0 - self.upsilon), 0.0)

    def ramp_width(self, r: float) -> float:
        return (1.0 - self.breakpoint) * r


def _spline_moment(t, sides, order):
    """Moments of T = sum_k s_k V_k with V_k ~ U(-1/2, 1/2) (a box spline).

    ``order=0`` gives P(T <= t); ``order=1`` gives E[(t - T)_+].  Rows of
    ``sides`` may contain zeros; those components are dropped.
    """
    out = np.empty(len(t))
    active = sides > 0
    for pattern in {tuple(row) for row in active}:
        sel = np.all(active == np.array(pattern), axis=1)
        a = sides[sel][:, np.array(pattern)]
        m = a.shape[1]
        shift = t[sel] + 0.5 * a.sum(axis=1)
        acc = np.zeros(len(a))
        for sigma in itertools.product((0, 1), repeat=m):
            s = shift - a @ np.array(sigma, dtype=float)
            acc += (-1) ** sum(sigma) * np.maximum(s, 0.0) ** (m + order)
        out[sel] = acc / (math.factorial(m + order) * np.prod(a, axis=1))
    return out


def _radial_terms(grid: Grid, c: float):
    """Cell averages of 1{|y| <= c} and (c - |y|)_+ and their radial first moments.

    With |y| ~ rho_eff + T across the cell (T the box spline of the projected
    sides), returns P(T <= t), E[(t - T)_+], E[T 1{T <= t}], E[T (t - T)_+]
    for t = c - rho_eff.
    """
    rho_eff, half, sides = grid._cell_geometry
    var = grid._cell_variance
    t = c - rho_eff
    inside = t >= half
    cdf = inside.astype(float)
    ramp = np.where(inside, t, 0.0)
    m0 = np.zeros_like(t)
    m1 = np.where(inside, -var, 0.0)
    near = np.abs(t) < half
    if near.any():
        tn, sn = t[near], sides[near]
        s0 = np.clip(_spline_moment(tn, sn, 0), 0.0, 1.0)
        s1 = np.maximum(_spline_moment(tn, sn, 1), 0.0)
        s2 = np.maximum(_spline_moment(tn, sn, 2), 0.0)
        cdf[near], ramp[near] = s0, s1
        m0[near] = tn * s0 - s1
        m1[near] = tn * s1 - 2.0 * s2
    return cdf, ramp, m0, m1


def _radial_cdf(grid: Grid, c: float) -> np.ndarray:
    """Cell-averaged indicator of {|y| <= c} at every node."""
    return _radial_terms(grid, c)[0]


def _radial_ramp(grid: Grid, c: float) -> np.ndarray:
    """Cell average of (c - |y|)_+ at every node."""
    return _radial_terms(grid, c)[1]


def check_radius(grid: Grid, r: float, cutoff: CutoffSpec | None = None) -> None:
    if r > grid.R * (1.0 + 1e-12):
        raise ResolutionError(f"radius exceeds domain: r={r} > R={grid.R}")
    if r < 4.0 * grid.h:
        raise ResolutionError(f"under-resolved radius: r={r} < 4h={4.0 * grid.h}")
    if cutoff is not None and cutoff.ramp_width(r) < 2.0 * grid.h * (1.0 - 1e-12):
        raise ResolutionError(
            f"under-resolved radius: ramp width {cutoff.ramp_width(r)} < 2h at r={r}, upsilon={cutoff.upsilon}"
        )


@lru_cache(maxsize=96)
def _weights(grid: Grid, r: float, cutoff: CutoffSpec) -> dict:
    v, b = cutoff.upsilon, cutoff.breakpoint
    rho_eff, half, _ = grid._cell_geometry
    cdf_r, ramp_r, m0_r, m1_r = _radial_terms(grid, r)
    cdf_b, ramp_b, m0_b, m1_b = _radial_terms(grid, b * r)
    scale = 1.0 / ((1.0 - v) * r)
    phi = (ramp_r - ramp_b) * scale
    phi_m1 = (m1_r - m1_b) * scale
    if cutoff.variant == "literal":
        jump = 1.0 - v / (1.0 - v)
        phi += jump * cdf_b
        phi_m1 += jump * m0_b
    else:
        deep = rho_eff + half <= b * r
        phi[deep] = 1.0
        phi_m1[deep] = 0.0
    gone = rho_eff - half >= r
    phi[gone] = 0.0
    phi_m1[gone] = 0.0
    mpp = (cdf_r - cdf_b) / (1.0 - v)
    mpp_m1 = (m0_r - m0_b) / (1.0 - v)
    mask = grid.mask
    rho = grid.radius
    safe = np.where(rho > 0, rho, 1.0)
    phi, phi_m1 = np.where(mask, phi, 0.0), np.where(mask, phi_m1, 0.0)
    mpp = np.where(mask & (rho > 0), mpp, 0.0)
    mpp_m1 = np.where(mask & (rho > 0), mpp_m1, 0.0)
    out = {
        "phi": phi,
        "minus_phi_prime": mpp,
        "minus_phi_prime_times_absx": mpp * rho,
        "minus_phi_prime_over_absx": mpp / safe,
        # first-moment terms: integral += sum(c0 * expr + c1 * d_nu expr)
        "phi@": (np.zeros_like(phi), phi_m1),
        "minus_phi_prime@": (np.zeros_like(mpp), mpp_m1),
        "minus_phi_prime_times_absx@": (mpp_m1, mpp_m1 * rho),
        "minus_phi_prime_over_absx@": (-mpp_m1 / safe**2, mpp_m1 / safe),
    }
    for w in out.values():
        for a in w if isinstance(w, tuple) else (w,):
            a.flags.writeable = False
    return out


def cutoff_weights(grid: Grid, r: float, cutoff: CutoffSpec) -> dict:
    """All four cell-averaged weights at radius ``r`` (validated)."""
    check_radius(grid, r, cutoff)
    return _weights(grid, float(r), cutoff)


def radial_derivative(grid: Grid, expr) -> np.ndarray:
    """x/|x| . grad(expr) by central differences (zero at the origin)."""
    expr = np.asarray(expr, dtype=float)
    parts = np.gradient(expr, grid.h)
    if grid.d == 1:
        parts = [parts]
    rho = grid.radius
    safe = np.where(rho > 0, rho, 1.0)
    out = sum(p * grid.points[..., k] for k, p in enumerate(parts)) / safe
    return np.where(rho > 0, out, 0.0)


def weighted_integral(
    expr,
    weight: str,
    r: float,
    cutoff: CutoffSpec,
    grid: Grid | None = None,
    moment_correction: bool = False,
    d_expr=None,
) -> float:
    """Lattice quadrature ``h^d * sum(w(|x|/r) * expr)`` over in-ball nodes.

    ``expr`` is a nodal array (or a ScalarField).  ``weight`` names the cutoff
    factor: ``phi``, ``minus_phi_prime``, ``minus_phi_prime_times_absx`` or
    ``minus_phi_prime_over_absx``.

    With ``moment_correction`` the radial first moment of the weight over each
    cell is paired with the radial derivative of ``expr`` (``d_expr``, computed
    if not given).  This removes the lattice-scale wiggle in r of the plain sum,
    at the price of monotonicity in ``expr``.
    """
    if isinstance(expr, ScalarField):
        grid, expr = expr.grid, expr.values
    if grid is None:
        raise TypeError("grid is required when expr is a plain array")
    if weight not in WEIGHT_KINDS:
        raise ValueError(f"unknown weight {weight!r}; expected one of {WEIGHT_KINDS}")
    ws = cutoff_weights(grid, r, cutoff)
    expr = np.broadcast_to(np.asarray(expr, dtype=float), grid.shape)
    total = np.sum(ws[weight] * expr)
    if moment_correction:
        c0, c1 = ws[weight + "@"]
        d_expr = radial_derivative(grid, expr) if d_expr is None else d_expr
        total = total + np.sum(c0 * expr) + np.sum(c1 * d_expr)
    return float(grid.cell_volume * total)


def ball_weights(grid: Grid, center, radius: float):
    """Cell-averaged indicator of the ball B_radius(center) on its bounding box.

    Returns ``(slices, weights)`` with ``weights`` shaped like ``grid.shape``
    restricted to ``slices``; nodes outside the field ball get weight 0.
    """
    center = np.asarray(center, dtype=float)
    h, c = grid.h, (grid.n - 1) // 2
    lo = np.maximum(np.floor((center - radius) / h).astype(int) + c - 1, 0)
    hi = np.minimum(np.ceil((center + radius) / h).astype(int) + c + 2, grid.n)
    slices = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
    offsets = grid.points[slices] - center
    rho_eff, half, sides = _offset_geometry(offsets, h)
    t = radius - rho_eff
    w = (t >= half).astype(float)
    near = np.abs(t) < half
    if near.any():
        w[near] = np.clip(_spline_moment(t[near], sides[near], 0), 0.0, 1.0)
    w[~grid.mask[slices]] = 0.0
    return slices, w


def ball_mean_square(field: ScalarField, x0, r: float) -> float:
    """Mean of u^2 over the lattice nodes of the closed ball B_r(x0)."""
    g = field.grid
    x0 = np.asarray(x0, dtype=float)
    if r < 4.0 * g.h:
        raise ResolutionError(f"under-resolved radius: r={r} < 4h={4.0 * g.h}")
    if np.linalg.norm(x0) + r > g.R * (1.0 + 1e-12):
        raise ResolutionError(f"ball B_{r}({x0.tolist()}) leaves the domain of radius {g.R}")
    inside = np.sum((g.points - x0) ** 2, axis=-1) <= r * r * (1.0 + 1e-12)
    vals = field.values[inside]
    return float(np.sum(vals * vals) / vals.size)


_HEADER = struct.Struct("<iid")


def write_field(path, field: ScalarField) -> None:
    """Flat binary layout: little-endian int32 d, int32 n, float64 R, then n^d float64 row-major."""
    g = field.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(g.d, g.n, g.R))
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_field(path) -> ScalarField:
    raw = Path(path).read_bytes()
    d, n, R = _HEADER.unpack_from(raw)
    grid = Grid(d, n, R)
    count = n**d
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != count:
        raise ValueError(f"{path}: expected {count} samples, found {body.size}")
    return ScalarField(grid, body.reshape(grid.shape))
