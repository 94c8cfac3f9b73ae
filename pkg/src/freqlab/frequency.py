"""Weighted frequency quantities and the variation identities they satisfy.

At a radius r, with phi = phi(|x|/r), phi' its derivative in the scaled
variable and nu = x/|x|:

    H  = int (-phi') u^2 / |x|          D0 = int phi |grad u|^2
    Dl = int phi u d_sF                 D  = D0 + Dl
    G  = int phi u^2                    A  = int (-phi') |x| (d_nu u)^2
    B  = int (-phi') u d_nu u           N  = r D / H

Identities (exact for stationary points of the energy):

    H' - (d-1) H / r - 2 B / r = 0
    D - B / r + e_O = 0
    (d-2) D / 2 - r D' / 2 + A / r + e_i1 + e_i2 + r Dl' / 2 = 0

Radial derivatives are fourth-order central differences with step r/50.
All integrals here use the first-moment corrected lattice quadrature (see
``grid.weighted_integral``), which is smooth in r.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grid import (
    CutoffSpec,
    ResolutionError,
    ScalarField,
    ball_mean_square,
    check_radius,
    cutoff_weights,
    gradient,
    radial_derivative,
)
from .lagrangian import Lagrangian, eval_F, grad_p_F, grad_x_F, s_times_ds_F
from .report import VerificationReport

CSV_COLUMNS = (
    "r", "H", "D0", "Dl", "D", "G", "A", "B", "N", "g", "Ncorr",
    "defect_H", "defect_outer", "defect_inner", "env_outer", "env_inner", "doubling", "cs_gap",
)
H_STEP = 1.0 / 50.0
_FD = ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0))  # f' ~ sum c f(r + k h) / (12 h)


class HeightVanishes(ValueError):
    pass


class CenterNotSingular(ValueError):
    pass


@dataclass(frozen=True)
class FrequencyComponents:
    r: float
    H: float
    D0: float
    Dl: float
    G: float
    A: float
    B: float

    @property
    def D(self) -> float:
        return self.D0 + self.Dl

    @property
    def cs_gap(self) -> float:
        return self.A * self.H - self.B**2


def _pointwise(field_: ScalarField, lag: Lagrangian) -> dict:
    """Nodal integrands, computed once per (field, lagrangian) and cached on the field."""
    cache = field_.__dict__.setdefault("_freq_cache", {})
    if lag in cache:
        return cache[lag]
    g = field_.grid
    m = g.mask
    x = g.points[m]
    rho = g.radius[m]
    u = field_.values[m]
    du = gradient(field_)[m]
    with np.errstate(invalid="ignore", divide="ignore"):
        nu = np.where(rho[:, None] > 0, x / np.where(rho > 0, rho, 1.0)[:, None], 0.0)
    dnu = np.sum(du * nu, axis=-1)
    F = eval_F(lag, x, u, du)
    gp = grad_p_F(lag, x, u, du)
    gx = grad_x_F(lag, x, u, du)
    sds = s_times_ds_F(lag, x, u, du)
    gp_nu = np.sum(gp * nu, axis=-1)
    ngrad = np.sqrt(np.sum(du * du, axis=-1))
    kap = lag.kappa
    au = np.abs(u)
    local = {
        "u2": u * u,
        "du2": ngrad**2,
        "dnu2": dnu * dnu,
        "u_dnu": u * dnu,
        "sds": sds,
        "du_gp": np.sum(du * gp, axis=-1),
        "u_gp_nu": u * gp_nu,
        "inner1": g.d * F + np.sum(x * gx, axis=-1) - np.sum(du * gp, axis=-1),
        "inner2": F - dnu * gp_nu,
        "u_2k": au ** (2 + kap),
        "du_2k": ngrad ** (2 + kap),
        "u_du_1k": au * ngrad ** (1 + kap),
    }
    out = {}
    for key, val in local.items():
        full = np.zeros(g.shape)
        full[m] = val
        full.flags.writeable = False
        out[key] = full
        dfull = radial_derivative(g, full)
        dfull.flags.writeable = False
        out[key + "'"] = dfull
    out["sup_u"] = float(np.max(np.abs(u))) if u.size else 0.0
    cache[lag] = out
    return out


def _integrals(field_, lag, r, cutoff, names):
    g = field_.grid
    check_radius(g, r, cutoff)
    w = cutoff_weights(g, r, cutoff)
    pw = _pointwise(field_, lag)
    vol = g.cell_volume
    out = {}
    for name, (weight, key) in names.items():
        c0, c1 = w[weight + "@"]
        f, df = pw[key], pw[key + "'"]
        out[name] = vol * float(np.sum(w[weight] * f) + np.sum(c0 * f) + np.sum(c1 * df))
    return out


_COMPONENTS = {
    "H": ("minus_phi_prime_over_absx", "u2"),
    "D0": ("phi", "du2"),
    "Dl": ("phi", "sds"),
    "G": ("phi", "u2"),
    "A": ("minus_phi_prime_times_absx", "dnu2"),
    "B": ("minus_phi_prime", "u_dnu"),
}


def components(field_: ScalarField, lag: Lagrangian, r: float, cutoff: CutoffSpec | None = None) -> FrequencyComponents:
    cutoff = cutoff or CutoffSpec()
    v = _integrals(field_, lag, r, cutoff, _COMPONENTS)
    return FrequencyComponents(r=float(r), **v)


def _height_tol(field_, lag, r):
    return 1e-14 * _pointwise(field_, lag)["sup_u"] ** 2 * r ** (field_.grid.d - 1)


def frequency_N(c: FrequencyComponents, r: float | None = None, tol_H: float = 0.0) -> float:
    r = c.r if r is None else r
    if c.H <= tol_H:
        raise HeightVanishes(f"height vanishes at r={r} (H={c.H:.3e})")
    return r * c.D / c.H


def _derivative(fn, r, h_r):
    return sum(c * fn(r + k * h_r) for k, c in _FD) / (12.0 * h_r)


def height_identity_defect(field_, r, h_r=None, cutoff=None, lag=None) -> float:
    """|H' - (d-1)H/r - 2B/r| / max(H/r, tol)."""
    lag = lag or Lagrangian()
    cutoff = cutoff or CutoffSpec()
    h_r = r * H_STEP if h_r is None else h_r
    d = field_.grid.d
    c = components(field_, lag, r, cutoff)
    dH = _derivative(lambda s: components(field_, lag, s, cutoff).H, r, h_r)
    raw = dH - (d - 1) * c.H / r - 2 * c.B / r
    scale = max(c.H / r, _height_tol(field_, lag, r) / r)
    return abs(raw) / scale if scale > 0 else abs(raw)


def _outer_parts(field_, lag, r, cutoff):
    v = _integrals(
        field_, lag, r, cutoff,
        {
            "phi_du_gp": ("phi", "du_gp"),
            "mpp_u_gp_nu": ("minus_phi_prime", "u_gp_nu"),
            "e1": ("phi", "u_2k"),
            "e2": ("phi", "du_2k"),
            "e3": ("minus_phi_prime", "u_2k"),
            "e4": ("minus_phi_prime", "u_du_1k"),
        },
    )
    e_O = v["phi_du_gp"] - v["mpp_u_gp_nu"] / r
    env = v["e1"] + v["e2"] + v["e3"] + v["e4"]
    return e_O, env


def outer_defect(field_, lag, r, cutoff=None):
    """(D - B/r + e_O, envelope) at radius r (raw, not normalized)."""
    cutoff = cutoff or CutoffSpec()
    c = components(field_, lag, r, cutoff)
    e_O, env = _outer_parts(field_, lag, r, cutoff)
    return c.D - c.B / r + e_O, env


def _inner_parts(field_, lag, r, cutoff):
    d = field_.grid.d
    v = _integrals(
        field_, lag, r, cutoff,
        {
            "psi_inner1": ("phi", "inner1"),
            "mppx_inner2": ("minus_phi_prime_times_absx", "inner2"),
            "mppx_sds": ("minus_phi_prime_times_absx", "sds"),
            "Dl": ("phi", "sds"),
            "e1": ("phi", "u2"),
            "e2": ("phi", "du_2k"),
            "e3": ("minus_phi_prime", "u2"),
            "e4": ("minus_phi_prime", "du_2k"),
        },
    )
    e_i1 = v["psi_inner1"] - 0.5 * (d - 2) * v["Dl"]
    e_i2 = -v["mppx_inner2"] / r
    dDl = v["mppx_sds"] / r**2
    env = v["e1"] + v["e2"] + v["e3"] + v["e4"]
    return e_i1 + e_i2 + 0.5 * r * dDl, env


def inner_defect(field_, lag, r, h_r=None, cutoff=None):
    """((d-2)D/2 - rD'/2 + A/r + e_i1 + e_i2 + r Dl'/2, envelope) at radius r."""
    cutoff = cutoff or CutoffSpec()
    h_r = r * H_STEP if h_r is None else h_r
    d = field_.grid.d
    c = components(field_, lag, r, cutoff)
    dD = _derivative(lambda s: components(field_, lag, s, cutoff).D, r, h_r)
    E_I, env = _inner_parts(field_, lag, r, cutoff)
    return 0.5 * (d - 2) * c.D - 0.5 * r * dD + c.A / r + E_I, env


def log_derivative_check(field_, lag, r, h_r=None, cutoff=None) -> dict:
    """Compare d ln N / dr with 2(AH - B^2)/(r^2 D H) + 2 B e_O/(r D H) + e_I/(r D)."""
    cutoff = cutoff or CutoffSpec()
    h_r = r * H_STEP if h_r is None else h_r
    c = components(field_, lag, r, cutoff)
    lnN = lambda s: math.log(frequency_N(components(field_, lag, s, cutoff)))  # noqa: E731
    lhs = _derivative(lnN, r, h_r)
    e_O, _ = _outer_parts(field_, lag, r, cutoff)
    E_I, _ = _inner_parts(field_, lag, r, cutoff)
    cs = 2.0 * c.cs_gap / (r * r * c.D * c.H)
    rhs = cs + 2.0 * c.B * e_O / (r * c.D * c.H) + 2.0 * E_I / (r * c.D)
    scale = abs(cs) + abs(lhs) + 1.0 / r
    return {"r": r, "lhs": lhs, "rhs": rhs, "cs_term": cs, "defect": abs(lhs - rhs) / scale}


def default_beta(lag: Lagrangian, alpha: float = 0.5, lam: float = 0.5) -> float:
    return min(alpha * lam * lag.kappa, 0.5)


def default_radii(grid, cutoff: CutoffSpec | None = None, r_max: float | None = None, growth: float = 1.1, r_min=None):
    """Geometric radii from the smallest resolved radius (including the r/50 stencil) up to 0.8 R."""
    cutoff = cutoff or CutoffSpec()
    lo = max(8 * grid.h, 2 * grid.h / ((1 - cutoff.upsilon) * (1 - 2 * H_STEP))) * (1 + 1e-9)
    lo = lo if r_min is None else max(lo, r_min)
    hi = 0.8 * grid.R if r_max is None else r_max
    out = []
    r = lo
    while r <= hi * (1 + 1e-12):
        out.append(r)
        r *= growth
    return out


@dataclass
class RadialProfile:
    radii: list
    rows: list
    params: dict = field(default_factory=dict)
    truncated_at: float | None = None

    def column(self, name):
        return np.array([row[name] for row in self.rows], dtype=float)

    def to_csv(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(_fmt(row[c]) for c in CSV_COLUMNS))
        return "\n".join(lines) + "\n"

    def monotonicity(self, tol: float = 1e-3) -> dict:
        """Per-step relative decreases of e^g N beyond ``tol``, plus the monotone-factor checks."""
        nc = self.column("Ncorr")
        violations, worst = [], 0.0
        for i in range(len(nc) - 1):
            if nc[i] > 0:
                drop = (nc[i] - nc[i + 1]) / nc[i]
                worst = max(worst, drop)
                if drop > tol:
                    violations.append({"r0": self.radii[i], "r1": self.radii[i + 1], "relative_drop": drop})
        gcol = self.column("g")
        D0, G = self.column("D0"), self.column("G")
        return {
            "tolerance": tol,
            "steps": max(len(nc) - 1, 0),
            "violations": violations,
            "max_relative_drop": max(worst, 0.0),
            "g_increasing": bool(np.all(np.diff(gcol) >= 0)),
            "g_min": float(gcol[0]) if len(gcol) else None,
            "D0_nondecreasing": bool(np.all(np.diff(D0) >= 0)),
            "G_nondecreasing": bool(np.all(np.diff(G) >= 0)),
            "truncated_at": self.truncated_at,
        }


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    return repr(float(v))


def _scan_row(field_, lag, r, cutoff, C_g, beta, h_r_frac):
    d = field_.grid.d
    h_r = r * h_r_frac
    comps = {k: components(field_, lag, r + k * h_r, cutoff) for k in (-2, -1, 0, 1, 2)}
    c = comps[0]
    tol_H = _height_tol(field_, lag, r)
    if c.H <= tol_H:
        raise HeightVanishes(f"height vanishes at r={r}")
    N = frequency_N(c, r)
    gval = C_g / beta * (r**beta + max(c.D, 0.0) ** beta)
    dH = sum(w * comps[k].H for k, w in _FD) / (12 * h_r)
    dD = sum(w * comps[k].D for k, w in _FD) / (12 * h_r)
    e_O, env_o = _outer_parts(field_, lag, r, cutoff)
    E_I, env_i = _inner_parts(field_, lag, r, cutoff)
    dscale = max(c.D0, abs(c.B) / r)
    rel = (lambda x: abs(x) / dscale) if dscale > 0 else abs
    defect_H = abs(dH - (d - 1) * c.H / r - 2 * c.B / r) / max(c.H / r, tol_H / r)
    outer = c.D - c.B / r + e_O
    inner = 0.5 * (d - 2) * c.D - 0.5 * r * dD + c.A / r + E_I
    try:
        check_radius(field_.grid, r / 2, cutoff)
        G_half = components(field_, lag, r / 2, cutoff).G
        doubling = c.G / G_half if G_half > 0 else math.inf
    except ResolutionError:
        doubling = math.nan
    lnN = [math.log(frequency_N(comps[k], r + k * h_r)) if comps[k].D > 0 else math.nan for k in (-2, -1, 1, 2)]
    dlnN = (lnN[0] - 8 * lnN[1] + 8 * lnN[2] - lnN[3]) / (12 * h_r)
    if c.D > 0:
        cs = 2.0 * c.cs_gap / (r * r * c.D * c.H)
        rhs = cs + 2.0 * c.B * e_O / (r * c.D * c.H) + 2.0 * E_I / (r * c.D)
        logdef = abs(dlnN - rhs) / (abs(cs) + abs(dlnN) + 1.0 / r)
    else:
        logdef = math.nan
    return {
        "r": r, "H": c.H, "D0": c.D0, "Dl": c.Dl, "D": c.D, "G": c.G, "A": c.A, "B": c.B,
        "N": N, "g": gval, "Ncorr": math.exp(gval) * N,
        "defect_H": defect_H, "defect_outer": rel(outer), "defect_inner": rel(inner),
        "env_outer": env_o, "env_inner": env_i, "doubling": doubling, "cs_gap": c.cs_gap,
        "e_outer": e_O, "e_inner": 2.0 * E_I, "raw_outer": outer, "raw_inner": inner,
        "log_derivative_defect": logdef,
    }


def corrected_frequency_scan(
    field_: ScalarField,
    lag: Lagrangian,
    radii=None,
    C_g: float = 1.0,
    beta: float | None = None,
    cutoff: CutoffSpec | None = None,
    threads: int = 1,
    h_r_frac: float = H_STEP,
) -> RadialProfile:
    """Full radial profile of N, e^g N and the identity defects.

    Radii are processed independently (optionally on a thread pool) and
    assembled in input order, so the output does not depend on ``threads``.
    The scan stops at the first radius where the height vanishes.
    """
    cutoff = cutoff or CutoffSpec()
    beta = default_beta(lag) if beta is None else beta
    if C_g < 0 or not 0 < beta <= 1:
        raise ValueError("need C_g >= 0 and beta in (0, 1]")
    radii = default_radii(field_.grid, cutoff) if radii is None else [float(r) for r in radii]
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be strictly increasing")
    for r in radii:
        check_radius(field_.grid, r * (1 - 2 * h_r_frac), cutoff)
        check_radius(field_.grid, r * (1 + 2 * h_r_frac), cutoff)
    _pointwise(field_, lag)

    def job(r):
        try:
            return _scan_row(field_, lag, r, cutoff, C_g, beta, h_r_frac)
        except HeightVanishes:
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(job, radii))
    else:
        rows = [job(r) for r in radii]
    truncated = None
    for i, row in enumerate(rows):
        if row is None:
            truncated = radii[i]
            rows = rows[:i]
            break
    params = {
        "C_g": C_g,
        "beta": beta,
        "upsilon": cutoff.upsilon,
        "cutoff_variant": cutoff.variant,
        "h_r_over_r": h_r_frac,
        "kappa": lag.kappa,
        "gamma": lag.growth_gamma,
    }
    return RadialProfile([row["r"] for row in rows], rows, params, truncated)


def _center_values(field_):
    g = field_.grid
    c = g.center_index
    return field_.values[c], gradient(field_)[c]


def check_singular_center(field_, rel_tol: float = 1e-6) -> None:
    """Raise unless u(0) = 0 and grad u(0) = 0 up to ``rel_tol`` * sup|u| (gradient scaled by R)."""
    u0, du0 = _center_values(field_)
    sup = field_.sup()
    if sup == 0:
        raise HeightVanishes("field vanishes identically")
    if abs(u0) > rel_tol * sup or field_.grid.R * np.linalg.norm(du0) > rel_tol * sup:
        raise CenterNotSingular(
            f"center not singular: u(0)={u0:.3e}, |grad u(0)|={np.linalg.norm(du0):.3e}, sup|u|={sup:.3e}"
        )


def poincare_ratio(field_: ScalarField, c: FrequencyComponents, r: float | None = None, rel_tol: float = 1e-6):
    """(r D0 / H, G / (r^2 D0)) after checking that the center is a singular point."""
    check_singular_center(field_, rel_tol)
    r = c.r if r is None else r
    if c.H <= 0:
        raise HeightVanishes(f"height vanishes at r={r}")
    second = c.G / (r * r * c.D0) if c.D0 > 0 else math.inf
    return r * c.D0 / c.H, second


def outer_equivalence(c: FrequencyComponents, r: float | None = None) -> float:
    """B / (r D0), the computable surrogate for the ratio between the auxiliary energy and D0."""
    r = c.r if r is None else r
    if c.D0 <= 0:
        raise ValueError(f"D0 vanishes at r={r}")
    return c.B / (r * c.D0)


def doubling_and_vanishing(
    field_: ScalarField,
    x0=None,
    radii=None,
    cutoff: CutoffSpec | None = None,
    order_cap: float = 10.0,
) -> VerificationReport:
    """Doubling ratios G(r)/G(r/2) and the vanishing order at x0.

    The vanishing order is half the least-squares slope of log mean(u^2 on B_r)
    against log r.  For centers off the origin the doubling ratio uses plain
    ball integrals in place of G.
    """
    g = field_.grid
    cutoff = cutoff or CutoffSpec()
    x0 = np.zeros(g.d) if x0 is None else np.asarray(x0, dtype=float)
    at_origin = not np.any(x0)
    radii = default_radii(g, cutoff, r_max=0.8 * (g.R - np.linalg.norm(x0))) if radii is None else list(radii)
    lag = Lagrangian()

    means, used = [], []
    for r in radii:
        if r < 4 * g.h or np.linalg.norm(x0) + r > g.R:
            continue
        means.append(ball_mean_square(field_, x0, r))
        used.append(r)
    if len(used) < 3:
        raise ValueError(f"need at least 3 usable radii, got {len(used)}")

    ratios = []
    for r in used:
        try:
            if at_origin:
                check_radius(g, r / 2, cutoff)
                top = components(field_, lag, r, cutoff).G
                bot = components(field_, lag, r / 2, cutoff).G
            else:
                if r / 2 < 4 * g.h:
                    continue
                top = ball_mean_square(field_, x0, r) * r**g.d
                bot = ball_mean_square(field_, x0, r / 2) * (r / 2) ** g.d
        except ResolutionError:
            continue
        ratios.append({"r": r, "ratio": top / bot if bot > 0 else (math.nan if top == 0 else math.inf)})

    means = np.array(means)
    sup2 = field_.sup() ** 2
    zero = bool(np.all(means <= 1e-28 * max(sup2, 1e-300)))
    rep = VerificationReport(params={"x0": x0.tolist(), "radii": used, "order_cap": order_cap})
    if zero:
        rep.add("vanishing_order", True, None, status="identically zero")
        rep.add("doubling_ratio", True, None, status="identically zero", ratios=ratios)
        return rep
    pos = means > 0
    if pos.sum() < 3:
        rep.add("vanishing_order", False, math.inf, order_cap, status="infinite-order vanishing")
        return rep
    slope = np.polyfit(np.log(np.array(used)[pos]), np.log(means[pos]), 1)[0]
    order = 0.5 * float(slope)
    status = "infinite-order vanishing" if order > order_cap else "finite order"
    rep.add("vanishing_order", order <= order_cap, order, order_cap, status=status)
    finite = [x["ratio"] for x in ratios if math.isfinite(x["ratio"])]
    rep.add(
        "doubling_ratio",
        len(finite) == len(ratios),
        max(finite) if finite else None,
        hard=False,
        ratios=ratios,
        predicted=2 ** (g.d + 2 * order),
    )
    return rep
