"""Lagrangians L(x, s, p) = |p|^2 / 2 + F(x, s, p) with closed-form derivatives.

Shipped families (all independent of s):

    quadratic     F = 0
    power         F = |p|^q / q
    double_phase  F = a(x) |p|^q
    multiphase    F = a(x) |p|^q + b(x) |p|^s

Arrays follow the convention ``x: (..., d)``, ``s: (...)``, ``p: (..., d)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .grid import ScalarField, gradient
from .report import VerificationReport

FAMILIES = ("quadratic", "power", "double_phase", "multiphase")


@dataclass(frozen=True)
class CoefficientSpec:
    """Non-negative Lipschitz coefficient a(x).

    ``bump`` is ``height * (1 - |x - center|^2 / width^2)_+^2``: C^1, vanishing
    outside the ball of radius ``width``.
    """

    kind: str = "constant"
    value: float = 1.0
    slope: tuple = ()
    offset: float = 0.0
    center: tuple = ()
    width: float = 1.0
    height: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "affine", "bump"):
            raise ValueError(f"unknown coefficient kind {self.kind!r}")
        if self.kind == "constant" and self.value < 0:
            raise ValueError("constant coefficient must be non-negative")
        if self.kind == "bump" and (self.height < 0 or self.width <= 0):
            raise ValueError("bump needs height >= 0 and width > 0")

    def _vec(self, v, d):
        v = np.zeros(d) if len(v) == 0 else np.asarray(v, dtype=float)
        if v.shape != (d,):
            raise ValueError(f"coefficient vector {tuple(v)} does not match dimension {d}")
        return v

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        if self.kind == "constant":
            return np.full(x.shape[:-1], float(self.value))
        if self.kind == "affine":
            return self.offset + x @ self._vec(self.slope, d)
        q = np.sum((x - self._vec(self.center, d)) ** 2, axis=-1) / self.width**2
        return self.height * np.maximum(1.0 - q, 0.0) ** 2

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        if self.kind == "constant":
            return np.zeros(x.shape)
        if self.kind == "affine":
            return np.broadcast_to(self._vec(self.slope, d), x.shape).copy()
        y = x - self._vec(self.center, d)
        q = np.sum(y * y, axis=-1) / self.width**2
        return (-4.0 * self.height / self.width**2 * np.maximum(1.0 - q, 0.0))[..., None] * y

    def lipschitz(self) -> float:
        if self.kind == "constant":
            return 0.0
        if self.kind == "affine":
            return float(np.linalg.norm(self.slope)) if len(self.slope) else 0.0
        # max of |d/dr h (1 - r^2/w^2)^2| is attained at r = w / sqrt(3)
        return 8.0 * self.height / (3.0 * math.sqrt(3.0) * self.width)

    def is_nonnegative(self, R: float, d: int) -> bool:
        if self.kind == "affine":
            return self.offset - np.linalg.norm(self._vec(self.slope, d)) * R >= 0
        return True


@dataclass(frozen=True)
class Lagrangian:
    family: str = "quadratic"
    q: float = 3.0
    s_exp: float = 3.0
    a: CoefficientSpec = field(default_factory=CoefficientSpec)
    b: CoefficientSpec = field(default_factory=CoefficientSpec)
    gamma: float | None = None
    growth_C: float = 1.0
    delta0: float = 0.1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown lagrangian family {self.family!r}; expected one of {FAMILIES}")
        if not 0 < self.delta0 < 1:
            raise ValueError("delta0 must lie in (0, 1)")
        if self.growth_C <= 0:
            raise ValueError("growth constant C must be positive")

    @property
    def growth_gamma(self) -> float:
        """Growth exponent: the configured value, else q - 2 (1 for the quadratic family)."""
        if self.gamma is not None:
            return float(self.gamma)
        return 1.0 if self.family == "quadratic" else self.q - 2.0

    @property
    def kappa(self) -> float:
        return self.growth_gamma / 2.0


def _norm(p):
    return np.sqrt(np.sum(np.asarray(p, dtype=float) ** 2, axis=-1))


def eval_F(lag: Lagrangian, x, s, p):
    """F(x, s, p)."""
    np_ = _norm(p)
    if lag.family == "quadratic":
        return np.zeros_like(np_)
    if lag.family == "power":
        return np_**lag.q / lag.q
    out = lag.a(x) * np_**lag.q
    if lag.family == "multiphase":
        out = out + lag.b(x) * np_**lag.s_exp
    return out


def grad_p_F(lag: Lagrangian, x, s, p):
    """Gradient of F in p; |p|^(q-2) p extends continuously by 0 at p = 0."""
    p = np.asarray(p, dtype=float)
    np_ = _norm(p)[..., None]
    if lag.family == "quadratic":
        return np.zeros_like(p)
    if lag.family == "power":
        return np_ ** (lag.q - 2.0) * p
    coef = lag.q * lag.a(x)[..., None] * np_ ** (lag.q - 2.0)
    if lag.family == "multiphase":
        coef = coef + lag.s_exp * lag.b(x)[..., None] * np_ ** (lag.s_exp - 2.0)
    return coef * p


def ds_F(lag: Lagrangian, x, s, p):
    """Partial derivative of F in s (identically zero for the shipped families)."""
    return np.zeros_like(_norm(p))


def s_times_ds_F(lag: Lagrangian, x, s, p):
    return np.asarray(s, dtype=float) * ds_F(lag, x, s, p)


def grad_x_F(lag: Lagrangian, x, s, p):
    x = np.asarray(x, dtype=float)
    if lag.family in ("quadratic", "power"):
        return np.zeros(np.broadcast_shapes(x.shape, np.shape(p)))
    np_ = _norm(p)[..., None]
    out = lag.a.grad(x) * np_**lag.q
    if lag.family == "multiphase":
        out = out + lag.b.grad(x) * np_**lag.s_exp
    return out


@dataclass(frozen=True)
class ExponentReport:
    ok: bool
    message: str
    bound: float | None = None


def validate_exponents(lag: Lagrangian, d: int) -> ExponentReport:
    """Check the exponent range under which each family is admissible in dimension d."""
    if lag.family == "quadratic":
        return ExponentReport(True, "quadratic: no exponent constraint")
    q = lag.q
    if lag.family == "power":
        bound = 2.0 + min(2.0, 4.0 / (d - 1))
        name = "2 < q <= 2 + min(2, 4/(d-1))"
    else:
        bound = 2.0 + 2.0 / d
        name = "2 < q <= 2 + 2/d" if lag.family == "double_phase" else "2 < q <= s <= 2 + 2/d"
    if not q > 2:
        return ExponentReport(False, f"{lag.family}: q={q} violates q > 2 ({name})", bound)
    if lag.family == "multiphase":
        s = lag.s_exp
        if q > s:
            return ExponentReport(False, f"multiphase: q={q} > s={s} violates q <= s ({name})", bound)
        if s > bound:
            return ExponentReport(False, f"multiphase: s={s} > {bound:g} ({name})", bound)
        return ExponentReport(True, f"multiphase: {q} <= {s} <= {bound:g}", bound)
    if q > bound:
        return ExponentReport(False, f"{lag.family}: q={q} > {bound:g} ({name}, d={d})", bound)
    return ExponentReport(True, f"{lag.family}: q={q} <= {bound:g}", bound)


def check_growth_conditions(
    lag: Lagrangian,
    sample_count: int = 4096,
    neighborhood_radius: float | None = None,
    gamma: float | None = None,
    C: float | None = None,
    d: int = 2,
    R: float = 1.0,
    seed: int = 20240,
) -> VerificationReport:
    """Sample (x, s, p) near the origin and measure the three structure ratios.

    The neighbourhood is the box |x_i| <= R, |s| <= rho, |p_i| <= rho with
    rho = ``neighborhood_radius`` (default delta0).  Each ratio passes iff its
    maximum is <= C.
    """
    if sample_count < 1000:
        raise ValueError("sample_count must be at least 1000")
    rho = lag.delta0 if neighborhood_radius is None else float(neighborhood_radius)
    if rho > lag.delta0:
        raise ValueError(f"neighborhood radius {rho} exceeds delta0={lag.delta0}")
    gamma = lag.growth_gamma if gamma is None else float(gamma)
    C = lag.growth_C if C is None else float(C)

    u = qmc.Halton(d=2 * d + 1, scramble=True, seed=seed).random(sample_count)
    x = R * (2.0 * u[:, :d] - 1.0)
    s = rho * (2.0 * u[:, d] - 1.0)
    p = rho * (2.0 * u[:, d + 1 :] - 1.0)
    np_, as_ = _norm(p), np.abs(s)

    num_x = np.abs(eval_F(lag, x, s, p)) + _norm(grad_x_F(lag, x, s, p))
    num_p = _norm(grad_p_F(lag, x, s, p))
    num_s = np.abs(s_times_ds_F(lag, x, s, p))
    den_2 = np_ ** (2.0 + gamma) + as_**2
    den_1 = np_ ** (1.0 + gamma) + as_ ** (1.0 + gamma)

    def worst(num, den):
        ok = den > 0
        return float(np.max(num[ok] / den[ok])) if ok.any() else 0.0

    rep = VerificationReport(
        params={
            "family": lag.family,
            "gamma": gamma,
            "C": C,
            "samples": sample_count,
            "neighborhood": {"x_box": R, "s_max": rho, "p_box": rho},
        }
    )
    for name, val in (
        ("growth_F_and_grad_x", worst(num_x, den_2)),
        ("growth_grad_p", worst(num_p, den_1)),
        ("growth_s_derivative", worst(num_s, den_2)),
    ):
        rep.add(name, val <= C, value=val, tolerance=C)
    return rep


def energy(lag: Lagrangian, field_: ScalarField) -> float:
    """h^d * sum over in-ball nodes of |grad u|^2 / 2 + F(x, u, grad u)."""
    g = field_.grid
    m = g.mask
    du = gradient(field_)[m]
    dens = 0.5 * np.sum(du * du, axis=-1) + eval_F(lag, g.points[m], field_.values[m], du)
    return float(g.cell_volume * np.sum(dens))
