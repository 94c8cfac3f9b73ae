"""Discrete minimizers of  E(u) = int_B L(x, u, grad u)  with Dirichlet data.

The discrete energy lives on lattice edges.  For an edge from node i to
i + e_k the gradient has its k-th component as the forward difference and the
remaining components as the average of the central differences at both ends;
the edge carries  |p_k|^2 / 2 + F(x_e, u_e, p) / d.  Summing over the d edge
directions reproduces  int |grad u|^2 / 2 + F  to second order, and the exact
gradient of this sum is (minus h^d times) the divergence of the staggered
flux, which is what ``el_residual`` measures.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, splu

from .grid import Grid, ScalarField, gradient
from .lagrangian import Lagrangian, ds_F, eval_F, grad_p_F, validate_exponents
from .report import VerificationReport

log = logging.getLogger(__name__)

RING_WIDTH = 1.5  # in units of h: nodes with |x| > R - 1.5h hold the boundary datum
RESIDUAL_MARGIN = 3.0  # el_residual looks at nodes with |x| <= R - 3h


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class LineSearchError(ConvergenceError):
    pass


@dataclass(frozen=True)
class SolveOptions:
    max_iterations: int = 400
    gradient_tolerance: float = 1e-10
    backtrack: float = 0.5
    armijo: float = 1e-4
    initial_guess: str = "harmonic"
    custom_initial: Callable | None = None
    restart_every: int | None = None

    def __post_init__(self):
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if not 0 < self.armijo < 1:
            raise ValueError("sufficient-decrease constant must lie in (0, 1)")
        if self.initial_guess not in ("zero", "harmonic", "custom"):
            raise ValueError(f"unknown initial guess {self.initial_guess!r}")
        if self.initial_guess == "custom" and self.custom_initial is None:
            raise ValueError("initial_guess='custom' needs custom_initial")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class BoundaryDatum:
    """Closed-form boundary data, multiplied by ``scale``.

    ``harmonic_poly``: Re(((x1 + i x2) e^{-i rotation})^k), harmonic in any d.
    ``monomial``: prod x_j^{powers_j}.
    ``custom``: any vectorized callable of an (N, d) array.
    """

    kind: str = "harmonic_poly"
    k: int = 1
    rotation: float = 0.0
    powers: tuple = ()
    func: Callable | None = None
    scale: float = 0.05

    def __post_init__(self):
        if self.kind not in ("harmonic_poly", "monomial", "custom"):
            raise ValueError(f"unknown datum kind {self.kind!r}")
        if self.kind == "harmonic_poly" and self.k < 0:
            raise ValueError("harmonic degree must be >= 0")
        if self.kind == "custom" and self.func is None:
            raise ValueError("custom datum needs func")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "harmonic_poly":
            z = (x[..., 0] + 1j * x[..., 1]) * np.exp(-1j * self.rotation)
            base = np.real(z**self.k)
        elif self.kind == "monomial":
            if len(self.powers) != x.shape[-1]:
                raise ValueError(f"monomial powers {self.powers} do not match dimension {x.shape[-1]}")
            base = np.prod(x ** np.asarray(self.powers, dtype=float), axis=-1)
        else:
            base = np.asarray(self.func(x), dtype=float)
        return self.scale * base

    def describe(self) -> dict:
        out = {"kind": self.kind, "scale": self.scale}
        if self.kind == "harmonic_poly":
            out.update(k=self.k, rotation=self.rotation)
        elif self.kind == "monomial":
            out["powers"] = list(self.powers)
        return out


def _roll(a, shift, axis):
    return np.roll(a, shift, axis=axis)


def _border_ok(grid: Grid, k: int) -> np.ndarray:
    """Edges (i, i + e_k) whose full stencil has valid indices."""
    n, d = grid.n, grid.d
    ok = np.ones(grid.shape, dtype=bool)
    sl = [slice(None)] * d
    sl[k] = slice(n - 1, n)
    ok[tuple(sl)] = False
    for j in range(d):
        if j == k:
            continue
        for idx in (0, n - 1):
            sl = [slice(None)] * d
            sl[j] = slice(idx, idx + 1)
            ok[tuple(sl)] = False
    return ok


def _stencil_any(nodes: np.ndarray, k: int, combine) -> np.ndarray:
    """Combine a node mask over the stencil of every k-edge (before border masking)."""
    d = nodes.ndim
    out = nodes | _roll(nodes, -1, k) if combine is np.logical_or else nodes & _roll(nodes, -1, k)
    for j in range(d):
        if j == k:
            continue
        for s in (1, -1):
            a = _roll(nodes, s, j)
            b = _roll(a, -1, k)
            out = combine(combine(out, a), b)
    return out


class DiscreteEnergy:
    """Edge-based energy on a fixed set of active edges.

    ``active[k]`` marks the k-edges included.  All methods take the full
    cube array ``U`` (values outside the ball are whatever the caller put
    there; for the solver this is the datum's extension).
    """

    def __init__(self, lag: Lagrangian, grid: Grid, active: list):
        self.lag = lag
        self.grid = grid
        self.active = active
        self._mid = []
        self._idx = []
        for k in range(grid.d):
            idx = np.flatnonzero(active[k].ravel())
            pts = grid.points.reshape(-1, grid.d)[idx].copy()
            pts[:, k] += 0.5 * grid.h
            self._idx.append(idx)
            self._mid.append(pts)

    @classmethod
    def for_solver(cls, lag, grid, free):
        act = [_border_ok(grid, k) & _stencil_any(free, k, np.logical_or) for k in range(grid.d)]
        return cls(lag, grid, act)

    @classmethod
    def in_ball(cls, lag, grid):
        act = [_border_ok(grid, k) & _stencil_any(grid.mask, k, np.logical_and) for k in range(grid.d)]
        return cls(lag, grid, act)

    def _edge_terms(self, U, k):
        """Edge gradient P (m, d), edge mean value s (m,) on active k-edges."""
        g = self.grid
        h, d = g.h, g.d
        idx = self._idx[k]
        flat = U.ravel()
        Uk = _roll(U, -1, k).ravel()
        P = np.empty((idx.size, d))
        P[:, k] = (Uk[idx] - flat[idx]) / h
        for j in range(d):
            if j == k:
                continue
            C = (_roll(U, -1, j) - _roll(U, 1, j)) / (2.0 * h)
            P[:, j] = 0.5 * (C.ravel()[idx] + _roll(C, -1, k).ravel()[idx])
        s = 0.5 * (flat[idx] + Uk[idx])
        return P, s

    def edge_densities(self, U) -> list:
        out = []
        d = self.grid.d
        for k in range(d):
            P, s = self._edge_terms(U, k)
            e = 0.5 * P[:, k] ** 2 + eval_F(self.lag, self._mid[k], s, P) / d
            out.append(e)
        return out

    def value(self, U) -> float:
        """Energy divided by h^d (sum of edge densities)."""
        return float(sum(np.sum(e) for e in self.edge_densities(U)))

    def delta(self, U_new, U_old) -> tuple:
        """(E(U_new) - E(U_old)) / h^d summed edge by edge, plus a rounding allowance."""
        tot, scale = 0.0, 0.0
        for a, b in zip(self.edge_densities(U_new), self.edge_densities(U_old)):
            tot += float(np.sum(a - b))
            scale += float(np.sum(np.abs(b)))
        return tot, 64.0 * np.finfo(float).eps * scale

    def residual(self, U) -> np.ndarray:
        """div(flux) - d_sF at every node, i.e. -(1/h^d) dE/dU."""
        g = self.grid
        h, d = g.h, g.d
        grad = np.zeros(U.shape)
        for k in range(d):
            idx = self._idx[k]
            P, s = self._edge_terms(U, k)
            x = self._mid[k]
            gp = grad_p_F(self.lag, x, s, P) / d
            gs = ds_F(self.lag, x, s, P) / d

            def scatter(vals):
                a = np.zeros(U.size)
                a[idx] = vals
                return a.reshape(U.shape)

            Gk = scatter(P[:, k] + gp[:, k])
            grad += (_roll(Gk, 1, k) - Gk) / h
            Gs = scatter(gs)
            grad += 0.5 * (Gs + _roll(Gs, 1, k))
            for j in range(d):
                if j == k:
                    continue
                T = scatter(0.5 * gp[:, j])
                S = T + _roll(T, 1, k)
                grad += (_roll(S, 1, j) - _roll(S, -1, j)) / (2.0 * h)
        # grad now holds (1/h^d) dE/dU with the sign convention dE = sum grad dU
        return -grad


@dataclass
class SolveResult:
    field: ScalarField
    iterations: int
    residual: float
    energy: float
    energy_history: list = field(default_factory=list)
    restarts: int = 0
    tolerance: float = 0.0


def free_mask(grid: Grid) -> np.ndarray:
    return grid.mask & (grid.radius <= grid.R - RING_WIDTH * grid.h)


def _laplacian_on_free(grid: Grid, free: np.ndarray):
    """Sparse (-Delta_h) restricted to free nodes, plus the coupling to fixed nodes."""
    n_all = free.size
    ids = -np.ones(n_all, dtype=np.int64)
    fidx = np.flatnonzero(free.ravel())
    ids[fidx] = np.arange(fidx.size)
    h2 = grid.h**2
    rows, cols, vals = [np.arange(fidx.size)], [np.arange(fidx.size)], [np.full(fidx.size, 2 * grid.d / h2)]
    brow, bcol = [], []
    strides = np.array([grid.n ** (grid.d - 1 - k) for k in range(grid.d)])
    for k in range(grid.d):
        for s in (1, -1):
            nb = fidx + s * strides[k]
            nbid = ids[nb]
            inner = nbid >= 0
            rows.append(np.flatnonzero(inner))
            cols.append(nbid[inner])
            vals.append(np.full(inner.sum(), -1.0 / h2))
            brow.append(np.flatnonzero(~inner))
            bcol.append(nb[~inner])
    A = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(fidx.size, fidx.size)
    )
    B = sp.csr_matrix(
        (np.full(sum(len(b) for b in brow), 1.0 / h2), (np.concatenate(brow), np.concatenate(bcol))),
        shape=(fidx.size, n_all),
    )
    return fidx, A, B


class _LaplacianSolver:
    """Applies the inverse of the free-node Laplacian.

    Sparse LU in 2-D; in 3-D the LU fill-in is prohibitive, so a tight
    Jacobi-preconditioned CG solve of the same matrix is used instead.
    """

    def __init__(self, A, d):
        self.A = A
        self.lu = splu(A) if d == 2 else None
        self.diag_inv = 1.0 / A.diagonal()

    def solve(self, b):
        if self.lu is not None:
            return self.lu.solve(b)
        if not np.any(b):
            return np.zeros_like(b)
        x, info = cg(self.A, b, rtol=1e-13, atol=0.0, maxiter=5000, M=sp.diags(self.diag_inv))
        return x


def _datum_array(grid: Grid, datum) -> np.ndarray:
    vals = np.asarray(datum(grid.points.reshape(-1, grid.d)), dtype=float).reshape(grid.shape)
    ring = grid.mask & ~free_mask(grid)
    if not np.all(np.isfinite(vals[ring])):
        raise ValueError("boundary datum is not finite on the boundary ring")
    return np.where(np.isfinite(vals), vals, 0.0)


def minimize(lag: Lagrangian, datum, grid: Grid, opts: SolveOptions | None = None, return_info: bool = False):
    """Preconditioned nonlinear conjugate gradients on the discrete energy.

    Descent directions are Polak-Ribiere+ combinations of the residual
    preconditioned by the inverse discrete Laplacian on the free nodes; step
    lengths come from a secant estimate followed by Armijo backtracking.
    """
    opts = opts or SolveOptions()
    rep = validate_exponents(lag, grid.d)
    if not rep.ok:
        raise ValueError(f"inadmissible exponents: {rep.message}")

    free = free_mask(grid)
    U = _datum_array(grid, datum)
    fidx, A, B = _laplacian_on_free(grid, free)
    lu = _LaplacianSolver(A, grid.d)
    flatU = U.ravel()
    if opts.initial_guess == "harmonic":
        flatU[fidx] = lu.solve(B @ flatU)
    elif opts.initial_guess == "zero":
        flatU[fidx] = 0.0
    else:
        flatU[fidx] = np.asarray(opts.custom_initial(grid.points.reshape(-1, grid.d)[fidx]), dtype=float)

    energy = DiscreteEnergy.for_solver(lag, grid, free)
    restart_every = opts.restart_every or max(grid.n**grid.d // 10, 1)

    def free_residual(V):
        return energy.residual(V).ravel()[fidx]

    # the residual is a second difference quotient: it cannot resolve below ~eps * |u| / h^2
    floor = 32.0 * np.finfo(float).eps * 2 * grid.d * float(np.max(np.abs(U[grid.mask]), initial=0.0)) / grid.h**2
    tol = max(opts.gradient_tolerance, floor)

    r = free_residual(U)
    z = lu.solve(r)
    direction = z.copy()
    rz = float(r @ z)
    E = energy.value(U)
    history = [E]
    res = float(np.max(np.abs(r))) if r.size else 0.0
    it = restarts = 0
    since_restart = 0
    while res > tol:
        if it >= opts.max_iterations:
            raise ConvergenceError(
                f"no convergence in {opts.max_iterations} iterations (residual {res:.3e})", res, it
            )
        slope0 = -float(r @ direction)  # dE/dalpha at 0, in units of h^d
        if slope0 >= 0:
            direction, slope0 = z.copy(), -rz
            restarts += 1
        trial = U.copy()
        trial.ravel()[fidx] += direction
        slope1 = -float(free_residual(trial) @ direction)
        alpha = slope0 / (slope0 - slope1) if slope1 > slope0 else 1.0
        if not math.isfinite(alpha) or alpha <= 0:
            alpha = 1.0
        for _ in range(60):
            trial = U.copy()
            trial.ravel()[fidx] += alpha * direction
            dE, slack = energy.delta(trial, U)
            if dE <= opts.armijo * alpha * slope0 + slack:
                break
            alpha *= opts.backtrack
        else:
            raise LineSearchError(f"line search failed at iteration {it} (residual {res:.3e})", res, it)
        if dE > slack:
            raise LineSearchError(f"energy increased by {dE:.3e} at iteration {it}", res, it)
        U = trial
        E += dE
        history.append(E)
        it += 1
        since_restart += 1

        r_new = free_residual(U)
        z_new = lu.solve(r_new)
        rz_new = float(r_new @ z_new)
        beta = max(0.0, float(r_new @ (z_new - z)) / rz) if rz > 0 else 0.0
        if since_restart >= restart_every:
            beta, since_restart = 0.0, 0
            restarts += 1
        direction = z_new + beta * direction
        r, z, rz = r_new, z_new, rz_new
        res = float(np.max(np.abs(r)))
        log.debug("iter %d  residual %.3e  energy %.12e  alpha %.3g", it, res, E, alpha)

    out = ScalarField(grid, U)
    if not return_info:
        return out
    return SolveResult(out, it, res, E * grid.cell_volume, [e * grid.cell_volume for e in history], restarts, tol)


def el_residual(lag: Lagrangian, field_: ScalarField) -> float:
    """sup |div(grad u + grad_p F) - d_sF| over nodes with |x| <= R - 3h."""
    g = field_.grid
    R = DiscreteEnergy.in_ball(lag, g).residual(field_.values)
    inner = g.mask & (g.radius <= g.R - RESIDUAL_MARGIN * g.h)
    return float(np.max(np.abs(R[inner])))


def _ball_nodes(grid: Grid, x0, r):
    return np.sum((grid.points - np.asarray(x0, dtype=float)) ** 2, axis=-1) <= r * r * (1 + 1e-12)


def _check_ball(grid, x0, r):
    if np.linalg.norm(x0) + r > grid.R * (1 + 1e-12):
        raise ValueError(f"ball B_{r}({list(x0)}) leaves the domain of radius {grid.R}")


def caccioppoli_check(field_: ScalarField, k: float, x0, rho: float, r: float, cap: float | None = None):
    """Measured Caccioppoli constants on the super- and sublevel sets of k.

    C = int_{B_rho, u>k} |grad u|^2 * (r - rho)^2 / int_{B_r, u>k} (u - k)^2,
    and the same with u < k, (k - u)^2.  With no ``cap`` the constants are
    only reported; a zero denominator with a nonzero numerator always fails.
    """
    if not rho < r:
        raise ValueError("need rho < r")
    g = field_.grid
    x0 = np.asarray(x0, dtype=float)
    _check_ball(g, x0, r)
    u = field_.values
    du2 = np.sum(gradient(field_) ** 2, axis=-1)
    small, big = _ball_nodes(g, x0, rho) & g.mask, _ball_nodes(g, x0, r) & g.mask
    rep = VerificationReport(params={"k": k, "x0": x0.tolist(), "rho": rho, "r": r, "cap": cap})
    for name, level in (("super", u > k), ("sub", u < k)):
        num = g.cell_volume * float(np.sum(du2[small & level])) * (r - rho) ** 2
        den = g.cell_volume * float(np.sum(((u - k) ** 2)[big & level]))
        if den > 0:
            C = num / den
            rep.add(f"caccioppoli_{name}", cap is None or C <= cap, C, cap, status="measured")
        elif num == 0:
            rep.add(f"caccioppoli_{name}", True, None, cap, status="vacuous level")
        else:
            rep.add(f"caccioppoli_{name}", False, math.inf, cap, status="vacuous level with nonzero gradient")
    return rep


def _holder_seminorm(vals, pts, alpha, lo, hi, rng, pairs=10_000):
    """Sampled sup |f(x) - f(y)| / |x - y|^alpha over pairs with lo <= |x - y| <= hi."""
    m = len(pts)
    if m < 2:
        return 0.0
    i = rng.integers(0, m, size=4 * pairs)
    j = rng.integers(0, m, size=4 * pairs)
    dist = np.linalg.norm(pts[i] - pts[j], axis=-1)
    keep = np.flatnonzero((dist >= lo) & (dist <= hi))[:pairs]
    if keep.size == 0:
        return 0.0
    i, j, dist = i[keep], j[keep], dist[keep]
    diff = vals[i] - vals[j]
    diff = np.abs(diff) if diff.ndim == 1 else np.linalg.norm(diff, axis=-1)
    return float(np.max(diff / dist**alpha))


def default_balls(grid: Grid):
    """Origin-centred balls at R/2, R/4, R/8 plus off-centre balls along the axes."""
    out = []
    for frac in (0.5, 0.25, 0.125):
        r = frac * grid.R
        if r / 2 < 4 * grid.h:
            continue
        out.append((tuple([0.0] * grid.d), r))
        off = 0.5 * (grid.R - r)
        for k in range(min(grid.d, 2)):
            for s in (1.0, -1.0):
                c = [0.0] * grid.d
                c[k] = s * off
                out.append((tuple(c), r))
    return out


def linear_bound_check(
    field_: ScalarField,
    alpha: float = 0.5,
    exponent_mode: str = "sqrt",
    balls=None,
    cap: float | None = None,
    seed: int = 7,
) -> VerificationReport:
    """Measured constants in the local C^{0,alpha} bounds for u and r grad u.

    On each ball B_r(x) the norm on B_{r/2}(x) is sup + (r/2)^alpha [.]_alpha
    (scale-invariant Holder norm), divided by the mean of u^2 over B_r(x)
    (``mean``) or by its square root (``sqrt``).
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if exponent_mode not in ("mean", "sqrt"):
        raise ValueError("exponent_mode must be 'mean' or 'sqrt'")
    g = field_.grid
    balls = default_balls(g) if balls is None else balls
    du = gradient(field_)
    rng = np.random.default_rng(seed)
    rows = []
    violations = 0
    for x0, r in balls:
        _check_ball(g, x0, r)
        big = _ball_nodes(g, x0, r) & g.mask
        half = _ball_nodes(g, x0, r / 2) & g.mask
        pts = g.points[half]
        u, gu = field_.values[half], du[half]
        scale = (r / 2) ** alpha
        nu = float(np.max(np.abs(u))) + scale * _holder_seminorm(u, pts, alpha, 2 * g.h, r / 2, rng)
        ng = r * (
            float(np.max(np.linalg.norm(gu, axis=-1))) + scale * _holder_seminorm(gu, pts, alpha, 2 * g.h, r / 2, rng)
        )
        mean = float(np.mean(field_.values[big] ** 2))
        denom = mean if exponent_mode == "mean" else math.sqrt(mean)
        if denom > 0:
            ru, rg = nu / denom, ng / denom
        elif nu == 0 and ng == 0:
            ru = rg = 0.0
        else:
            ru = rg = math.inf
            violations += 1
        rows.append({"center": list(x0), "r": r, "norm_u": nu, "norm_grad": ng, "mean_sq": mean, "ratio_u": ru, "ratio_grad": rg})

    rep = VerificationReport(params={"alpha": alpha, "mode": exponent_mode, "balls": len(rows), "cap": cap})
    for key in ("ratio_u", "ratio_grad"):
        C = max((row[key] for row in rows), default=0.0)
        ok = violations == 0 and (cap is None or C <= cap)
        rep.add(f"linear_bound_{key[6:]}", ok, C, cap, violations=violations)
    central = sorted((row for row in rows if not any(row["center"])), key=lambda row: row["r"])
    if len(central) >= 2 and math.isfinite(central[0]["ratio_u"]) and central[-1]["ratio_u"] > 0:
        growth = central[0]["ratio_u"] / central[-1]["ratio_u"]
        rep.add(
            "linear_bound_scale_growth",
            True,
            growth,
            hard=False,
            note="ratio at smallest radius over ratio at largest radius (centred balls)",
        )
    rep.params["per_ball"] = rows
    return rep
