"""Critical set {u = 0, grad u = 0} on the lattice and its box-counting dimension."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .grid import ScalarField, gradient


def field_fingerprint(field_: ScalarField) -> str:
    g = field_.grid
    h = hashlib.sha256(f"{g.d}:{g.n}:{g.R!r}".encode())
    h.update(np.ascontiguousarray(field_.values, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class CriticalSet:
    indices: np.ndarray  # (count, d) integer lattice indices, lexicographically sorted
    points: np.ndarray  # (count, d) coordinates
    tol_u: float
    tol_g: float
    h: float
    d: int
    fingerprint: str = ""
    notes: list = field(default_factory=list)

    def __len__(self):
        return len(self.indices)


def default_tolerances(field_: ScalarField):
    """tol_u = 5 h^2 sup|u| and tol_g = 5 h sup|u| (both 0 for the zero field)."""
    h, scale = field_.grid.h, field_.sup()
    return 5.0 * h * h * scale, 5.0 * h * scale


def detect_critical(field_: ScalarField, tol_u: float | None = None, tol_g: float | None = None) -> CriticalSet:
    du_, dg_ = default_tolerances(field_)
    tol_u = du_ if tol_u is None else float(tol_u)
    tol_g = dg_ if tol_g is None else float(tol_g)
    if tol_u < 0 or tol_g < 0:
        raise ValueError("tolerances must be non-negative")
    g = field_.grid
    grad_norm = np.sqrt(np.sum(gradient(field_) ** 2, axis=-1))
    hit = g.mask & (np.abs(field_.values) <= tol_u) & (grad_norm <= tol_g)
    idx = np.argwhere(hit)  # row-major order is lexicographic
    return CriticalSet(idx, g.points[hit], tol_u, tol_g, g.h, g.d, field_fingerprint(field_))


def default_scales(cs: CriticalSet, R: float) -> list:
    """Box sides 2h, 4h, 8h, ... not exceeding R / 2."""
    out, s = [], 2.0 * cs.h
    while s <= R / 2 * (1 + 1e-12):
        out.append(s)
        s *= 2.0
    return out


def box_counts(cs: CriticalSet, scales) -> list:
    """Number of occupied boxes of side eps, boxes anchored at the origin."""
    out = []
    for eps in scales:
        cells = np.floor(cs.points / eps + 1e-9).astype(np.int64)
        out.append(int(len(np.unique(cells, axis=0))) if len(cells) else 0)
    return out


def box_dimension(cs: CriticalSet, scales=None, R: float | None = None, fit_scales: int = 3):
    """Least-squares slope of log N(eps) against log(1/eps).

    Scales with fewer than two occupied boxes are discarded.  The fit uses the
    ``fit_scales`` largest well-populated scales (at least 4^d boxes, so the
    extra box at each end of a curve does not dominate); a set with no such
    scale is point-like and is fitted on the largest scales with two or more
    boxes.  Fewer than two usable scales gives dimension 0.  Returns
    ``"empty"`` for an empty set; the estimate is clamped to [0, d].
    """
    if len(cs) == 0:
        return "empty"
    if scales is None:
        if R is None:
            R = float(np.max(np.abs(cs.points))) * 2 + 4 * cs.h
        scales = default_scales(cs, R)
    scales = sorted(float(s) for s in scales)
    if len(scales) < 3:
        raise ValueError(f"need at least 3 scales, got {len(scales)}")
    if scales[0] < 2 * cs.h * (1 - 1e-12):
        raise ValueError(f"scale {scales[0]} under-resolved: boxes must be at least 2h = {2 * cs.h}")
    counts = box_counts(cs, scales)
    usable = [(s, c) for s, c in zip(scales, counts) if c >= 2]
    populated = [(s, c) for s, c in usable if c >= 4**cs.d]
    if len(populated) >= 2:
        usable = populated
    if len(usable) < 2:
        return 0.0
    usable = usable[-fit_scales:]
    x = np.log([1.0 / s for s, _ in usable])
    y = np.log([c for _, c in usable])
    slope = float(np.polyfit(x, y, 1)[0])
    return min(max(slope, 0.0), float(cs.d))


def zero_set_volume(field_: ScalarField, tol: float) -> float:
    """Fraction of in-ball nodes with |u| <= tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = field_.grid.mask
    return float(np.count_nonzero(np.abs(field_.values[m]) <= tol) / np.count_nonzero(m))


def critical_summary(field_: ScalarField, tol_u=None, tol_g=None, minimizer: bool = True) -> dict:
    cs = detect_critical(field_, tol_u, tol_g)
    scales = default_scales(cs, field_.grid.R)
    dim = box_dimension(cs, scales)
    bound = field_.grid.d - 2 + 0.3
    out = {
        "tolerances": {"tol_u": cs.tol_u, "tol_g": cs.tol_g},
        "node_count": len(cs),
        "dimension": dim,
        "dimension_bound": bound,
        "scales": scales,
        "box_counts": box_counts(cs, scales),
        "fingerprint": cs.fingerprint,
        "minimizer": minimizer,
    }
    out["within_bound"] = dim == "empty" or (isinstance(dim, float) and dim <= bound + 1e-12)
    return out
