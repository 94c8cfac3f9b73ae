"""Experiment configuration: flat ``key = value`` text files with ``#`` comments.

Every key is declared in ``SCHEMA``; unknown keys, malformed values and
violated module preconditions are rejected at parse time with the offending
line and key in the message.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

from .grid import CutoffSpec, Grid
from .lagrangian import CoefficientSpec, Lagrangian, validate_exponents
from .solve import BoundaryDatum, SolveOptions
from .whitney import max_resolvable_depth


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def _bool(text):
    t = text.lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _coef_schema(prefix, default_kind="constant"):
    return {
        f"{prefix}.kind": (str, default_kind),
        f"{prefix}.value": (float, 1.0),
        f"{prefix}.slope": (_floats, ()),
        f"{prefix}.offset": (float, 0.0),
        f"{prefix}.center": (_floats, ()),
        f"{prefix}.width": (float, 0.5),
        f"{prefix}.height": (float, 1.0),
    }


# key -> (parser, default); a default of None means "derived from other keys"
SCHEMA = {
    "grid.d": (int, 2),
    "grid.n": (int, 129),
    "grid.R": (float, 1.0),
    "lagrangian.family": (str, "quadratic"),
    "lagrangian.q": (float, 3.0),
    "lagrangian.s": (float, 3.0),
    "lagrangian.gamma": (float, None),
    "lagrangian.C": (float, 1.0),
    "lagrangian.delta0": (float, 0.1),
    **_coef_schema("lagrangian.a", "bump"),
    **_coef_schema("lagrangian.b"),
    "datum.kind": (str, "harmonic_poly"),
    "datum.k": (int, 1),
    "datum.rotation": (float, 0.0),
    "datum.powers": (_ints, ()),
    "datum.scale": (float, 0.05),
    "solver.max_iterations": (int, 400),
    "solver.gradient_tolerance": (float, 1e-10),
    "solver.initial_guess": (str, "harmonic"),
    "cutoff.upsilon": (float, 0.9),
    "cutoff.variant": (str, "continuous"),
    "frequency.r_min": (float, None),
    "frequency.r_max": (float, None),
    "frequency.growth": (float, 1.1),
    "frequency.C_g": (float, 1.0),
    "frequency.beta": (float, None),
    "frequency.lambda": (float, 0.5),
    "frequency.kappa": (float, None),
    "frequency.holder_alpha": (float, 0.5),
    "frequency.monotonicity_tol": (float, 1e-3),
    "frequency.defect_tol": (float, 2e-2),
    "frequency.cs_tol": (float, 1e-10),
    "frequency.poincare_min": (float, 0.5),
    "frequency.order_cap": (float, 10.0),
    "whitney.C0": (float, 1.0),
    "whitney.alpha": (float, 0.25),
    "whitney.max_depth": (int, None),
    "whitney.sup_radius": (float, None),
    "critical.tol_u": (float, None),
    "critical.tol_g": (float, None),
    "critical.dimension_slack": (float, 0.3),
    "critical.minimizer": (_bool, True),
    "output.dir": (str, "out"),
}


def parse_text(text: str, source: str = "<config>") -> dict:
    """Raw ``key -> parsed value`` for the keys present in ``text``."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {body!r}")
        key, value = (t.strip() for t in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            raw[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return raw


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentConfig:
    grid: Grid
    lagrangian: Lagrangian
    datum: BoundaryDatum
    solver: SolveOptions
    cutoff: CutoffSpec
    values: dict = field(default_factory=dict)

    def get(self, key):
        return self.values[key]

    @property
    def beta(self) -> float:
        return self.values["frequency.beta"]

    def fingerprint(self) -> str:
        """Hash of every resolved key that influences the solved field and the checks."""
        body = "\n".join(f"{k}={_fmt(v)}" for k, v in sorted(self.values.items()) if k != "output.dir")
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def solve_fingerprint(self) -> str:
        keys = [k for k in self.values if k.split(".")[0] in ("grid", "lagrangian", "datum", "solver")]
        body = "\n".join(f"{k}={_fmt(self.values[k])}" for k in sorted(keys))
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def echo(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.values.items()) if k != "output.dir"}


def _coef(vals, prefix):
    return CoefficientSpec(
        kind=vals[f"{prefix}.kind"],
        value=vals[f"{prefix}.value"],
        slope=vals[f"{prefix}.slope"],
        offset=vals[f"{prefix}.offset"],
        center=vals[f"{prefix}.center"],
        width=vals[f"{prefix}.width"],
        height=vals[f"{prefix}.height"],
    )


def build(raw: dict, source: str = "<config>") -> ExperimentConfig:
    vals = {k: raw.get(k, default) for k, (_, default) in SCHEMA.items()}

    def fail(key, msg):
        raise ConfigError(f"{source}: {key}: {msg}")

    d, n, R = vals["grid.d"], vals["grid.n"], vals["grid.R"]
    if d not in (2, 3):
        fail("grid.d", f"dimension must be 2 or 3, got {d}")
    if n < 5 or n % 2 == 0:
        fail("grid.n", f"must be odd and >= 5 so the origin is a node, got {n}")
    if not R > 0:
        fail("grid.R", "must be positive")
    grid = Grid(d, n, R)

    try:
        a = _coef(vals, "lagrangian.a")
        b = _coef(vals, "lagrangian.b")
    except ValueError as exc:
        fail("lagrangian.a/b", str(exc))
    for name, c in (("lagrangian.a", a), ("lagrangian.b", b)):
        try:
            nonneg = c.is_nonnegative(R, d)
        except ValueError as exc:
            fail(name, str(exc))
        if not nonneg:
            fail(name, "coefficient must be non-negative on the ball")
    try:
        lag = Lagrangian(
            family=vals["lagrangian.family"],
            q=vals["lagrangian.q"],
            s_exp=vals["lagrangian.s"],
            a=a,
            b=b,
            gamma=vals["lagrangian.gamma"],
            growth_C=vals["lagrangian.C"],
            delta0=vals["lagrangian.delta0"],
        )
    except ValueError as exc:
        fail("lagrangian", str(exc))
    rep = validate_exponents(lag, d)
    if not rep.ok:
        fail("lagrangian.q", f"inadmissible exponents: {rep.message}")

    try:
        datum = BoundaryDatum(
            kind=vals["datum.kind"],
            k=vals["datum.k"],
            rotation=vals["datum.rotation"],
            powers=vals["datum.powers"],
            scale=vals["datum.scale"],
        )
    except ValueError as exc:
        fail("datum.kind", str(exc))
    if datum.kind == "custom":
        fail("datum.kind", "custom data cannot be given in a config file")
    if datum.kind == "monomial" and len(datum.powers) != d:
        fail("datum.powers", f"need {d} exponents, got {len(datum.powers)}")
    if not 0 <= datum.scale < lag.delta0:
        fail("datum.scale", f"must lie in [0, delta0={lag.delta0})")

    try:
        solver = SolveOptions(
            max_iterations=vals["solver.max_iterations"],
            gradient_tolerance=vals["solver.gradient_tolerance"],
            initial_guess=vals["solver.initial_guess"],
        )
    except ValueError as exc:
        fail("solver", str(exc))
    if solver.initial_guess == "custom":
        fail("solver.initial_guess", "custom initial guesses cannot be given in a config file")
    try:
        cutoff = CutoffSpec(vals["cutoff.upsilon"], vals["cutoff.variant"])
    except ValueError as exc:
        fail("cutoff", str(exc))

    if vals["frequency.kappa"] is None:
        vals["frequency.kappa"] = lag.kappa
    if vals["frequency.beta"] is None:
        vals["frequency.beta"] = min(vals["frequency.holder_alpha"] * vals["frequency.lambda"] * vals["frequency.kappa"], 0.5)
    if not 0 < vals["frequency.beta"] <= 1:
        fail("frequency.beta", f"must lie in (0, 1], got {vals['frequency.beta']}")
    if vals["frequency.C_g"] < 0:
        fail("frequency.C_g", "must be non-negative")
    if not vals["frequency.growth"] > 1:
        fail("frequency.growth", "must exceed 1")
    if not 0 < vals["frequency.holder_alpha"] < 1:
        fail("frequency.holder_alpha", "must lie in (0, 1)")
    for key in ("frequency.r_min", "frequency.r_max", "whitney.sup_radius"):
        v = vals[key]
        if v is not None and not 0 < v < R:
            fail(key, f"must lie in (0, R={R})")

    if not vals["whitney.C0"] > 0:
        fail("whitney.C0", "must be positive")
    if not 0 < vals["whitney.alpha"] < 0.5:
        fail("whitney.alpha", "must lie in (0, 1/2)")
    cap = 5 if d == 2 else 3
    if vals["whitney.max_depth"] is None:
        vals["whitney.max_depth"] = max_resolvable_depth(grid, cap)
    elif not 1 <= vals["whitney.max_depth"] <= 8:
        fail("whitney.max_depth", "must lie in [1, 8]")
    elif max_resolvable_depth(grid, vals["whitney.max_depth"]) < vals["whitney.max_depth"]:
        fail("whitney.max_depth", f"depth exceeds resolution at n={n}")
    if vals["whitney.sup_radius"] is None:
        vals["whitney.sup_radius"] = 0.5 * R
    for key in ("critical.tol_u", "critical.tol_g"):
        if vals[key] is not None and vals[key] < 0:
            fail(key, "must be non-negative")
    for key in ("frequency.monotonicity_tol", "frequency.defect_tol", "frequency.cs_tol", "critical.dimension_slack"):
        if not (vals[key] >= 0 and math.isfinite(vals[key])):
            fail(key, "must be a finite non-negative number")

    return ExperimentConfig(grid, lag, datum, solver, cutoff, vals)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return build(parse_text(text, str(path)), str(path))


def config_from_dict(values: dict) -> ExperimentConfig:
    """Build from already-typed values (used by tests and scripts)."""
    unknown = set(values) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    return build(dict(values))
