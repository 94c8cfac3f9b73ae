"""Named check results shared by every verification routine."""
from __future__ import annotations

import math
from dataclasses import dataclass, field


def _clean(value):
    """Make a value JSON-safe and deterministic (no NaN/inf literals, no numpy scalars)."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


@dataclass
class Check:
    name: str
    passed: bool
    value: float | None = None
    tolerance: float | None = None
    hard: bool = True
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _clean(
            {
                "name": self.name,
                "passed": bool(self.passed),
                "hard": self.hard,
                "value": self.value,
                "tolerance": self.tolerance,
                "detail": self.detail,
            }
        )


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def add(self, name, passed, value=None, tolerance=None, hard=True, **detail) -> Check:
        check = Check(name, bool(passed), value, tolerance, hard, detail)
        self.checks.append(check)
        return check

    def extend(self, other: "VerificationReport", prefix: str = "") -> None:
        for c in other.checks:
            self.checks.append(Check(prefix + c.name, c.passed, c.value, c.tolerance, c.hard, dict(c.detail)))

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.hard)

    def failures(self) -> list:
        return [c.name for c in self.checks if c.hard and not c.passed]

    def to_dict(self) -> dict:
        return _clean(
            {
                "passed": self.passed,
                "params": self.params,
                "checks": [c.to_dict() for c in self.checks],
            }
        )
