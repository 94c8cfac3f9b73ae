import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from freqlab.cli import main
from freqlab.config import ConfigError, config_from_dict, load_config, parse_text
from freqlab.grid import ScalarField, read_field, write_field

X1 = """# quadratic lagrangian, linear datum
grid.n = 129
lagrangian.family = quadratic   # F = 0
datum.kind = harmonic_poly
datum.k = 1
"""


def write(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_comments_and_types():
    raw = parse_text("grid.n = 65  # odd\n\n# note\ndatum.powers = 1, 2\ncritical.minimizer = no\n")
    assert raw == {"grid.n": 65, "datum.powers": (1, 2), "critical.minimizer": False}


@pytest.mark.parametrize(
    "text,needle",
    [
        ("grid.n = 65\ngrid.bogus = 1\n", ":2: unknown key 'grid.bogus'"),
        ("grid.n = 65\ngrid.n = 67\n", "duplicate key"),
        ("grid.n = abc\n", "bad value for 'grid.n'"),
        ("just words\n", "expected 'key = value'"),
    ],
)
def test_parse_errors_name_line_and_key(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_text(text, "exp.cfg")


def test_even_n_rejected(tmp_path):
    with pytest.raises(ConfigError, match="grid.n"):
        load_config(write(tmp_path, "grid.n = 128\n"))


def test_exponent_bound_rejected(tmp_path):
    with pytest.raises(ConfigError, match=r"2 \+ 2/d"):
        load_config(write(tmp_path, "lagrangian.family = double_phase\nlagrangian.q = 5\n"))


@pytest.mark.parametrize(
    "values",
    [
        {"whitney.alpha": 0.6},
        {"whitney.max_depth": 6, "grid.n": 65},
        {"cutoff.upsilon": 1.0},
        {"datum.scale": 0.2},
        {"frequency.r_max": 2.0},
        {"lagrangian.a.kind": "affine", "lagrangian.a.slope": (1.0, 0.0), "lagrangian.a.offset": 0.5, "lagrangian.family": "double_phase", "lagrangian.q": 2.5},
    ],
)
def test_preconditions_checked_at_parse_time(values):
    with pytest.raises(ConfigError):
        config_from_dict(values)


def test_derived_defaults():
    cfg = config_from_dict({"grid.n": 257, "lagrangian.family": "power", "lagrangian.q": 3.0})
    assert cfg.get("frequency.kappa") == 0.5
    assert cfg.beta == pytest.approx(0.125)
    assert cfg.get("whitney.max_depth") == 4
    assert cfg.fingerprint() == config_from_dict({"grid.n": 257, "lagrangian.family": "power", "lagrangian.q": 3.0}).fingerprint()
    assert cfg.fingerprint() != config_from_dict({"grid.n": 257, "lagrangian.family": "power", "lagrangian.q": 2.9}).fingerprint()


def test_run_quadratic_linear(tmp_path):
    cfg = write(tmp_path, X1)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert names == {"field.bin", "field.json", "frequency.csv", "monotonicity.json", "whitney.json", "critical.json", "report.json"}
    with open(out / "frequency.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(abs(float(r["N"]) - 1.0) < 1e-2 for r in rows)
    report = json.loads((out / "report.json").read_text())
    assert report["passed"]
    echo = report["params"]["config"]
    for key in ("cutoff.upsilon", "whitney.C0", "whitney.alpha", "frequency.C_g", "frequency.beta", "frequency.lambda", "frequency.kappa"):
        assert key in echo
    side = json.loads((out / "field.json").read_text())
    assert {"iterations", "residual", "energy", "config"} <= set(side)
    assert read_field(out / "field.bin").grid.n == 129


def test_threads_byte_identical(tmp_path):
    cfg = write(tmp_path, X1)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--out", str(a), "--threads", "1"]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(b), "--threads", "8"]) == 0
    for p in sorted(a.iterdir()):
        assert p.read_bytes() == (b / p.name).read_bytes(), p.name


def test_verify_uses_cache_and_detects_tampering(tmp_path):
    cfg = write(tmp_path, X1)
    cache = tmp_path / "cache"
    assert main(["verify", "--config", str(cfg), "--out", str(tmp_path / "v0"), "--cache", str(cache)]) == 0
    entries = sorted(cache.glob("*.bin"))
    assert len(entries) == 1
    assert [p.name for p in (tmp_path / "v0").iterdir()] == ["report.json"]
    assert main(["verify", "--config", str(cfg), "--out", str(tmp_path / "v1"), "--cache", str(cache)]) == 0

    f = read_field(entries[0])
    vals = f.values.copy()
    vals[64 + 20, 64 + 10] += 0.1
    write_field(entries[0], ScalarField(f.grid, vals))
    assert main(["verify", "--config", str(cfg), "--out", str(tmp_path / "v2"), "--cache", str(cache)]) == 1
    report = json.loads((tmp_path / "v2" / "report.json").read_text())
    failed = {c["name"] for c in report["checks"] if c["hard"] and not c["passed"]}
    assert "frequency.identity_outer" in failed


def test_nonconvergence_exit_code(tmp_path):
    cfg = write(tmp_path, "grid.n = 65\nlagrangian.family = power\ndatum.k = 2\nsolver.max_iterations = 2\n")
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_config_error_exit_codes(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["run", "--config", str(write(tmp_path, "grid.n = 64\n"))]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == 2


def test_critical_negative_control_soft(tmp_path):
    cfg = write(tmp_path, "grid.n = 65\ndatum.kind = monomial\ndatum.powers = 0, 2\ncritical.minimizer = false\n")
    assert main(["critical", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    summ = json.loads((tmp_path / "o" / "critical.json").read_text())
    assert set(summ) >= {"tolerances", "node_count", "dimension", "box_counts"}


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, "grid.n = 65\n")
    res = subprocess.run(
        [sys.executable, "-m", "freqlab", "solve", "--config", str(cfg), "--out", str(tmp_path / "o")],
        capture_output=True,
        text=True,
    )
    assert res.returncode == 0, res.stderr
    assert np.isfinite(read_field(tmp_path / "o" / "field.bin").values).all()
