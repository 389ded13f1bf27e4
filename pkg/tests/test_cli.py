import csv
import json
import math
import os

import numpy as np
import pytest

from sliceops import cli, ops2d
from sliceops.errors import ConfigError, NumericalFailure


@pytest.fixture(autouse=True)
def _isolate_families():
    ops2d.clear_family_cache()
    yield
    ops2d.clear_family_cache()


def write_config(path, text):
    path.write_text(text)
    return str(path)


def read_report(path):
    out = {}
    for line in open(path):
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# ----------------------------------------------------------------------------
# solve


def test_zero_rhs_writes_zero_grid(tmp_path):
    cfg = write_config(tmp_path / "c.ini", "[problem]\nrhs = zero\ndegree = 8\n[output]\ngrid = 21\n")
    assert cli.main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 0
    grid = read_csv(tmp_path / "grid.csv")
    assert grid[0] == ["x", "y", "u"]
    values = [float(r[2]) for r in grid[1:] if r[2] != ""]
    assert values and all(v == 0.0 for v in values)
    assert any(r[2] == "" for r in grid[1:])          # outside points are missing
    assert len(grid) - 1 == 21 * 21
    report = read_report(tmp_path / "report.txt")
    assert float(report["residual"]) == 0.0
    coeffs = read_csv(tmp_path / "coefficients.csv")
    assert coeffs[0] == ["n", "k", "coefficient"]
    assert len(coeffs) - 1 == 45


@pytest.mark.parametrize("domain,eq", [("diskslice", "poisson"), ("halfdisk", "poisson"),
                                       ("trapezium", "biharmonic")])
def test_manufactured_error(tmp_path, domain, eq):
    args = ["solve", "--domain", domain, "--equation", eq, "--rhs", "manufactured",
            "--degree", "20", "--out", str(tmp_path)]
    cfg = write_config(tmp_path / "c.ini", "[output]\ngrid = 5\n")
    assert cli.main(args + ["--config", cfg]) == 0
    report = read_report(tmp_path / "report.txt")
    assert float(report["manufactured_max_error"]) <= 1e-10


def test_solve_is_deterministic(tmp_path):
    cfg = write_config(tmp_path / "c.ini",
                       "[problem]\nequation = helmholtz\nk = 4\nv = ellipse\nrhs = x*exp(y)\n"
                       "degree = 12\n[output]\ngrid = 9\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["solve", "--config", cfg, "--out", str(a)]) == 0
    ops2d.clear_family_cache()
    assert cli.main(["solve", "--config", cfg, "--out", str(b)]) == 0
    assert (a / "coefficients.csv").read_bytes() == (b / "coefficients.csv").read_bytes()
    assert (a / "grid.csv").read_bytes() == (b / "grid.csv").read_bytes()


def test_helmholtz_constant_boundary(tmp_path):
    args = ["solve", "--equation", "helmholtz", "--k", "3", "--bc-const", "2",
            "--rhs", "18", "--degree", "8", "--out", str(tmp_path)]
    cfg = write_config(tmp_path / "c.ini", "[output]\ngrid = 11\n")
    assert cli.main(args + ["--config", cfg]) == 0
    vals = [float(r[2]) for r in read_csv(tmp_path / "grid.csv")[1:] if r[2] != ""]
    assert np.allclose(vals, 2.0, atol=1e-11)


def test_full_size_run(tmp_path):
    cfg = write_config(tmp_path / "c.ini", "[problem]\nrhs = erf\ndegree = 200\n[output]\ngrid = 11\n")
    assert cli.main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "coefficients.csv")
    assert len(rows) - 1 == 20301
    assert rows[-1][:2] == ["200", "200"]
    assert read_report(tmp_path / "report.txt")["unknowns"] == "20301"


# ----------------------------------------------------------------------------
# exit codes and config validation


@pytest.mark.parametrize("argv", [
    ["solve", "--domain", "square"],
    ["solve", "--equation", "wave"],
    ["solve", "--degree", "0"],
    ["solve", "--rhs", "__import__('os').system('true')"],
    ["solve", "--rhs", "x.real"],
    ["solve", "--rhs", "exp(x, y)"],
    ["solve", "--alpha", "0.9", "--beta", "0.1"],
    ["solve", "--bc-const", "1"],
    ["frobnicate"],
])
def test_config_errors_exit_2(tmp_path, argv):
    assert cli.main(argv + (["--out", str(tmp_path)] if argv[0] == "solve" else [])) == 2


def test_unknown_config_keys_rejected(tmp_path):
    for text in ("[problem]\ndegre = 5\n", "[plot]\ncolour = red\n", "no section\n"):
        cfg = write_config(tmp_path / "c.ini", text)
        assert cli.main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert cli.main(["solve", "--config", str(tmp_path / "missing.ini")]) == 2


def test_numerical_failure_exit_3(tmp_path, monkeypatch):
    def boom(problem):
        raise NumericalFailure("forced", residual=1.0)
    monkeypatch.setattr(cli.S, "solve", boom)
    assert cli.main(["solve", "--degree", "4", "--out", str(tmp_path)]) == 3


def test_flags_override_config(tmp_path):
    cfg = write_config(tmp_path / "c.ini", "[problem]\ndegree = 30\nrhs = one\n")
    args = cli._parser().parse_args(["solve", "--config", cfg, "--degree", "7"])
    conf = cli.build_config(args)
    assert conf.degree == 7 and conf.rhs == "one"


# ----------------------------------------------------------------------------
# expressions


def test_expression_grammar():
    f = cli.parse_expression("-2^2 + 3*x^2 - y/4 + pi")
    x, y = np.array([0.5, 1.0]), np.array([2.0, -1.0])
    np.testing.assert_allclose(f(x, y), -(2 ** 2) + 3 * x ** 2 - y / 4 + math.pi)
    g = cli.parse_expression("exp(x) * erf(y) + sin(x) - cos(y)")
    from scipy.special import erf
    np.testing.assert_allclose(g(x, y), np.exp(x) * erf(y) + np.sin(x) - np.cos(y))
    assert cli.parse_expression("3")(x, y).shape == (2,)


@pytest.mark.parametrize("text", ["", "z", "x.imag", "[x]", "lambda: 1", "exp", "x if y else 1",
                                  "open('f')", "x == y", "True"])
def test_expression_rejects(text):
    with pytest.raises(ConfigError):
        cli.parse_expression(text)


# ----------------------------------------------------------------------------
# convergence and spy


def test_convergence_zero_table(tmp_path):
    assert cli.main(["convergence", "--degree", "10", "--rhs-list", "zero",
                     "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "blocknorms.csv")
    assert rows[0] == ["degree", "zero"]
    assert all(float(r[1]) == 0.0 for r in rows[1:])


def test_convergence_summary_flag(tmp_path):
    # the erf RHS reaches its asymptotic decay only at high degree
    assert cli.main(["convergence", "--degree", "150", "--rhs-list", "erf;one",
                     "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "convergence_summary.csv").read_text().splitlines()
    assert lines[0] == "rhs,slope,monotone_tail,corner_max,corner_vanishing"
    rows = {r[0]: r for r in csv.reader(lines[1:3])}
    assert rows["erf"][4] == "True" and rows["one"][4] == "False"
    assert float(rows["erf"][1]) < float(rows["one"][1]) < -1
    assert rows["erf"][2] == "True"
    assert lines[-1] == "# corner_vanishing_decays_faster = True"


def test_fit_slope_and_monotone():
    n = np.arange(1, 101, dtype=float)
    norms = np.r_[1.0, n ** -2.5]
    assert cli.fit_slope(norms) == pytest.approx(-2.5)
    assert cli.monotone_tail(norms)
    assert not cli.monotone_tail(np.ones(50))


def spy_summary(path):
    return read_report(path / "spy_summary.txt")


def test_spy_dx_bandwidths(tmp_path):
    assert cli.main(["spy", "--operator", "Dx", "--degree", "12", "--out", str(tmp_path)]) == 0
    s = spy_summary(tmp_path)
    assert s["declared_bandwidths"] == "-1,3" and s["declared_subbandwidths"] == "0,2"
    rows = read_csv(tmp_path / "spy.csv")
    assert rows[0] == ["block_i", "block_j", "sub_i", "sub_j", "value"]
    for bi, bj, si, sj, _ in rows[1:]:
        assert 1 <= int(bj) - int(bi) <= 3 and 0 <= int(sj) - int(si) <= 2


def test_spy_identity_and_laplacian(tmp_path):
    assert cli.main(["spy", "--operator", "identity", "--degree", "6",
                     "--out", str(tmp_path / "i")]) == 0
    for bi, bj, si, sj, v in read_csv(tmp_path / "i" / "spy.csv")[1:]:
        assert bi == bj and si == sj and float(v) == 1.0
    assert cli.main(["spy", "--operator", "laplacian", "--degree", "12", "--domain", "halfdisk",
                     "--out", str(tmp_path / "l")]) == 0
    s = spy_summary(tmp_path / "l")
    # every stored entry lies inside the composed bound, and the bound is attained
    assert s["measured_bandwidths"] == s["declared_bandwidths"]


def test_spy_bad_params(tmp_path):
    assert cli.main(["spy", "--operator", "Wx", "--params", "0,0,0",
                     "--out", str(tmp_path)]) == 2
    assert cli.main(["spy", "--operator", "Dx", "--params", "1,x,2",
                     "--out", str(tmp_path)]) == 2


# ----------------------------------------------------------------------------
# cache


def test_cache_build_verify_purge(tmp_path):
    cdir = tmp_path / "cache"
    base = ["--cache-dir", str(cdir), "--degree", "12"]
    assert cli.main(["cache", "build"] + base) == 0
    files = sorted(os.listdir(cdir))
    assert files and all(f.startswith("tables-") for f in files)
    assert cli.main(["cache", "verify"] + base) == 0
    assert cli.main(["cache", "purge"] + base) == 0
    assert not os.listdir(cdir)


def test_cache_bit_flip_detected(tmp_path):
    cdir = tmp_path / "cache"
    base = ["--cache-dir", str(cdir), "--degree", "10"]
    assert cli.main(["cache", "build"] + base) == 0
    path = cdir / sorted(os.listdir(cdir))[0]
    doc = json.loads(path.read_text())
    rec = doc["records"][0]
    bits = bytearray(rec["alpha"][3].encode())
    bits[-1] = ord("1") if bits[-1] != ord("1") else ord("2")
    rec["alpha"][3] = bits.decode()
    path.write_text(json.dumps(doc))
    assert cli.main(["cache", "verify"] + base) == 3
    assert cli.main(["solve", "--out", str(tmp_path / "o")] + base) == 3


def test_cache_warm_start(tmp_path):
    cdir = tmp_path / "cache"
    cfg = write_config(tmp_path / "c.ini", "[output]\ngrid = 5\n")
    base = ["solve", "--config", cfg, "--cache-dir", str(cdir), "--degree", "20", "--rhs", "one"]
    for name in ("cold", "warm", "warm2"):
        ops2d.clear_family_cache()
        assert cli.main(base + ["--out", str(tmp_path / name)]) == 0
    cold = read_report(tmp_path / "cold" / "report.txt")
    warm = read_report(tmp_path / "warm" / "report.txt")
    assert int(cold["cache_misses"]) > 0 and float(cold["time_table_build_s"]) > 0.0
    assert int(warm["cache_misses"]) == 0 and int(warm["cache_hits"]) > 0
    assert float(warm["time_table_build_s"]) == 0.0
    # same cache state -> identical bytes; cold tables differ only in rounding
    assert ((tmp_path / "warm" / "coefficients.csv").read_bytes()
            == (tmp_path / "warm2" / "coefficients.csv").read_bytes())
    c = np.array([float(r[2]) for r in read_csv(tmp_path / "cold" / "coefficients.csv")[1:]])
    w = np.array([float(r[2]) for r in read_csv(tmp_path / "warm" / "coefficients.csv")[1:]])
    assert np.abs(c - w).max() <= 1e-13 * np.abs(c).max()
