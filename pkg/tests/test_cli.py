import csv
import json
from importlib import resources

import numpy as np
import pytest

from neutral_diff.cli import main
from neutral_diff.config import ConfigError, load_config
from neutral_diff.sequence_model import parse_expr


def run(*args):
    return main([str(a) for a in args])


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("name, code", [("example1", 0), ("example2", 0), ("sturm-liouville", 0),
                                        ("zero", 0), ("gamma-violation", 2)])
def test_check_exit_codes(tmp_path, name, code):
    assert run("check", "--config", name, "--out", tmp_path) == code
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report) >= {"gamma_plus", "P", "n3", "C", "alpha_rem"}


def test_check_example1_values(tmp_path):
    run("check", "--config", "example1", "--out", tmp_path)
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["gamma_plus"] == 1.0 and report["P"] == 0.5
    assert all(report[k] for k in ("gamma_plus_ok", "z2_ok", "z22_ok", "z3_ok", "add_series_ok"))


def test_check_sturm_liouville_beta_zero(tmp_path):
    run("check", "--config", "sturm-liouville", "--out", tmp_path)
    report = json.loads((tmp_path / "report.json").read_text())
    assert all(v == 0.0 for _, v, _ in report["beta_rem"])


def test_config_errors(tmp_path, capsys):
    assert run("check", "--config", tmp_path / "missing.toml") == 4
    bad = tmp_path / "bad.toml"
    bad.write_text('[equation]\nr = "1 +"\nk = 1\nf = "x"\n')
    assert run("check", "--config", bad) == 4
    assert "equation.r" in capsys.readouterr().err
    bad.write_text('[equation]\nr = "1"\nk = 1\nf = "x"\ncolour = 3\n')
    with pytest.raises(ConfigError, match="colour"):
        load_config(bad)
    bad.write_text('[equation]\nr = "1"\nk = 1\nf = "x"\nalpha = "2/1"\n')
    with pytest.raises(ConfigError, match="equation.alpha"):
        load_config(bad)
    bad.write_text("not toml [")
    assert run("check", "--config", bad) == 4


def test_custom_config_file(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[equation]\nr = "1"\np = "0.25"\na = "3^(-n)"\nk = 1\nf = "cos(x)"\n'
                   '[solver]\nd = 1.0\nN = 80\n')
    assert run("solve", "--config", cfg, "--out", tmp_path) == 0
    data = rows(tmp_path / "solution.csv")
    assert any(abs(float(r["x"])) > 1e-6 for r in data)  # f(0) != 0 gives a nonzero solution
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert stats["final_delta"] < 1e-12 and stats["theta"] < 1


def test_solve_zero_preset(tmp_path):
    assert run("solve", "--config", "zero", "--out", tmp_path) == 0
    data = rows(tmp_path / "solution.csv")
    assert all(float(r["x"]) == 0 for r in data)
    assert all(float(r["residual"]) == 0 for r in data if r["residual"])


def test_solve_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("solve", "--config", "example1", "--out", out, "--initial", "2") == 0
    for name in ("solution.csv", "stats.json", "report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_solve_nonconvergence_exit(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[equation]\nr = "1"\np = "0.9"\nk = 1\nf = "x"\n[solver]\nN = 60\nmax_iter = 3\ninitial = 1.0\n')
    assert run("solve", "--config", cfg, "--out", tmp_path) == 3
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert len(stats["per_step_deltas"]) == 4


def _write_data(path, start, values):
    with open(path, "w") as fh:
        fh.write("n,x\n")
        for i, v in enumerate(values):
            fh.write(f"{start + i},{float(v)!r}\n")


def test_verify_example1_golden(tmp_path):
    n = np.arange(0, 53)
    _write_data(tmp_path / "d.csv", 0, (-1.0) ** n)
    assert run("verify", "--config", "example1", tmp_path / "d.csv", "--out", tmp_path,
               "--threshold", "1e-10") == 0
    summary = json.loads((tmp_path / "verify.json").read_text())
    assert summary["max"] < 1e-10


def test_verify_example2_golden(tmp_path):
    assert run("verify", "--config", "example2", "--sequence", "n*(n-1)", "--first", "2",
               "--last", "32", "--relative", "--threshold", "1e-8", "--out", tmp_path) == 0


def test_verify_rejects_gaps(tmp_path):
    (tmp_path / "g.csv").write_text("n,x\n0,1\n2,1\n")
    assert run("verify", "--config", "zero", tmp_path / "g.csv", "--out", tmp_path) == 4


def test_verify_threshold_exit(tmp_path):
    assert run("verify", "--config", "example1", "--sequence", "n", "--last", "20", "--out", tmp_path) == 1


@pytest.mark.parametrize("name, seq, m", [("sturm-liouville", "0", 20), ("zero", "1", 11),
                                          ("example1", "(-1)^n", 20)])
def test_perturbation_is_local(tmp_path, name, seq, m):
    cfg = load_config(name)
    k = cfg.equation.k
    n = np.arange(0, 41)
    base = parse_expr(seq).values(n.astype(float))
    bumped = base.copy()
    bumped[m] += 0.1
    _write_data(tmp_path / "p.csv", 0, bumped)
    run("verify", "--config", name, tmp_path / "p.csv", "--out", tmp_path)
    res = {int(r["n"]): float(r["residual"]) for r in rows(tmp_path / "verified.csv") if r["residual"]}
    stencil = set(range(m - 2, m + 1))
    if cfg.equation.p.is_zero():
        assert len(stencil) == 3
    else:
        stencil |= set(range(m + k - 2, m + k + 1))
    spikes = {i for i, v in res.items() if abs(v) > 1e-9}
    assert spikes and spikes <= stencil


def test_sweep_linear_family(tmp_path):
    assert run("sweep", "--config", "family-linear", "--out", tmp_path) == 0
    pw = rows(tmp_path / "pairwise.csv")
    assert len(pw) == 45 and all(r["ok"] == "true" for r in pw)
    assert (tmp_path / "solution_u10.csv").exists()
    report = json.loads((tmp_path / "family.json").read_text())
    assert report["theta1"] < 1 and report["monotone"]


def _family_config(tmp_path, extra):
    body = (resources.files("neutral_diff") / "presets" / "family-linear.toml").read_text()
    body = body.split("[family]")[0] + "[family]\n" + extra
    path = tmp_path / "fam.toml"
    path.write_text(body)
    return path


def test_sweep_constant_family(tmp_path):
    cfg = _family_config(tmp_path, 'g = "u"\nparams = ["0.5", "0.5", "0.5"]\nlimit = "0.5"\n')
    assert run("sweep", "--config", cfg, "--out", tmp_path / "o") == 0
    assert all(float(r["x_diff"]) == 0 for r in rows(tmp_path / "o" / "pairwise.csv"))


def test_sweep_zero_g_identical_members(tmp_path):
    cfg = _family_config(tmp_path, 'g = "0"\nparam = "1/m"\nmembers = 3\nlimit = "0"\n')
    assert run("sweep", "--config", cfg, "--out", tmp_path / "o") == 0
    texts = {(tmp_path / "o" / f"solution_u{m}.csv").read_text() for m in range(4)}
    assert len(texts) == 1


def test_sweep_needs_family(tmp_path):
    assert run("sweep", "--config", "example1", "--out", tmp_path) == 4


def test_mnc(tmp_path):
    assert run("mnc", "--config", "example1", "--out", tmp_path, "--seed", "5") == 0
    trials = rows(tmp_path / "darbo.csv")
    assert len(trials) == 100 and all(t["ok"] == "true" for t in trials)
    again = tmp_path / "again"
    run("mnc", "--config", "example1", "--out", again, "--seed", "5")
    assert (again / "darbo.csv").read_bytes() == (tmp_path / "darbo.csv").read_bytes()
