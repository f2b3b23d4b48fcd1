from dataclasses import replace

import numpy as np
import pytest

from neutral_diff import analysis
from neutral_diff import fixed_point_solver as fps
from neutral_diff.hypothesis_checker import choose_constants
from neutral_diff.sequence_model import parse_expr

VALID = ["example1", "example2", "sturm-liouville", "zero", "family-linear"]


def window(eq, rep, N, values):
    return fps.SolutionWindow(eq.x_start, np.asarray(values, float), rep.n_switch)


def test_apply_T_zero_map(preset):
    cfg, rep = preset("zero")
    x = window(cfg.equation, rep, 30, np.linspace(-1, 1, 31))
    tx = fps.apply_T(x, cfg.equation, rep)
    assert np.all(tx.values[rep.n_switch:] == 0)


def test_apply_T_only_delay_term(preset):
    cfg, _ = preset("zero")
    eq = replace(cfg.equation, p=parse_expr("0.5"))
    rep = choose_constants(eq, 1.0, 40)
    tx = fps.apply_T(fps.constant_window(eq, rep, 40, 1.0), eq, rep)
    assert np.all(tx.values[rep.n_switch:] == -0.5)
    assert np.all(tx.values[: rep.n_switch] == 1.0)


def test_apply_T_example1_zero_is_fixed(preset):
    cfg, rep = preset("example1")
    tx = fps.apply_T(fps.constant_window(cfg.equation, rep, 200, 0.0), cfg.equation, rep)
    assert np.all(tx.values == 0)


def test_window_too_short(preset):
    cfg, rep = preset("example1")
    with pytest.raises(fps.WindowTooShortError):
        fps.WindowOperator(cfg.equation, rep, rep.n_switch)


def test_zero_map_converges_in_one_step(preset):
    cfg, rep = preset("zero")
    x, stats = fps.iterate(cfg.equation, rep, fps.constant_window(cfg.equation, rep, 40, 1.0))
    assert stats.iterations == 1
    assert np.all(x.values[rep.n_switch:] == 0)


def test_iterate_rejects_bad_input(preset):
    cfg, rep = preset("zero")
    with pytest.raises(ValueError):
        fps.iterate(cfg.equation, rep, fps.constant_window(cfg.equation, rep, 40, 2.0))
    with pytest.raises(ValueError):
        fps.iterate(cfg.equation, rep, fps.constant_window(cfg.equation, rep, 40, 0.0), tol=0)


def test_non_convergence_carries_stats(preset):
    cfg, rep = preset("example1")
    with pytest.raises(fps.NonConvergenceError) as info:
        fps.iterate(cfg.equation, rep, fps.constant_window(cfg.equation, rep, 200, 2.0), max_iter=5)
    assert len(info.value.stats.per_step_deltas) == 6
    assert not isinstance(info.value, fps.DivergenceError)


def test_divergence_detected(preset):
    cfg, rep = preset("zero")
    eq = replace(cfg.equation, p=parse_expr("1.5"))
    bad = replace(rep, n_switch=1)  # deliberately ignores the failed hypothesis
    with pytest.raises(fps.DivergenceError):
        fps.iterate(eq, bad, fps.constant_window(eq, bad, 60, 1.0), max_iter=100)


@pytest.mark.parametrize("name", VALID)
def test_deltas_contract_at_theta(preset, name):
    cfg, rep = preset(name)
    theta = analysis.contraction_report(cfg.equation, rep).theta
    s = cfg.solver
    _, stats = fps.iterate(cfg.equation, rep, fps.constant_window(cfg.equation, rep, s.N, s.d),
                           s.tol, 200)
    d = stats.per_step_deltas
    for i in range(3, len(d) - 1):
        assert d[i + 1] <= (theta + 0.05) * d[i]
    assert stats.measured_rate <= theta + 0.05


@pytest.mark.parametrize("name", VALID)
def test_self_map_on_random_windows(preset, name):
    cfg, rep = preset(name)
    op = fps.WindowOperator(cfg.equation, rep, cfg.solver.N)
    assert analysis.self_map_trials(op, samples=200, seed=7) <= 1.0


@pytest.mark.parametrize("name", VALID)
def test_fixed_point_satisfies_relation(preset, name):
    """‖Tx - x‖ < tol means the fixed-point relation holds to tol on [n_T, N]."""
    cfg, rep = preset(name)
    s = cfg.solver
    x, _ = fps.iterate(cfg.equation, rep, fps.constant_window(cfg.equation, rep, s.N, s.d), s.tol, 200)
    rel = fps.relation_residuals(x, cfg.equation, rep.n_switch, s.N)
    assert np.max(np.abs(rel)) < s.tol


@pytest.mark.parametrize("name, K", [("sturm-liouville", 1e4), ("zero", 1.0), ("example2", 1e4)])
def test_fixed_point_solves_equation(preset, name, K):
    cfg, rep = preset(name)
    s = cfg.solver
    x, _ = fps.iterate(cfg.equation, rep, fps.constant_window(cfg.equation, rep, s.N, s.d), s.tol, 200)
    res = fps.residuals(x, cfg.equation, rep.n_switch, s.N - 2)
    print(f"{name}: max residual / tol = {np.max(np.abs(res)) / s.tol:.3g}")
    assert np.max(np.abs(res)) <= K * s.tol


def test_backward_extend_noop(preset):
    cfg, rep = preset("zero")
    x = fps.constant_window(cfg.equation, rep, 30, 0.3)
    out = fps.backward_extend(x, cfg.equation)
    assert np.array_equal(out.values, x.values) and not out.extension_failures


def test_backward_extend_delay_only(preset):
    cfg, _ = preset("zero")
    eq = replace(cfg.equation, p=parse_expr("0.5"), k=2)
    rep = replace(choose_constants(eq, 1.0, 40), n_switch=6)
    x, _ = fps.iterate(eq, rep, fps.constant_window(eq, rep, 40, 0.0))
    out = fps.backward_extend(x, eq)
    assert np.all(out.values == 0) and not out.extension_failures


def test_backward_extend_reproduces_relation(preset):
    cfg, rep = preset("example1")
    eq = cfg.equation
    x, _ = fps.iterate(eq, rep, fps.constant_window(eq, rep, 200, 0.05))
    out = fps.backward_extend(x, eq)
    assert not out.extension_failures
    n_T, k = rep.n_switch, eq.k
    assert n_T > k
    lo = eq.first_equation_index
    rel = fps.relation_residuals(out, eq, lo, n_T - 1)
    assert np.max(np.abs(rel) / (1 + np.abs(out.values[lo: n_T]))) < 1e-9
    assert not np.array_equal(out.values[: n_T - k], x.values[: n_T - k])


def test_backward_extend_reports_small_p(preset):
    cfg, _ = preset("sturm-liouville")
    eq = replace(cfg.equation, q=parse_expr("2^(-n)"))  # p = 0 and q != 0: nothing to solve for
    rep = choose_constants(eq, 1.0, 60)
    x, _ = fps.iterate(eq, rep, fps.constant_window(eq, rep, 60, 0.5))
    out = fps.backward_extend(x, eq)
    assert [f["n"] for f in out.extension_failures] == list(range(rep.n_switch - 1, eq.first_equation_index - 1, -1))


def test_residual_example1_golden(preset):
    cfg, _ = preset("example1")
    n = np.arange(0, 60)
    x = fps.SolutionWindow(0, (-1.0) ** n, 0)
    assert abs(fps.residual(x, cfg.equation, 5)) < 1e-12


def test_residual_example2_golden(preset):
    cfg, _ = preset("example2")
    n = np.arange(2, 40)
    x = fps.SolutionWindow(2, n * (n - 1.0), 2)
    assert fps.relative_residuals(x, cfg.equation, 5, 5)[0] < 1e-9


def test_residual_constant_exact(preset):
    cfg, _ = preset("zero")
    x = fps.SolutionWindow(0, np.full(20, 3.7), 0)
    assert np.all(fps.residuals(x, cfg.equation, 1, 17) == 0)


def test_residual_out_of_window(preset):
    cfg, _ = preset("example1")
    x = fps.SolutionWindow(0, np.ones(10), 0)
    with pytest.raises(IndexError):
        fps.residual(x, cfg.equation, 8)
    with pytest.raises(IndexError):
        fps.residual(x, cfg.equation, 1)


def test_csv_round_trip(tmp_path, preset):
    cfg, rep = preset("sturm-liouville")
    x, _ = fps.solve(cfg.equation, rep, 50, initial=1.0)
    path = tmp_path / "s.csv"
    x.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "n,x,residual"
    assert lines[1].endswith(",")  # no residual at n = 0
    back = fps.SolutionWindow.read_csv(path)
    assert np.array_equal(back.values, x.values) and back.start == x.start


def test_csv_gap_rejected(tmp_path):
    path = tmp_path / "g.csv"
    path.write_text("n,x,residual\n0,1.0,\n1,1.0,\n3,1.0,\n")
    with pytest.raises(ValueError, match="contiguous"):
        fps.SolutionWindow.read_csv(path)


def test_truncation_budget_certifies(preset):
    cfg, rep = preset("example1")
    _, stats = fps.iterate(cfg.equation, rep, fps.constant_window(cfg.equation, rep, 200, 0.0))
    assert stats.certified and stats.truncation_budget < 1e-13
    cfg2, rep2 = preset("example2")
    _, stats2 = fps.iterate(cfg2.equation, rep2, fps.constant_window(cfg2.equation, rep2, 200, 0.0))
    assert not stats2.certified


def test_stats_semantics(preset):
    cfg, rep = preset("example1")
    x, stats = fps.iterate(cfg.equation, rep, fps.constant_window(cfg.equation, rep, 200, 2.0))
    assert stats.final_delta < 1e-12
    assert stats.iterations == len(stats.per_step_deltas) - 1
    assert stats.final_delta == stats.per_step_deltas[-1]
    assert 0.45 < stats.measured_rate < 0.55
    assert x.sup_norm() <= 2.0
