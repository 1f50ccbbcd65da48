"""Conjugate gradient, rank homotopy, and warm start behavior."""

import numpy as np
import pytest

from r3mc import (
    CompletionProblem,
    ConfigError,
    ContractViolationError,
    CounterRng,
    DegenerateDirectionError,
    DimensionError,
    ObservedEntries,
    RankSchedule,
    SolverConfig,
    SparseResidual,
    cg_solve,
    cost,
    initial_rank_one_point,
    masked_values,
    mean_squared_error,
    metric,
    pr_plus_beta,
    random_horizontal,
    random_point,
    rank_incremental_solve,
    rank_one_update,
    riemannian_gradient,
    truncated_oversampling,
    truncated_warm_start,
)
from r3mc.data_io import sample_mask
from r3mc.solver import _dominant_residual_pair


def make_problem(n, m, r, ratio, seed, noise=0.0, rank=None):
    """Observed entries of an exact rank-r matrix, optional gaussian noise."""
    x_true = random_point(n, m, r, seed)
    count = int(round(ratio * r * (n + m - r)))
    rows, cols = sample_mask(n, m, count, seed + 1)
    probe = ObservedEntries(n, m, rows, cols, np.zeros(count))
    vals = masked_values(x_true, probe)
    if noise:
        vals = vals + noise * CounterRng(seed + 2).standard_normal(count)
    entries = probe.with_values(vals)
    return CompletionProblem(entries, r if rank is None else rank), x_true


def test_solver_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        SolverConfig(max_iterations=0)
    with pytest.raises(ConfigError):
        SolverConfig(cost_tolerance=-1.0)
    with pytest.raises(ConfigError):
        SolverConfig(gradient_norm_tolerance=-1e-3)
    with pytest.raises(ConfigError):
        SolverConfig(armijo_slope=0.0)
    with pytest.raises(ConfigError):
        SolverConfig(armijo_slope=1.0)
    with pytest.raises(ConfigError):
        SolverConfig(backtrack_factor=1.0)
    with pytest.raises(ConfigError):
        SolverConfig(max_backtracks=-1)
    with pytest.raises(ConfigError):
        SolverConfig(verbosity=-1)


def test_pr_plus_beta_identities():
    x = random_point(10, 8, 3, 0)
    g = random_horizontal(x, 1)
    h = random_horizontal(x, 2)
    gg = metric(x, g, g)
    # zero difference gives zero exactly
    assert pr_plus_beta(x, g, g, gg) == 0.0
    # negative numerator clips to zero
    assert pr_plus_beta(x, g, 2.0 * g, gg) == 0.0
    # transported part orthogonal to the new gradient reduces to the
    # ratio of squared norms
    t = h - (metric(x, h, g) / gg) * g
    assert pr_plus_beta(x, g, t, 2.5) == pytest.approx(gg / 2.5, rel=1e-12)
    with pytest.raises(ContractViolationError):
        pr_plus_beta(x, g, h, 0.0)


def test_cg_solve_guards_shapes():
    problem, _ = make_problem(20, 24, 2, 4.0, 0)
    with pytest.raises(DimensionError):
        cg_solve(problem, random_point(20, 24, 3, 1))
    with pytest.raises(DimensionError):
        cg_solve(problem, random_point(21, 24, 2, 1))


def test_cg_solve_converges_and_traces_are_coherent():
    problem, x_true = make_problem(60, 60, 3, 4.0, 3)
    x, trace = cg_solve(problem, random_point(60, 60, 3, 99))
    assert trace.converged
    assert trace.final_cost <= 1e-12
    assert trace.iterations <= 300
    costs = [row.cost for row in trace.rows]
    assert all(b <= a for a, b in zip(costs, costs[1:]))
    assert costs[0] <= trace.initial_cost
    assert [row.iteration for row in trace.rows] == list(range(1, len(costs) + 1))
    times = [row.time_s for row in trace.rows]
    assert all(b >= a for a, b in zip(times, times[1:]))
    assert all(row.step > 0 for row in trace.rows)
    # the optimum reproduces the generating matrix off-pattern too
    assert np.linalg.norm(x.matrix() - x_true.matrix()) <= 1e-5


def test_cg_solve_zero_cost_start_stops_immediately():
    problem, x_true = make_problem(20, 20, 2, 4.0, 5)
    x, trace = cg_solve(problem, x_true)
    assert trace.iterations == 0
    assert trace.reason == "cost_tolerance"
    assert trace.converged
    assert x is x_true


def test_cg_solve_gradient_stop_is_relative():
    problem, _ = make_problem(40, 40, 2, 4.0, 7, noise=1e-6)
    x0 = random_point(40, 40, 2, 8)
    g0 = riemannian_gradient(problem, x0)
    gn0 = np.sqrt(metric(x0, g0, g0))
    config = SolverConfig(cost_tolerance=0.0, gradient_norm_tolerance=1e-6)
    x, trace = cg_solve(problem, x0, config)
    assert trace.reason == "gradient_tolerance"
    assert trace.rows[-1].grad_norm <= 1e-6 * gn0


def test_cg_solve_monitor_stop():
    problem, _ = make_problem(30, 30, 2, 4.0, 9)
    x, trace = cg_solve(
        problem,
        random_point(30, 30, 2, 10),
        monitor=lambda iteration, point, f: iteration >= 3,
    )
    assert trace.iterations == 3
    assert trace.reason == "monitor_stop"


def test_cg_solve_budget_exhaustion():
    problem, _ = make_problem(30, 30, 2, 4.0, 11)
    config = SolverConfig(max_iterations=3, cost_tolerance=0.0)
    x, trace = cg_solve(problem, random_point(30, 30, 2, 12), config)
    assert trace.iterations == 3
    assert trace.reason == "max_iterations"
    assert not trace.converged


def test_cg_solve_stalls_when_armijo_cannot_be_met():
    problem, _ = make_problem(30, 30, 2, 4.0, 13)
    # a slope requirement this close to one rejects the exact linearized
    # step, and with no backtracks allowed every direction runs out
    config = SolverConfig(armijo_slope=1.0 - 1e-9, max_backtracks=0)
    x, trace = cg_solve(problem, random_point(30, 30, 2, 14), config)
    assert trace.reason == "line_search_stall"
    assert not trace.converged


def test_cg_solve_verbosity_writes_stderr(capsys):
    problem, _ = make_problem(20, 20, 2, 4.0, 15)
    config = SolverConfig(max_iterations=2, cost_tolerance=0.0, verbosity=1)
    cg_solve(problem, random_point(20, 20, 2, 16), config)
    err = capsys.readouterr().err
    assert "iter" in err and "cost" in err


def test_cg_solve_is_deterministic():
    problem, _ = make_problem(30, 30, 2, 4.0, 17)
    x0 = random_point(30, 30, 2, 18)
    _, t1 = cg_solve(problem, x0)
    _, t2 = cg_solve(problem, x0)
    assert [r.cost for r in t1.rows] == [r.cost for r in t2.rows]
    assert [r.step for r in t1.rows] == [r.step for r in t2.rows]


def test_dominant_residual_pair_matches_dense_svd():
    rng = CounterRng(19)
    rows, cols = np.divmod(np.arange(48), 6)
    vals = rng.standard_normal(48)
    pattern = ObservedEntries(8, 6, rows, cols, np.zeros(48))
    res = SparseResidual(pattern, vals)
    sigma, u, v = _dominant_residual_pair(res, seed=0)
    dense = np.zeros((8, 6))
    dense[rows, cols] = vals
    w, s, zt = np.linalg.svd(dense)
    assert sigma == pytest.approx(s[0], rel=1e-6)
    assert np.linalg.norm(sigma * np.outer(u, v) - s[0] * np.outer(w[:, 0], zt[0])) <= 1e-3 * s[0]
    assert np.linalg.norm(u) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)


def test_dominant_residual_pair_rejects_zero_residual():
    pattern = ObservedEntries(4, 4, [0, 1], [1, 2], [0.0, 0.0])
    with pytest.raises(DegenerateDirectionError):
        _dominant_residual_pair(SparseResidual(pattern, np.zeros(2)), seed=0)


def test_initial_rank_one_point_is_minus_the_dominant_triple():
    rng = CounterRng(20)
    rows, cols = np.divmod(np.arange(35), 7)
    vals = rng.standard_normal(35)
    problem = CompletionProblem(ObservedEntries(5, 7, rows, cols, vals), 1)
    x = initial_rank_one_point(problem, seed=0)
    dense = np.zeros((5, 7))
    dense[rows, cols] = -2.0 * vals / 35.0
    w, s, zt = np.linalg.svd(dense)
    want = -s[0] * np.outer(w[:, 0], zt[0])
    assert np.linalg.norm(x.matrix() - want) <= 1e-3 * s[0]


def test_rank_one_update_reconstruction_identity():
    for seed in range(5):
        problem, _ = make_problem(30, 35, 4, 4.0, 30 + seed, noise=0.5, rank=2)
        x = random_point(30, 35, 2, 60 + seed)
        sigma, u, v = _dominant_residual_pair(residual_of(problem, x), seed=seed)
        y = rank_one_update(problem, x, seed=seed)
        want = x.matrix() - sigma * np.outer(u, v)
        tol = 1e-10 * (np.linalg.norm(x.R) + sigma)
        assert np.linalg.norm(y.matrix() - want) <= tol
        assert y.r == 3


def residual_of(problem, x):
    from r3mc import residual

    return residual(problem, x)


def test_rank_one_update_rejects_full_rank():
    problem, x_true = make_problem(12, 16, 3, 2.0, 40)
    x = random_point(12, 16, 12, 41)
    with pytest.raises(ConfigError):
        rank_one_update(CompletionProblem(problem.entries, 12), x)


def test_rank_one_update_perturbs_spanned_directions_with_warning():
    # residual that is exactly rank one along the current left factor
    x = random_point(6, 9, 2, 42)
    rows, cols = np.divmod(np.arange(54), 9)
    w = CounterRng(43).standard_normal(9)
    data = x.matrix() + np.outer(x.U[:, 0], w)
    entries = ObservedEntries(6, 9, rows, cols, data[rows, cols])
    problem = CompletionProblem(entries, 2)
    with pytest.warns(RuntimeWarning, match="factor span"):
        y = rank_one_update(problem, x, seed=1)
    # the update still subtracts a rank-one piece of magnitude sigma, but
    # along a direction leaving the old column space
    sigma, u, v = _dominant_residual_pair(residual_of(problem, x), seed=1)
    diff = y.matrix() - x.matrix()
    left, s, right_t = np.linalg.svd(diff)
    assert s[0] == pytest.approx(sigma, rel=1e-8)
    assert s[1] <= 1e-10 * sigma
    assert abs(right_t[0] @ v) == pytest.approx(1.0, abs=1e-8)
    assert np.linalg.norm(x.U.T @ left[:, 0]) <= 1e-8


def test_rank_one_update_exact_scale_never_raises_cost():
    for seed in range(5):
        problem, _ = make_problem(30, 30, 3, 4.0, 70 + seed, rank=2)
        x, _ = cg_solve(problem_at_rank(problem, 2), random_point(30, 30, 2, seed))
        prob3 = problem_at_rank(problem, 3)
        plain = rank_one_update(prob3, x, seed=seed)
        exact = rank_one_update(prob3, x, seed=seed, exact_scale=True)
        assert cost(prob3, exact) <= cost(prob3, x) + 1e-15
        assert cost(prob3, exact) <= cost(prob3, plain) + 1e-15


def problem_at_rank(problem, r):
    return CompletionProblem(problem.entries, r)


def test_rank_schedule_guards():
    with pytest.raises(ConfigError):
        RankSchedule(max_rank=3, start_rank=0)
    with pytest.raises(ConfigError):
        RankSchedule(max_rank=3, start_rank=4)
    with pytest.raises(ConfigError):
        RankSchedule(max_rank=3, stall_window=0)
    with pytest.raises(ConfigError):
        RankSchedule(max_rank=3, plateau_window=0)
    with pytest.raises(ConfigError):
        RankSchedule(max_rank=3, plateau_tol=-1.0)


def test_rank_incremental_solve_guards():
    problem, _ = make_problem(20, 24, 2, 4.0, 50)
    with pytest.raises(ConfigError):
        rank_incremental_solve(problem, RankSchedule(max_rank=21))
    empty = ObservedEntries(20, 24, [], [], [])
    with pytest.raises(ConfigError, match="empty"):
        rank_incremental_solve(problem, RankSchedule(max_rank=2, validation=empty))
    wrong_grid = ObservedEntries(19, 24, [0], [0], [1.0])
    with pytest.raises(ConfigError, match="grid"):
        rank_incremental_solve(problem, RankSchedule(max_rank=2, validation=wrong_grid))
    e = problem.entries
    overlap = ObservedEntries(20, 24, e.rows[:1], e.cols[:1], e.vals[:1])
    with pytest.raises(ConfigError, match="overlap"):
        rank_incremental_solve(problem, RankSchedule(max_rank=2, validation=overlap))


def test_rank_incremental_solve_stops_at_the_true_rank():
    problem, x_true = make_problem(60, 60, 4, 5.0, 51)
    config = SolverConfig(cost_tolerance=1e-16)
    x, steps = rank_incremental_solve(problem, RankSchedule(max_rank=8), config)
    assert [s.rank for s in steps] == [1, 2, 3, 4]
    assert x.r == 4
    assert steps[-1].trace.final_cost <= 1e-10
    assert all(s.validation_mse is None for s in steps)
    # each added rank improves the fit
    finals = [s.trace.final_cost for s in steps]
    assert all(b < a for a, b in zip(finals, finals[1:]))


def test_rank_incremental_solve_single_rank_schedule():
    problem, _ = make_problem(30, 30, 2, 4.0, 52)
    x, steps = rank_incremental_solve(problem, RankSchedule(max_rank=1))
    assert len(steps) == 1 and steps[0].rank == 1
    assert x.r == 1


def test_rank_incremental_solve_returns_best_validation_point():
    x_true = random_point(50, 50, 3, 53)
    count = int(round(5.0 * 3 * 97))
    rows, cols = sample_mask(50, 50, count + 200, 54)
    probe = ObservedEntries(50, 50, rows, cols, np.zeros(count + 200))
    vals = masked_values(x_true, probe) + 1e-3 * CounterRng(55).standard_normal(count + 200)
    train = ObservedEntries(50, 50, rows[:count], cols[:count], vals[:count])
    val = ObservedEntries(50, 50, rows[count:], cols[count:], vals[count:])
    problem = CompletionProblem(train, 3)
    schedule = RankSchedule(max_rank=6, validation=val)
    x, steps = rank_incremental_solve(problem, schedule)
    mses = [s.validation_mse for s in steps]
    assert all(v is not None for v in mses)
    assert mean_squared_error(x, val) == pytest.approx(min(mses), rel=1e-12)


def test_truncated_oversampling_formula():
    problem, _ = make_problem(20, 40, 2, 4.0, 56)
    alpha = 10 / 20
    want = problem.oversampling * alpha / (1 + alpha)
    assert truncated_oversampling(problem, 10) == pytest.approx(want, rel=1e-12)


def test_truncated_warm_start_with_all_columns_nearly_solves():
    problem, x_true = make_problem(50, 80, 3, 4.0, 57)
    warm = truncated_warm_start(problem, 80, seed=3)
    assert cost(problem, warm) <= 1e-8
    x, trace = cg_solve(problem, warm)
    assert trace.final_cost <= 1e-12


def test_truncated_warm_start_handles_tall_problems():
    problem, x_true = make_problem(80, 50, 3, 5.0, 58)
    warm = truncated_warm_start(problem, 40, seed=4)
    assert warm.n == 80 and warm.m == 50 and warm.r == 3
    assert cost(problem, warm) <= 1e-6


def test_truncated_warm_start_bounds():
    problem, _ = make_problem(20, 30, 3, 4.0, 59)
    with pytest.raises(ConfigError):
        truncated_warm_start(problem, 2)
    with pytest.raises(ConfigError):
        truncated_warm_start(problem, 31)
    with pytest.warns(RuntimeWarning, match="undersampled"):
        warm = truncated_warm_start(problem, 3, seed=5)
    assert warm.r == 3


def test_truncated_warm_start_warns_on_empty_columns():
    x = random_point(8, 10, 1, 60)
    rows, cols = np.divmod(np.arange(72), 9)
    entries = ObservedEntries(8, 10, rows, cols, x.matrix()[rows, cols])
    problem = CompletionProblem(entries, 1)
    with pytest.warns(RuntimeWarning, match="no observed entries"):
        warm = truncated_warm_start(problem, 10, seed=6)
    assert warm.r == 1
