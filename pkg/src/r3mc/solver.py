"""Nonlinear conjugate gradient on the fixed-rank quotient, plus the
rank-updating homotopy and the truncated-column warm start.

The search direction follows Polak-Ribiere with nonnegativity clipping
and a reset to steepest descent whenever the combined direction fails
the descent test.  Step sizes seed from the exact minimizer of the
linearized objective and backtrack under the Armijo rule.
"""

import sys
import time
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    ContractViolationError,
    DegenerateDirectionError,
    DimensionError,
    NonDescentDirectionError,
    RetractionError,
    SingularMatrixError,
)
from .manifold import (
    FixedRankPoint,
    metric,
    random_point,
    retract,
    transport_to,
)
from .problem import (
    CompletionProblem,
    ObservedEntries,
    SparseResidual,
    cost,
    initial_step,
    masked_values,
    mean_squared_error,
    op_counter,
    residual,
    riemannian_gradient,
    sparse_apply,
)
from .rng import CounterRng

REASON_COST = "cost_tolerance"
REASON_GRADIENT = "gradient_tolerance"
REASON_MAX_ITERATIONS = "max_iterations"
REASON_STALL = "line_search_stall"
REASON_MONITOR = "monitor_stop"

CONVERGED_REASONS = (REASON_COST, REASON_GRADIENT, REASON_MONITOR)


@dataclass(frozen=True)
class SolverConfig:
    """Tuning knobs for one conjugate-gradient run.

    The gradient stop is relative: the solve halts once the gradient norm
    falls below ``gradient_norm_tolerance`` times the starting gradient
    norm.  ``verbosity`` at one or above prints a line per accepted
    iteration to stderr.
    """

    max_iterations: int = 500
    cost_tolerance: float = 1e-20
    gradient_norm_tolerance: float = 1e-14
    armijo_slope: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 25
    verbosity: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least one")
        if self.cost_tolerance < 0 or self.gradient_norm_tolerance < 0:
            raise ConfigError("tolerances must be nonnegative")
        if not 0.0 < self.armijo_slope < 1.0:
            raise ConfigError("armijo_slope must lie in (0, 1)")
        if not 0.0 < self.backtrack_factor < 1.0:
            raise ConfigError("backtrack_factor must lie in (0, 1)")
        if self.max_backtracks < 0:
            raise ConfigError("max_backtracks must be nonnegative")
        if self.verbosity < 0:
            raise ConfigError("verbosity must be nonnegative")


@dataclass(frozen=True)
class TraceRow:
    """One accepted iteration: post-step cost and line-search detail."""

    iteration: int
    cost: float
    grad_norm: float
    step: float
    backtracks: int
    reset: bool
    time_s: float


@dataclass
class SolverTrace:
    """Iteration history of one solve; costs are non-increasing."""

    initial_cost: float
    rows: list = field(default_factory=list)
    reason: str = ""

    @property
    def iterations(self):
        return len(self.rows)

    @property
    def final_cost(self):
        return self.rows[-1].cost if self.rows else self.initial_cost

    @property
    def converged(self):
        return self.reason in CONVERGED_REASONS


def pr_plus_beta(x_new, grad_new, grad_prev_transported, prev_norm_sq):
    """Polak-Ribiere coefficient clipped at zero:

        beta = max(0, g(xi, xi - T(xi_prev)) / g(xi_prev, xi_prev)).
    """
    if prev_norm_sq <= 0.0:
        raise ContractViolationError("previous gradient norm must be positive")
    raw = metric(x_new, grad_new, grad_new - grad_prev_transported)
    return max(0.0, raw / prev_norm_sq)


def _armijo_search(problem, x, f, eta, slope, s0, config):
    """Backtrack from s0 until the Armijo bound holds; None when exhausted."""
    s = s0
    for k in range(config.max_backtracks + 1):
        try:
            y = retract(x, eta, s)
        except RetractionError:
            s *= config.backtrack_factor
            continue
        fy = cost(problem, y)
        if fy <= f + config.armijo_slope * s * slope:
            return y, fy, s, k
        s *= config.backtrack_factor
    return None


def cg_solve(problem, x0, config=SolverConfig(), monitor=None):
    """Minimize the completion objective from x0 at the problem's rank.

    Parameters
    ----------
    problem : CompletionProblem
    x0 : FixedRankPoint
        Start point; its rank must equal ``problem.rank``.
    config : SolverConfig
    monitor : callable, optional
        Called as ``monitor(iteration, point, cost)`` after each accepted
        step; returning True stops the solve with reason "monitor_stop".

    Returns
    -------
    (FixedRankPoint, SolverTrace)
        The best iterate found and the per-iteration trace.  The trace
        reason is one of cost_tolerance, gradient_tolerance,
        max_iterations, line_search_stall, monitor_stop.
    """
    if x0.n != problem.n or x0.m != problem.m:
        raise DimensionError("start point does not match the problem grid")
    if x0.r != problem.rank:
        raise DimensionError("start point rank does not match the problem rank")

    t0 = time.perf_counter()
    x = x0
    f = cost(problem, x)
    trace = SolverTrace(initial_cost=f)
    grad = riemannian_gradient(problem, x)
    grad_norm_sq = metric(x, grad, grad)
    grad_norm_0 = np.sqrt(grad_norm_sq)
    eta = -grad

    while True:
        if f <= config.cost_tolerance:
            trace.reason = REASON_COST
            break
        if np.sqrt(grad_norm_sq) <= config.gradient_norm_tolerance * grad_norm_0:
            trace.reason = REASON_GRADIENT
            break
        if trace.iterations >= config.max_iterations:
            trace.reason = REASON_MAX_ITERATIONS
            break

        slope = metric(x, grad, eta)
        reset = False
        if slope >= 0.0:
            eta, slope, reset = -grad, -grad_norm_sq, True

        accepted = None
        while True:
            try:
                s0 = initial_step(problem, x, eta)
            except NonDescentDirectionError:
                s0 = None
            except DegenerateDirectionError:
                # Direction invisible on the pattern.  On the already
                # reset direction fall back to a unit step and let the
                # backtracking decide; otherwise reset below.
                s0 = 1.0 if reset else None
            if s0 is not None and s0 > 0.0:
                accepted = _armijo_search(problem, x, f, eta, slope, s0, config)
            if accepted is not None or reset:
                break
            # CG direction failed; retry once from steepest descent.
            eta, slope, reset = -grad, -grad_norm_sq, True
        if accepted is None:
            trace.reason = REASON_STALL
            break

        x_new, f_new, s, backtracks = accepted
        grad_new = riemannian_gradient(problem, x_new)
        grad_norm_sq_new = metric(x_new, grad_new, grad_new)
        beta = pr_plus_beta(
            x_new, grad_new, transport_to(x_new, grad), grad_norm_sq
        )
        eta = -grad_new + beta * transport_to(x_new, eta)
        x, f, grad, grad_norm_sq = x_new, f_new, grad_new, grad_norm_sq_new
        trace.rows.append(
            TraceRow(
                iteration=trace.iterations + 1,
                cost=f,
                grad_norm=float(np.sqrt(grad_norm_sq)),
                step=s,
                backtracks=backtracks,
                reset=reset,
                time_s=time.perf_counter() - t0,
            )
        )
        if config.verbosity >= 1:
            print(
                "iter %4d  cost %.6e  grad %.3e  step %.3e"
                % (trace.iterations, f, np.sqrt(grad_norm_sq), s),
                file=sys.stderr,
            )
        if monitor is not None and monitor(trace.iterations, x, f):
            trace.reason = REASON_MONITOR
            break

    return x, trace


def _dominant_residual_pair(res, seed, tol=1e-8, max_iterations=200):
    """Dominant singular triple (sigma, u, v) of a sparse residual.

    Power iteration on ST S from a seeded gaussian start; stops when the
    Rayleigh quotient changes by less than ``tol`` relatively.
    """
    rng = CounterRng(seed)
    m = res.pattern.m
    v = rng.standard_normal((m, 1))
    scale = np.linalg.norm(v)
    if float(res.vals @ res.vals) == 0.0:
        raise DegenerateDirectionError("residual is identically zero")
    v /= scale
    rayleigh = -np.inf
    for _ in range(max_iterations):
        w = sparse_apply(res, v)
        z = sparse_apply(res, w, transpose=True)
        new_rayleigh = float(v[:, 0] @ z[:, 0])
        norm_z = np.linalg.norm(z)
        if norm_z == 0.0:
            # Start vector orthogonal to the residual row space; reseed.
            v = rng.standard_normal((m, 1))
            v /= np.linalg.norm(v)
            rayleigh = -np.inf
            continue
        v = z / norm_z
        if abs(new_rayleigh - rayleigh) <= tol * max(abs(new_rayleigh), 1e-300):
            rayleigh = new_rayleigh
            break
        rayleigh = new_rayleigh
    w = sparse_apply(res, v)
    sigma = float(np.linalg.norm(w))
    if sigma == 0.0:
        raise DegenerateDirectionError("residual has no dominant direction")
    return sigma, (w / sigma).ravel(), v.ravel()


def initial_rank_one_point(problem, seed=0):
    """Rank-one start: minus the dominant singular triple of the residual
    at the zero matrix (the scaled negated data on the pattern)."""
    scale = -2.0 / problem.entries.count
    res = SparseResidual(problem.entries, scale * problem.entries.vals)
    sigma, u, v = _dominant_residual_pair(res, seed)
    return FixedRankPoint(u[:, None], np.array([[-sigma]]), v[:, None])


def _complement_direction(basis, vec, rng):
    """Component of vec orthogonal to the basis columns, unit length.

    Projects twice so the result stays orthogonal to working precision
    even for marginal inputs.  Falls back to random directions when vec
    itself (numerically) lies in the span; the second return value is
    False in that case.
    """
    candidate = np.asarray(vec, dtype=np.float64)
    fresh = True
    while True:
        perp = candidate - basis @ (basis.T @ candidate)
        perp -= basis @ (basis.T @ perp)
        scale = np.linalg.norm(perp)
        if scale > 1e-12 * max(np.linalg.norm(candidate), 1.0):
            return perp / scale, fresh
        candidate = rng.standard_normal(candidate.shape)
        fresh = False


def rank_one_update(problem, x, seed=0, exact_scale=False):
    """Grow the rank by one along the dominant direction of the residual.

    Appends orthonormalized u and v to the factors and rebuilds the
    middle factor so the new point represents exactly
    U R VT - sigma u vT, where (sigma, u, v) is the dominant singular
    triple of the current residual.  When a direction numerically lies
    in the existing factor span, subtracting along it cannot leave the
    span, so it is replaced by a random complement direction with a
    warning and the update acts along the replacement instead.

    With ``exact_scale`` the magnitude sigma is replaced by the exact
    one-dimensional minimizer of the objective along the update
    direction, which can only lower the cost of the updated point.
    """
    if x.r >= min(x.n, x.m):
        raise ConfigError("rank is already at min(n, m)")
    res = residual(problem, x)
    sigma, u, v = _dominant_residual_pair(res, seed)
    rng = CounterRng(seed + 1)
    u_new, u_fresh = _complement_direction(x.U, u, rng)
    v_new, v_fresh = _complement_direction(x.V, v, rng)
    if not (u_fresh and v_fresh):
        warnings.warn(
            "residual direction lies in the factor span; perturbing with "
            "a random complement direction",
            RuntimeWarning,
            stacklevel=2,
        )
        if not u_fresh:
            u = u_new
        if not v_fresh:
            v = v_new
    if exact_scale:
        e = masked_values(x, problem.entries) - problem.entries.vals
        d = u[problem.entries.rows] * v[problem.entries.cols]
        dd = float(d @ d)
        if dd > 0.0 and float(e @ d) != 0.0:
            sigma = float(e @ d) / dd
    u_plus = np.column_stack([x.U, u_new])
    v_plus = np.column_stack([x.V, v_new])
    r_plus = (u_plus.T @ x.U) @ x.R @ (x.V.T @ v_plus)
    r_plus -= sigma * np.outer(u_plus.T @ u, v_plus.T @ v)
    return FixedRankPoint(u_plus, r_plus, v_plus)


@dataclass(frozen=True)
class RankSchedule:
    """Controls the rank-updating homotopy.

    Each rank runs conjugate gradient until convergence, a cost plateau,
    or (with a validation pattern) ``stall_window`` consecutive
    validation increases; the homotopy then grows the rank by one and
    stops at ``max_rank``, on convergence, or when the per-rank
    validation error starts rising.
    """

    max_rank: int
    start_rank: int = 1
    validation: ObservedEntries | None = None
    stall_window: int = 5
    plateau_window: int = 10
    plateau_tol: float = 1e-6

    def __post_init__(self):
        if not 1 <= self.start_rank <= self.max_rank:
            raise ConfigError("need 1 <= start_rank <= max_rank")
        if self.stall_window < 1 or self.plateau_window < 1:
            raise ConfigError("windows must be positive")
        if self.plateau_tol < 0:
            raise ConfigError("plateau_tol must be nonnegative")


def _check_disjoint(train, validation):
    lin_train = train.rows * train.m + train.cols
    lin_val = validation.rows * validation.m + validation.cols
    if np.intersect1d(lin_train, lin_val).size:
        raise ConfigError("validation pattern overlaps the training pattern")


def _rank_monitor(schedule, recent_costs, val_state):
    def monitor(iteration, x, f):
        if schedule.validation is not None:
            v = mean_squared_error(x, schedule.validation)
            if v < val_state["best"]:
                val_state["best"], val_state["best_x"] = v, x
            val_state["bad"] = val_state["bad"] + 1 if v > val_state["prev"] else 0
            val_state["prev"] = v
            if val_state["bad"] >= schedule.stall_window:
                return True
        recent_costs.append(f)
        if len(recent_costs) == recent_costs.maxlen:
            old = recent_costs[0]
            if old - f <= schedule.plateau_tol * max(old, 1e-300):
                return True
        return False

    return monitor


@dataclass(frozen=True)
class RankStep:
    """Outcome of one rank of the homotopy."""

    rank: int
    trace: SolverTrace
    validation_mse: float | None


def rank_incremental_solve(problem, schedule, config=SolverConfig(), seed=0):
    """Homotopy over ranks: solve, grow by one, repeat.

    Starts from the rank-one initializer, runs ``cg_solve`` at each rank
    of the schedule, and grows through ``rank_one_update``.  With a
    validation pattern each rank is early-stopped: the iterate accepted
    for the rank is the one with the lowest validation error seen during
    its solve, and the returned point is the best such iterate across
    ranks.  Without validation the last iterate is returned.

    Returns (point, steps) with one RankStep per visited rank.
    """
    if schedule.max_rank > min(problem.n, problem.m):
        raise ConfigError("max_rank exceeds min(n, m)")
    if schedule.validation is not None:
        if schedule.validation.count == 0:
            raise ConfigError("validation pattern is empty")
        if (schedule.validation.n, schedule.validation.m) != (problem.n, problem.m):
            raise ConfigError("validation grid does not match the problem")
        _check_disjoint(problem.entries, schedule.validation)

    x = initial_rank_one_point(problem, seed)
    for r in range(2, schedule.start_rank + 1):
        x = rank_one_update(
            CompletionProblem(problem.entries, r - 1), x, seed + r
        )

    steps = []
    start = x
    best_x, best_val = x, np.inf
    prev_val = np.inf
    for r in range(schedule.start_rank, schedule.max_rank + 1):
        prob_r = CompletionProblem(problem.entries, r)
        recent = deque(maxlen=schedule.plateau_window + 1)
        val_state = {"prev": np.inf, "bad": 0, "best": np.inf, "best_x": None}
        try:
            solved, trace = cg_solve(
                prob_r, start, config, monitor=_rank_monitor(schedule, recent, val_state)
            )
        except SingularMatrixError:
            # the grown direction sits below the numerical noise of the
            # previous fit, so the schedule is exhausted, not broken
            if not steps:
                raise
            break
        val = None
        if schedule.validation is not None:
            val = mean_squared_error(solved, schedule.validation)
            if val_state["best"] < val:
                solved, val = val_state["best_x"], val_state["best"]
        steps.append(RankStep(rank=r, trace=trace, validation_mse=val))
        x = solved
        if val is not None:
            if val < best_val:
                best_x, best_val = solved, val
            if val > prev_val:
                break
            prev_val = val
        if trace.final_cost <= config.cost_tolerance:
            break
        if r < schedule.max_rank:
            try:
                # grow with the exact one-dimensional step: the raw sigma of
                # the mean-scaled residual shrinks with 1/|Omega|, which
                # would leave the grown factor numerically rank deficient
                start = rank_one_update(prob_r, solved, seed + r + 1, exact_scale=True)
            except (DegenerateDirectionError, SingularMatrixError):
                break

    if schedule.validation is not None:
        return best_x, steps
    return x, steps


def _transpose_entries(entries):
    return ObservedEntries(entries.m, entries.n, entries.cols, entries.rows, entries.vals)


def _transpose_point(x):
    return FixedRankPoint(x.V, x.R.T, x.U)


def truncated_oversampling(problem, p):
    """Oversampling ratio of the p-column truncated problem, wide orientation."""
    n = min(problem.n, problem.m)
    alpha = p / n
    return problem.oversampling * alpha / (1.0 + alpha)


def truncated_warm_start(problem, p, config=SolverConfig(), seed=0):
    """Warm start by completing p random columns, then least squares.

    Solves the completion restricted to p uniformly chosen columns (of
    the wide orientation; the problem is transposed internally when
    n > m), keeps its left factor U, fits each full column of the data
    by ridge least squares against U, and orthonormalizes the fitted
    coefficients into (R, V).  Warns when the truncated problem drops
    below unit oversampling or when columns carry no observations.
    """
    rank = problem.rank
    if problem.n > problem.m:
        flipped = CompletionProblem(_transpose_entries(problem.entries), rank)
        return _transpose_point(truncated_warm_start(flipped, p, config, seed))
    n, m = problem.n, problem.m
    if not rank <= p <= m:
        raise ConfigError("need rank <= p <= m")
    if truncated_oversampling(problem, p) <= 1.0:
        warnings.warn(
            "truncated problem is undersampled (ratio %.3f); the warm "
            "start may be poor" % truncated_oversampling(problem, p),
            RuntimeWarning,
            stacklevel=2,
        )

    rng = CounterRng(seed)
    chosen = rng.sample_without_replacement(m, p)
    remap = np.full(m, -1, dtype=np.int64)
    remap[chosen] = np.arange(p)
    ent = problem.entries
    keep = remap[ent.cols] >= 0
    trunc = ObservedEntries(n, p, ent.rows[keep], remap[ent.cols[keep]], ent.vals[keep])
    trunc_problem = CompletionProblem(trunc, rank)
    x0 = random_point(n, p, rank, seed + 1)
    x_trunc, _ = cg_solve(trunc_problem, x0, config)
    u = x_trunc.U

    w = np.zeros((rank, m))
    ridge = 1e-10 * np.eye(rank)
    empty_columns = 0
    for j in range(m):
        lo, hi = ent.col_starts[j], ent.col_starts[j + 1]
        if lo == hi:
            empty_columns += 1
            continue
        idx = ent.col_perm[lo:hi]
        a = u[ent.rows[idx]]
        b = ent.vals[idx]
        w[:, j] = np.linalg.solve(a.T @ a + ridge, a.T @ b)
        op_counter.add(2 * (hi - lo) * rank * (rank + 1))
    if empty_columns:
        warnings.warn(
            "%d columns have no observed entries; their fitted "
            "coefficients are zero" % empty_columns,
            RuntimeWarning,
            stacklevel=2,
        )
    q, t = np.linalg.qr(w.T)
    sig = np.linalg.svd(t, compute_uv=False)
    if sig[0] == 0.0 or sig[-1] <= 1e-12 * sig[0]:
        raise SingularMatrixError("fitted coefficients are rank deficient")
    return FixedRankPoint(u, t.T, q)
