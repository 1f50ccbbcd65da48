"""Observed-entry bookkeeping and the least-squares completion objective.

The objective is the mean squared error over the observed set Omega,

    f(x) = |P_Omega(U R VT) - data|^2 / |Omega|,

so gradients carry a 2 / |Omega| scale.  All sparse kernels run over
row-major sorted triplets with segment sums, which keeps accumulation
order fixed and results bit-reproducible for a fixed thread count.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractViolationError,
    DegenerateDirectionError,
    DimensionError,
    NonDescentDirectionError,
)
from .manifold import FixedRankPoint, HorizontalVector, TangentTriple
from .smallmat import solve_lyapunov_spd, sym


class _OpCounter:
    """Running count of sparse-kernel floating point operations."""

    def __init__(self):
        self.flops = 0

    def add(self, flops):
        self.flops += int(flops)

    def reset(self):
        self.flops = 0


op_counter = _OpCounter()


def reset_op_count():
    op_counter.reset()


def op_count():
    return op_counter.flops


class ObservedEntries:
    """Sorted sparse pattern with values on an n x m grid.

    Triplets are stored row-major sorted with no duplicates; a
    column-sorted permutation is kept alongside for transpose products.
    An empty pattern is allowed here and rejected where a nonempty one is
    required (problem construction).
    """

    def __init__(self, n, m, rows, cols, vals):
        n, m = int(n), int(m)
        if n < 1 or m < 1:
            raise DimensionError("grid dimensions must be positive")
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if not (rows.size == cols.size == vals.size):
            raise DimensionError("rows, cols, vals must have equal length")
        if rows.size:
            if rows.min() < 0 or rows.max() >= n:
                raise ContractViolationError("row index out of range")
            if cols.min() < 0 or cols.max() >= m:
                raise ContractViolationError("column index out of range")
        if not np.all(np.isfinite(vals)):
            raise ContractViolationError("values must be finite")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size > 1:
            same = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if np.any(same):
                k = int(np.flatnonzero(same)[0])
                raise ContractViolationError(
                    "duplicate entry at (%d, %d)" % (rows[k], cols[k])
                )
        self.n, self.m = n, m
        self.rows, self.cols, self.vals = rows, cols, vals
        counts = np.bincount(rows, minlength=n)
        self.row_starts = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        self.col_perm = np.lexsort((rows, cols))
        ccounts = np.bincount(cols, minlength=m)
        self.col_starts = np.concatenate(([0], np.cumsum(ccounts))).astype(np.int64)

    @property
    def count(self):
        return int(self.vals.size)

    def with_values(self, vals):
        """Same pattern, different values (already in row-major order)."""
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if vals.size != self.count:
            raise DimensionError("value count does not match pattern")
        out = object.__new__(ObservedEntries)
        out.__dict__.update(self.__dict__)
        out.vals = vals
        return out


@dataclass(frozen=True)
class SparseResidual:
    """Values on the pattern of an ObservedEntries instance."""

    pattern: ObservedEntries
    vals: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.vals, dtype=np.float64).ravel()
        if vals.size != self.pattern.count:
            raise DimensionError("value count does not match pattern")
        object.__setattr__(self, "vals", vals)


@dataclass(frozen=True)
class CompletionProblem:
    """Observed data plus the target rank."""

    entries: ObservedEntries
    rank: int

    def __post_init__(self):
        if self.entries.count < 1:
            raise ContractViolationError("need at least one observed entry")
        if not 1 <= self.rank <= min(self.entries.n, self.entries.m):
            raise ContractViolationError("rank must lie in [1, min(n, m)]")

    @property
    def n(self):
        return self.entries.n

    @property
    def m(self):
        return self.entries.m

    @property
    def dof(self):
        r = self.rank
        return r * (self.n + self.m - r)

    @property
    def oversampling(self):
        return self.entries.count / self.dof


def _segment_sums(contrib, starts, out_rows):
    """Sum contiguous row segments of ``contrib`` given segment start offsets."""
    out = np.zeros((out_rows, contrib.shape[1]))
    first = starts[:-1]
    nonempty = first < starts[1:]
    if np.any(nonempty):
        out[nonempty] = np.add.reduceat(contrib, first[nonempty], axis=0)
    return out


def masked_values(x, entries):
    """Model values U R VT evaluated on the pattern, in pattern order."""
    if x.n != entries.n or x.m != entries.m:
        raise DimensionError("point shape does not match the pattern grid")
    if entries.count == 0:
        return np.zeros(0)
    ur = x.U @ x.R
    vals = np.einsum("ij,ij->i", ur[entries.rows], x.V[entries.cols])
    op_counter.add(2 * entries.count * x.r)
    return vals


def sparse_apply(s, dense, transpose=False):
    """Product S @ dense (or ST @ dense) for a sparse S on the pattern."""
    pat = s.pattern
    dense = np.asarray(dense, dtype=np.float64)
    if transpose:
        if dense.shape[0] != pat.n:
            raise DimensionError("dense operand must have n rows")
        perm = pat.col_perm
        contrib = s.vals[perm, None] * dense[pat.rows[perm]]
        out = _segment_sums(contrib, pat.col_starts, pat.m)
    else:
        if dense.shape[0] != pat.m:
            raise DimensionError("dense operand must have m rows")
        contrib = s.vals[:, None] * dense[pat.cols]
        out = _segment_sums(contrib, pat.row_starts, pat.n)
    op_counter.add(2 * pat.count * dense.shape[1])
    return out


def residual(problem, x):
    """Scaled residual 2 (P_Omega(U R VT) - data) / |Omega| on the pattern.

    This is the Euclidean gradient of the mean-square objective seen as a
    sparse matrix, the quantity every downstream consumer (gradient,
    rank update) actually wants.
    """
    vals = masked_values(x, problem.entries) - problem.entries.vals
    vals *= 2.0 / problem.entries.count
    return SparseResidual(problem.entries, vals)


def cost(problem, x):
    """Mean squared error over the observed entries."""
    e = masked_values(x, problem.entries) - problem.entries.vals
    return float(e @ e) / problem.entries.count


def mean_squared_error(x, entries):
    """MSE of the model against values on an arbitrary pattern (validation sets)."""
    if entries.count == 0:
        raise ContractViolationError("empty evaluation pattern")
    e = masked_values(x, entries) - entries.vals
    return float(e @ e) / entries.count


def riemannian_gradient(problem, x):
    """Gradient of the objective in the quotient metric.

    Writing S for the scaled residual 2 e / |Omega| on the pattern and
    W1 = R RT, W2 = RT R, the components are

        grad_U = (S V RT - U B_U) W1^{-1}
        grad_R = UT S V
        grad_V = (ST U R - V B_V) W2^{-1}

    with B_U solving W1 B + B W1 = 2 Sym(W1 UT S V RT) and B_V solving
    W2 B + B W2 = 2 Sym(W2 VT ST U R).  The result is horizontal by
    construction, no explicit projection needed.
    """
    s = residual(problem, x)
    sv = sparse_apply(s, x.V)
    stu = sparse_apply(s, x.U, transpose=True)
    w1 = x.R @ x.R.T
    w2 = x.R.T @ x.R
    dr = x.U.T @ sv
    t1 = dr @ x.R.T
    t2 = x.V.T @ stu @ x.R
    bu = solve_lyapunov_spd(w1, 2.0 * sym(w1 @ t1))
    bv = solve_lyapunov_spd(w2, 2.0 * sym(w2 @ t2))
    du = np.linalg.solve(w1, (sv @ x.R.T - x.U @ bu).T).T
    dv = np.linalg.solve(w2, (stu @ x.R - x.V @ bv).T).T
    return HorizontalVector(x, du, dr, dv)


def direction_values(x, xi, entries):
    """Directional derivative of the model on the pattern:

        P_Omega(dU R VT + U dR VT + U R dVT)  evaluated entrywise.
    """
    if entries.count == 0:
        return np.zeros(0)
    a = xi.dU @ x.R + x.U @ xi.dR
    ur = x.U @ x.R
    vals = np.einsum("ij,ij->i", a[entries.rows], x.V[entries.cols])
    vals += np.einsum("ij,ij->i", ur[entries.rows], xi.dV[entries.cols])
    op_counter.add(4 * entries.count * x.r)
    return vals


def initial_step(problem, x, xi):
    """Exact minimizer of the linearized objective along xi.

    Solves min_s |e + s d|^2 where e is the plain model-minus-data error
    and d the directional derivative of the model on the pattern, giving
    s* = -(e . d) / (d . d).  Raises on a degenerate direction (d = 0)
    or a non-descent pairing (e . d >= 0 with e nonzero).
    """
    if not isinstance(xi, TangentTriple):
        raise TypeError("initial_step expects a tangent vector")
    e = masked_values(x, problem.entries) - problem.entries.vals
    d = direction_values(x, xi, problem.entries)
    dd = float(d @ d)
    if dd == 0.0:
        raise DegenerateDirectionError("direction vanishes on the observed entries")
    if not np.any(e):
        return 0.0
    ed = float(e @ d)
    if ed >= 0.0:
        raise NonDescentDirectionError("linearized model predicts no decrease")
    return -ed / dd
