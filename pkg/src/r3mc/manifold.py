"""Quotient geometry of rank-r matrices factored as X = U R VT.

Points live on St(r, n) x GL(r) x St(r, m); two factorizations describe
the same matrix exactly when they differ by (U O1, O1T R O2, V O2) with
O1, O2 orthogonal, so optimization happens on the quotient by that group
action.  The metric weights the U and V components by R RT and RT R
respectively,

    g((a, b, c), (d, e, f)) = tr(R RT aT d) + tr(bT e) + tr(RT R cT f),

which adapts step lengths to the current spectrum.  Tangent vectors are
represented by their horizontal lifts: triples whose projection kills the
group directions.  Construction-time invariant checks are off by default
and switched on globally in the test suite.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractViolationError,
    DimensionError,
    RetractionError,
    SingularMatrixError,
)
from .rng import CounterRng
from .smallmat import (
    RANK_TOL,
    polar_orthonormal_factor,
    skew,
    solve_coupled_lyapunov,
    solve_lyapunov_spd,
    sym,
)

CHECK_TOL = 1e-10

_checks_enabled = False


def enable_invariant_checks(flag=True):
    """Globally toggle construction-time membership checks."""
    global _checks_enabled
    _checks_enabled = bool(flag)


def invariant_checks_enabled():
    return _checks_enabled


def _as_factor(name, a, rows=None, cols=None):
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if a.ndim != 2:
        raise DimensionError("%s must be a matrix" % name)
    if rows is not None and a.shape[0] != rows:
        raise DimensionError("%s has %d rows, expected %d" % (name, a.shape[0], rows))
    if cols is not None and a.shape[1] != cols:
        raise DimensionError("%s has %d cols, expected %d" % (name, a.shape[1], cols))
    if not np.all(np.isfinite(a)):
        raise ContractViolationError("%s contains non-finite values" % name)
    return a


@dataclass(frozen=True)
class FixedRankPoint:
    """Factor triple (U, R, V) with U, V orthonormal and R invertible."""

    U: np.ndarray
    R: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "U", _as_factor("U", self.U))
        object.__setattr__(self, "R", _as_factor("R", self.R, cols=self.U.shape[1]))
        object.__setattr__(self, "V", _as_factor("V", self.V, cols=self.U.shape[1]))
        if self.R.shape[0] != self.R.shape[1]:
            raise DimensionError("R must be square")
        if self.r > min(self.n, self.m):
            raise DimensionError("rank exceeds min(n, m)")
        if _checks_enabled:
            self.validate()

    @property
    def n(self):
        return self.U.shape[0]

    @property
    def m(self):
        return self.V.shape[0]

    @property
    def r(self):
        return self.R.shape[1]

    def validate(self, tol=CHECK_TOL):
        """Check Stiefel membership of U, V and invertibility of R."""
        for name, f in (("U", self.U), ("V", self.V)):
            defect = np.linalg.norm(f.T @ f - np.eye(self.r))
            if defect > tol:
                raise ContractViolationError(
                    "%s is not orthonormal, defect %.3e" % (name, defect)
                )
        sig = np.linalg.svd(self.R, compute_uv=False)
        if sig[-1] <= RANK_TOL * sig[0] or sig[0] == 0.0:
            raise SingularMatrixError("R is numerically singular")

    def matrix(self):
        """Dense n x m product U R VT (test sizes only)."""
        return self.U @ self.R @ self.V.T


@dataclass
class TangentTriple:
    """Per-factor displacement (dU, dR, dV) anchored at a point.

    dU and dV satisfy the Stiefel tangency conditions UT dU and VT dV
    skew-symmetric; dR is unconstrained.
    """

    point: FixedRankPoint
    dU: np.ndarray
    dR: np.ndarray
    dV: np.ndarray

    def __post_init__(self):
        x = self.point
        self.dU = _as_factor("dU", self.dU, rows=x.n, cols=x.r)
        self.dR = _as_factor("dR", self.dR, rows=x.r, cols=x.r)
        self.dV = _as_factor("dV", self.dV, rows=x.m, cols=x.r)
        if _checks_enabled:
            self.validate()

    def validate(self, tol=CHECK_TOL):
        # Projections divide by R RT, so attainable accuracy degrades with
        # its condition number; the tolerance tracks that honestly.
        defect = tangency_defect(self.point, (self.dU, self.dR, self.dV))
        scale = 1.0 + np.linalg.norm(self.dU) + np.linalg.norm(self.dV)
        if defect > tol * scale * _middle_condition(self.point):
            raise ContractViolationError("not a tangent triple, defect %.3e" % defect)

    def triple(self):
        return self.dU, self.dR, self.dV

    def _like(self, du, dr, dv):
        return type(self)(self.point, du, dr, dv)

    def __add__(self, other):
        if not isinstance(other, TangentTriple):
            return NotImplemented
        return self._like(self.dU + other.dU, self.dR + other.dR, self.dV + other.dV)

    def __sub__(self, other):
        if not isinstance(other, TangentTriple):
            return NotImplemented
        return self._like(self.dU - other.dU, self.dR - other.dR, self.dV - other.dV)

    def __neg__(self):
        return self._like(-self.dU, -self.dR, -self.dV)

    def __mul__(self, scalar):
        c = float(scalar)
        return self._like(c * self.dU, c * self.dR, c * self.dV)

    __rmul__ = __mul__


class HorizontalVector(TangentTriple):
    """Tangent triple orthogonal to the group directions in the metric."""

    def validate(self, tol=CHECK_TOL):
        super().validate(tol)
        defect = horizontality_defect(self.point, (self.dU, self.dR, self.dV))
        scale = 1.0 + np.linalg.norm(self.dU) + np.linalg.norm(self.dR)
        scale += np.linalg.norm(self.dV)
        scale *= 1.0 + np.linalg.norm(self.point.R) ** 2
        if defect > tol * scale * _middle_condition(self.point):
            raise ContractViolationError("not horizontal, defect %.3e" % defect)


def _middle_condition(x):
    """Squared condition number of R, the rounding amplification of the
    metric solves."""
    sig = np.linalg.svd(x.R, compute_uv=False)
    if sig[-1] <= 0.0:
        return np.inf
    return (sig[0] / sig[-1]) ** 2


def tangency_defect(x, triple):
    """Size of the symmetric parts of UT dU and VT dV (zero on the tangent space)."""
    du, _, dv = triple.triple() if isinstance(triple, TangentTriple) else triple
    return max(
        np.linalg.norm(sym(x.U.T @ du)),
        np.linalg.norm(sym(x.V.T @ dv)),
    )


def horizontality_defect(x, triple):
    """Residual of the horizontality conditions

        Skew(UT dU R RT + R dRT) = 0 and Skew(VT dV RT R + RT dR) = 0.
    """
    du, dr, dv = triple.triple() if isinstance(triple, TangentTriple) else triple
    w1 = x.R @ x.R.T
    w2 = x.R.T @ x.R
    return max(
        np.linalg.norm(skew(x.U.T @ du @ w1 + x.R @ dr.T)),
        np.linalg.norm(skew(x.V.T @ dv @ w2 + x.R.T @ dr)),
    )


def metric(x, xi, eta):
    """Inner product tr(R RT dUxT dUe) + tr(dRxT dRe) + tr(RT R dVxT dVe)."""
    w1 = x.R @ x.R.T
    w2 = x.R.T @ x.R
    return float(
        np.sum((xi.dU @ w1) * eta.dU)
        + np.sum(xi.dR * eta.dR)
        + np.sum((xi.dV @ w2) * eta.dV)
    )


def norm(x, xi):
    return float(np.sqrt(max(metric(x, xi, xi), 0.0)))


def project_to_tangent(x, ambient):
    """Metric-orthogonal projection of an ambient triple onto the tangent space.

    The U component solves the Lyapunov equation
    W B + B W = W (UT zU + zUT U) W with W = R RT and subtracts
    U B W^{-1}; the V side is analogous with W = RT R; the R component
    passes through unchanged.
    """
    zu, zr, zv = ambient.triple() if isinstance(ambient, TangentTriple) else ambient
    zu = _as_factor("zU", zu, rows=x.n, cols=x.r)
    zr = _as_factor("zR", zr, rows=x.r, cols=x.r)
    zv = _as_factor("zV", zv, rows=x.m, cols=x.r)
    w1 = x.R @ x.R.T
    w2 = x.R.T @ x.R
    bu = solve_lyapunov_spd(w1, w1 @ (x.U.T @ zu + zu.T @ x.U) @ w1)
    bv = solve_lyapunov_spd(w2, w2 @ (x.V.T @ zv + zv.T @ x.V) @ w2)
    du = zu - x.U @ np.linalg.solve(w1, bu).T
    dv = zv - x.V @ np.linalg.solve(w2, bv).T
    return TangentTriple(x, du, zr, dv)


def project_to_horizontal(x, xi):
    """Project a tangent triple onto the horizontal space.

    Subtracts the vertical lift of the skew pair (O1, O2) solving the
    coupled Lyapunov system whose right-hand sides are
    C1 = Skew(UT dU R RT + R dRT) and C2 = Skew(VT dV RT R + RT dR).
    """
    if not isinstance(xi, TangentTriple):
        raise TypeError("project_to_horizontal expects a TangentTriple")
    w1 = x.R @ x.R.T
    w2 = x.R.T @ x.R
    c1 = skew(x.U.T @ xi.dU @ w1 + x.R @ xi.dR.T)
    c2 = skew(x.V.T @ xi.dV @ w2 + x.R.T @ xi.dR)
    o1, o2 = solve_coupled_lyapunov(x.R, c1, c2)
    return HorizontalVector(
        x,
        xi.dU - x.U @ o1,
        xi.dR + o1 @ x.R - x.R @ o2,
        xi.dV - x.V @ o2,
    )


def vertical_lift(x, o1, o2):
    """Tangent triple generated by the orthogonal group pair (O1, O2):

        (U O1, R O2 - O1 R, V O2) for skew O1, O2.
    """
    o1 = _as_factor("O1", o1, rows=x.r, cols=x.r)
    o2 = _as_factor("O2", o2, rows=x.r, cols=x.r)
    for name, o in (("O1", o1), ("O2", o2)):
        defect = np.linalg.norm(o + o.T)
        if defect > CHECK_TOL * (1.0 + np.linalg.norm(o)):
            raise ContractViolationError(
                "%s must be skew-symmetric, defect %.3e" % (name, defect)
            )
    return TangentTriple(x, x.U @ o1, x.R @ o2 - o1 @ x.R, x.V @ o2)


def retract(x, xi, step):
    """Move from x along the horizontal vector xi by step length ``step``.

    U and V shift and re-orthonormalize through the polar factor,
    R shifts additively.  A zero step returns x itself.  Raises
    RetractionError when a shifted factor loses rank.
    """
    if not isinstance(xi, HorizontalVector):
        raise TypeError("retract expects a HorizontalVector")
    s = float(step)
    if s == 0.0:
        return x
    try:
        u_new = polar_orthonormal_factor(x.U + s * xi.dU)
        v_new = polar_orthonormal_factor(x.V + s * xi.dV)
    except SingularMatrixError as exc:
        raise RetractionError("shifted factor lost rank") from exc
    r_new = x.R + s * xi.dR
    sig = np.linalg.svd(r_new, compute_uv=False)
    if sig[0] == 0.0 or sig[-1] <= RANK_TOL * sig[0]:
        raise RetractionError("shifted R factor is numerically singular")
    return FixedRankPoint(u_new, r_new, v_new)


def transport_to(y, eta):
    """Transport a horizontal vector to the point y (tangent then horizontal projection)."""
    return project_to_horizontal(y, project_to_tangent(y, eta.triple()))


def transport(x, xi, eta, step):
    """Transport eta from x to retract(x, xi, step)."""
    return transport_to(retract(x, xi, step), eta)


def group_action(x, o1, o2):
    """Re-factor x as (U O1, O1T R O2, V O2); the represented matrix is unchanged."""
    o1 = _as_factor("O1", o1, rows=x.r, cols=x.r)
    o2 = _as_factor("O2", o2, rows=x.r, cols=x.r)
    for name, o in (("O1", o1), ("O2", o2)):
        defect = np.linalg.norm(o.T @ o - np.eye(x.r))
        if defect > CHECK_TOL:
            raise ContractViolationError(
                "%s must be orthogonal, defect %.3e" % (name, defect)
            )
    return FixedRankPoint(x.U @ o1, o1.T @ x.R @ o2, x.V @ o2)


def rotate_vector(x, xi, o1, o2):
    """Push a tangent triple through the group action used by group_action."""
    y = group_action(x, o1, o2)
    du = xi.dU @ o1
    dr = o1.T @ xi.dR @ o2
    dv = xi.dV @ o2
    cls = type(xi) if isinstance(xi, TangentTriple) else TangentTriple
    return cls(y, du, dr, dv)


def random_point(n, m, r, seed):
    """Random factor triple: polar factors of gaussian U, V and a gaussian R.

    The middle factor is resampled until its spectral condition is safely
    bounded (singular value ratio above 1e-6), so downstream metric solves
    start well posed.
    """
    rng = CounterRng(seed)
    u = polar_orthonormal_factor(rng.standard_normal((n, r)))
    v = polar_orthonormal_factor(rng.standard_normal((m, r)))
    while True:
        r_mid = rng.standard_normal((r, r))
        sv = np.linalg.svd(r_mid, compute_uv=False)
        if sv[-1] > 1e-6 * sv[0]:
            break
    return FixedRankPoint(u, r_mid, v)


def random_horizontal(x, seed):
    """Unit-norm horizontal vector from a projected gaussian ambient triple."""
    rng = CounterRng(seed)
    ambient = (
        rng.standard_normal((x.n, x.r)),
        rng.standard_normal((x.r, x.r)),
        rng.standard_normal((x.m, x.r)),
    )
    eta = project_to_horizontal(x, project_to_tangent(x, ambient))
    scale = norm(x, eta)
    if scale == 0.0:
        raise ContractViolationError("projected gaussian triple vanished")
    return (1.0 / scale) * eta
