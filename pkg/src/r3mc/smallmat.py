"""Dense kernels on small square blocks: Lyapunov solves, polar factors.

Outputs with a structural guarantee (symmetric, skew-symmetric) are
returned in explicitly symmetrized form so the guarantee is exact, not
just within rounding.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, DimensionError, SingularMatrixError

RANK_TOL = 1e-12
SKEW_TOL = 1e-10


def _require_square(name, a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError("%s must be square, got shape %r" % (name, a.shape))
    return a


def sym(a):
    """Symmetric part (a + aT) / 2."""
    a = _require_square("operand", a)
    return (a + a.T) / 2.0


def skew(a):
    """Skew-symmetric part (a - aT) / 2."""
    a = _require_square("operand", a)
    return (a - a.T) / 2.0


def _require_skew(name, a):
    a = _require_square(name, a)
    defect = np.linalg.norm(a + a.T)
    if defect > SKEW_TOL * (1.0 + np.linalg.norm(a)):
        raise ContractViolationError(
            "%s must be skew-symmetric, defect %.3e" % (name, defect)
        )
    return a


@dataclass(frozen=True)
class SpdFactorization:
    """Eigendecomposition of an SPD matrix, eigenvalues descending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def apply_inverse(self, rhs):
        coeff = self.eigenvectors.T @ rhs
        return self.eigenvectors @ (coeff / self.eigenvalues[:, None])


def spd_factorization(p):
    """Factor a symmetric positive definite matrix; raises if not SPD.

    An eigenvalue counts as nonpositive when it falls below the rounding
    noise of the eigensolve itself, size * eps * max eigenvalue.  Scaled
    metric solves legitimately see eigenvalue ratios near the square of
    the factor condition number, so no coarser cutoff is safe here.
    """
    p = _require_square("matrix", p)
    vals, vecs = np.linalg.eigh(sym(p))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    floor = vals.size * np.finfo(np.float64).eps * max(vals[0], 0.0)
    if vals[-1] <= floor or vals[-1] <= 0.0:
        raise SingularMatrixError(
            "matrix is not positive definite (min eigenvalue %.3e)" % vals[-1]
        )
    return SpdFactorization(vals, vecs)


def polar_orthonormal_factor(a):
    """Orthonormal polar factor uf(A) = A (AT A)^{-1/2} via the thin SVD."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError("expected a matrix, got ndim %d" % a.ndim)
    w, s, zt = np.linalg.svd(a, full_matrices=False)
    if s[0] <= 0.0 or s[-1] <= RANK_TOL * s[0]:
        raise SingularMatrixError(
            "polar factor undefined: singular value ratio %.3e"
            % (s[-1] / s[0] if s[0] > 0.0 else 0.0)
        )
    return w @ zt


def solve_lyapunov_spd(p, q):
    """Solve P B + B P = Q for symmetric B, with P SPD and Q symmetric.

    Diagonalizing P = E diag(lam) ET turns the equation into
    B'_ij = Q'_ij / (lam_i + lam_j) in the eigenbasis.
    """
    p = _require_square("P", p)
    q = _require_square("Q", q)
    if p.shape != q.shape:
        raise DimensionError("P and Q must have matching shapes")
    fac = spd_factorization(p)
    qp = fac.eigenvectors.T @ sym(q) @ fac.eigenvectors
    denom = fac.eigenvalues[:, None] + fac.eigenvalues[None, :]
    b = fac.eigenvectors @ (qp / denom) @ fac.eigenvectors.T
    return sym(b)


def solve_coupled_lyapunov(r, c1, c2):
    """Solve the coupled pair for skew (O1, O2) given invertible R:

        O1 (R RT) + (R RT) O1 - R O2 RT = C1
        O2 (RT R) + (RT R) O2 - RT O1 R = C2

    With R = W diag(sig) ZT and primed variables O1' = WT O1 W,
    O2' = ZT O2 Z, the pair decouples entrywise:

        a_ij O1'_ij - b_ij O2'_ij = C1'_ij
        a_ij O2'_ij - b_ij O1'_ij = C2'_ij

    where a_ij = sig_i^2 + sig_j^2 and b_ij = sig_i sig_j, so

        O1' = (a C1' + b C2') / (a^2 - b^2)
        O2' = (a C2' + b C1') / (a^2 - b^2).

    The determinant a^2 - b^2 is at least 3 sig_min^4, checked before
    dividing.
    """
    r = _require_square("R", r)
    c1 = _require_skew("C1", c1)
    c2 = _require_skew("C2", c2)
    if c1.shape != r.shape or c2.shape != r.shape:
        raise DimensionError("C1 and C2 must match the shape of R")
    w, sig, zt = np.linalg.svd(r)
    if sig[-1] <= RANK_TOL * sig[0] or sig[0] <= 0.0:
        raise SingularMatrixError("R is numerically singular")
    z = zt.T
    c1p = w.T @ c1 @ w
    c2p = z.T @ c2 @ z
    a = sig[:, None] ** 2 + sig[None, :] ** 2
    b = sig[:, None] * sig[None, :]
    det = a * a - b * b
    bound = 3.0 * sig[-1] ** 4
    if det.min() < 0.5 * bound:
        raise SingularMatrixError(
            "coupled system determinant %.3e below bound %.3e" % (det.min(), bound)
        )
    o1 = w @ ((a * c1p + b * c2p) / det) @ w.T
    o2 = z @ ((a * c2p + b * c1p) / det) @ z.T
    return skew(o1), skew(o2)
