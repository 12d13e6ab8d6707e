"""Dense symmetric kernels: Cholesky log-determinants, Jacobi eigensolver, Gram."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve

from .errors import NoConvergence, NotPositiveDefinite

PIVOT_FLOOR = 1e-14


@dataclass(frozen=True)
class Spectrum:
    """Eigen/singular values sorted descending, with optional column eigenvectors."""

    values: np.ndarray
    vectors: Optional[np.ndarray] = None


def symmetrize(M):
    M = np.asarray(M, dtype=np.float64)
    return 0.5 * (M + M.T)


def _cholesky(M, shift):
    M = np.asarray(M, dtype=np.float64)
    A = M + shift * np.eye(M.shape[0]) if shift else M.copy()
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"shift*I + M is not positive definite ({exc})") from None
    pivots = np.diag(L) ** 2
    if not np.all(np.isfinite(pivots)) or pivots.min() <= PIVOT_FLOOR:
        raise NotPositiveDefinite(f"Cholesky pivot {pivots.min():.3e} <= {PIVOT_FLOOR:g}")
    return L


def logdet_psd(M, shift=0.0):
    """Natural log-determinant of ``shift*I + M`` via Cholesky.

    Raises NotPositiveDefinite when a pivot falls to 1e-14 or below, which in
    practice means a degenerate Gram matrix or a bad precision setting.
    """
    L = _cholesky(M, shift)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def logdet_and_solve(M, shift, B):
    """Return ``(logdet(shift*I + M), (shift*I + M)^{-1} B)`` from one factorization."""
    L = _cholesky(M, shift)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return logdet, cho_solve((L, True), B)


def gram(Z, scale=1.0):
    Z = np.asarray(Z, dtype=np.float64)
    return (Z @ Z.T) / scale


def offdiag_norm(A):
    # direct sum; subtracting the diagonal energy from the total cancels badly
    off = A - np.diag(np.diag(A))
    return float(np.linalg.norm(off))


def sym_eig(M, tol=1e-10, max_sweeps=100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Convergence is declared once the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||M||_F)``. Returns a Spectrum with values sorted descending
    and orthonormal eigenvectors in the columns.
    """
    A = symmetrize(M)
    n = A.shape[0]
    V = np.eye(n)
    target = tol * max(1.0, float(np.linalg.norm(A)))
    for _ in range(max_sweeps + 1):
        if offdiag_norm(A) < target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                diff = A[q, q] - A[p, p]
                if abs(apq) < 1e-300 * max(abs(diff), 1.0):
                    A[p, q] = A[q, p] = 0.0
                    continue
                theta = diff / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = A[:, p].copy()
                col_q = A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p = A[p, :].copy()
                row_q = A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")
    values = np.diag(A).copy()
    order = np.argsort(-values, kind="stable")
    return Spectrum(values=values[order], vectors=V[:, order])


def singular_values(Z):
    """Singular values of a d x m feature matrix, from the Jacobi spectrum of Z Z^T."""
    Z = np.asarray(Z, dtype=np.float64)
    vals = sym_eig(Z @ Z.T).values
    return np.sqrt(np.clip(vals, 0.0, None))
