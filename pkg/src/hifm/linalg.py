"""Dense symmetric eigen-analysis used by every other module.

The eigensolver is a cyclic Jacobi sweep: simple, dependency-free and
bit-deterministic for a fixed input, which the reproducibility contract
of the training pipeline relies on. Matrices here are plain float64
``(n, n)`` numpy arrays; ``EigenPair`` bundles the ascending eigenvalues
with the orthonormal column matrix ``P`` such that ``A = P diag(w) P^T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericalError, ValidationError

DEFAULT_TOL = 1e-12
MAX_SWEEPS = 100


@dataclass(frozen=True)
class EigenPair:
    """Eigendecomposition of a symmetric matrix.

    Attributes
    ----------
    eigvals : (n,) float64, ascending.
    eigvecs : (n, n) float64, orthonormal columns; column i pairs with
        eigvals[i]. Sign convention: the largest-magnitude component of
        each column is positive (first index wins ties).
    """

    eigvals: np.ndarray
    eigvecs: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigvals.shape[0]


def validate_sym_matrix(a: np.ndarray, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Check that ``a`` is a finite square symmetric matrix.

    Symmetry is relative: ``||A - A^T||_F <= tol * max(1, ||A||_F)``.
    Returns the explicitly symmetrized ``(A + A^T) / 2`` copy.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] < 1:
        raise ValidationError("matrix dimension must be >= 1")
    if not np.all(np.isfinite(a)):
        raise ValidationError("matrix has non-finite entries")
    fro = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > tol * max(1.0, fro):
        raise ValidationError("matrix is not symmetric within tolerance")
    return 0.5 * (a + a.T)


def eigh_sym(a: np.ndarray, tol: float = DEFAULT_TOL,
             max_sweeps: int = MAX_SWEEPS) -> EigenPair:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps run over the strict upper triangle in fixed (p, q) order until
    the off-diagonal Frobenius norm drops below ``tol * ||A||_F``, so the
    output is deterministic for identical input bits. Eigenvalues are
    returned ascending with the sign convention described in `EigenPair`.

    Raises
    ------
    ValidationError
        if the input is not symmetric within ``tol``.
    NumericalError
        if the sweep limit is exhausted before convergence.
    """
    w = validate_sym_matrix(a, tol)
    n = w.shape[0]
    v = np.eye(n)
    fro = np.linalg.norm(w)
    off_target = tol * fro

    def off_norm(m):
        strict = m.copy()
        np.fill_diagonal(strict, 0.0)
        return np.linalg.norm(strict)

    converged = False
    for _ in range(max_sweeps):
        if off_norm(w) <= off_target:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = w[p, q]
                if apq == 0.0:
                    continue
                theta = (w[q, q] - w[p, p]) / (2.0 * apq)
                # smaller-magnitude root of t^2 + 2 theta t - 1 = 0
                if abs(theta) > 1e150:  # theta^2 would overflow
                    t = 0.5 / theta
                elif theta >= 0.0:
                    t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                else:
                    t = 1.0 / (theta - math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                wp = w[:, p].copy()
                wq = w[:, q].copy()
                w[:, p] = c * wp - s * wq
                w[:, q] = s * wp + c * wq
                wp = w[p, :].copy()
                wq = w[q, :].copy()
                w[p, :] = c * wp - s * wq
                w[q, :] = s * wp + c * wq
                w[p, q] = 0.0
                w[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        converged = off_norm(w) <= off_target
    if not converged:
        raise NumericalError(
            f"Jacobi sweep did not converge in {max_sweeps} sweeps")

    eigvals = np.diag(w).copy()
    order = np.argsort(eigvals, kind="stable")
    eigvals = eigvals[order]
    eigvecs = v[:, order]
    for i in range(n):
        col = eigvecs[:, i]
        k = int(np.argmax(np.abs(col)))
        if col[k] < 0.0:
            eigvecs[:, i] = -col
    return EigenPair(eigvals=eigvals, eigvecs=eigvecs)


def spectral_apply(p: EigenPair, f: Callable[[np.ndarray], np.ndarray],
                   x: np.ndarray) -> np.ndarray:
    """Apply the spectral function ``P diag(f(w)) P^T`` to a vector.

    ``f`` receives the full eigenvalue array and must return finite values
    for every entry; a non-finite value (e.g. the reciprocal of a zero
    eigenvalue) raises `NumericalError` naming the offending index.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.dim,):
        raise ValidationError(
            f"vector length {x.shape} incompatible with dim {p.dim}")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        fw = np.asarray(f(p.eigvals), dtype=np.float64)
    if fw.shape != p.eigvals.shape:
        raise ValidationError("scalar function must map eigenvalues elementwise")
    bad = np.flatnonzero(~np.isfinite(fw))
    if bad.size:
        raise NumericalError(
            f"spectral function produced non-finite value at eigenvalue "
            f"index {int(bad[0])} (alpha={p.eigvals[bad[0]]!r})")
    return p.eigvecs @ (fw * (p.eigvecs.T @ x))


def subspace_projector(p: EigenPair, mask: np.ndarray) -> np.ndarray:
    """Orthogonal projector onto the span of the masked eigenvectors.

    Returns ``Pi = sum_{i in mask} p_i p_i^T``; idempotent and symmetric
    by construction.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (p.dim,):
        raise ValidationError(
            f"mask length {mask.shape} does not match dim {p.dim}")
    cols = p.eigvecs[:, mask]
    return cols @ cols.T
