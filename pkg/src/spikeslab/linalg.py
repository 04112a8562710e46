"""Cholesky-based positive-definite solves with escalating diagonal jitter.

All covariance solves in the package funnel through here so that the jitter
policy is applied uniformly: eps * trace/dim added to the diagonal, with
eps escalating through JITTER_SCALES before giving up.
"""

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import NumericalError

JITTER_SCALES = (0.0, 1e-10, 1e-8, 1e-6)


class CholFactor:
    """Lower-triangular Cholesky factor of a symmetric PD matrix."""

    __slots__ = ("L", "logdet", "jitter")

    def __init__(self, L, logdet, jitter):
        self.L = L
        self.logdet = logdet
        self.jitter = jitter

    @property
    def dim(self):
        return self.L.shape[0]

    def solve(self, b):
        """Solve A x = b for the factored matrix A."""
        return cho_solve((self.L, True), b)

    def inv(self):
        return self.solve(np.eye(self.dim))

    def half_solve(self, b):
        """Solve L x = b (useful for whitened quadratic forms)."""
        return solve_triangular(self.L, b, lower=True)


def chol_psd(A, *, context=None, state=None):
    """Cholesky-factor a symmetric matrix, escalating jitter on failure.

    Raises NumericalError with a condition estimate if the matrix stays
    indefinite after the final jitter level.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    if n == 0:
        return CholFactor(np.zeros((0, 0)), 0.0, 0.0)
    scale = np.trace(A) / n
    if not np.isfinite(scale) or scale <= 0.0:
        scale = 1.0
    for eps in JITTER_SCALES:
        jitter = eps * scale
        try:
            L = np.linalg.cholesky(A + jitter * np.eye(n) if jitter else A)
        except np.linalg.LinAlgError:
            continue
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return CholFactor(L, logdet, jitter)
    eigs = np.linalg.eigvalsh(0.5 * (A + A.T))
    cond = float(np.abs(eigs).max() / max(np.abs(eigs).min(), np.finfo(float).tiny))
    raise NumericalError(
        "Cholesky factorization failed after jitter escalation",
        context=context, cond=cond, state=state,
    )


def solve_psd(A, B, *, context=None, state=None):
    """Solve A X = B for symmetric positive definite A (with jitter)."""
    return chol_psd(A, context=context, state=state).solve(np.asarray(B, dtype=np.float64))


def mvn_logpdf(r, factor):
    """Log density of N(r; 0, A) given the CholFactor of A.

    r may be a vector (D,) or a batch (N, D); returns scalar or (N,).
    """
    r = np.asarray(r, dtype=np.float64)
    d = factor.dim
    white = factor.half_solve(np.atleast_2d(r).T)
    quad = np.sum(white * white, axis=0)
    out = -0.5 * (d * np.log(2.0 * np.pi) + factor.logdet + quad)
    return out[0] if r.ndim == 1 else out
