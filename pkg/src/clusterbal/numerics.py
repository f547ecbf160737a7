"""SVD-backed pseudoinverse, minimum-norm least squares, and projections.

All decompositions are deterministic (LAPACK SVD, no randomization) so
replicated runs are bit-stable on a given platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

FEAS_TOL = 1e-8


def _validate(a):
    a = np.asarray(a, dtype=np.float64)
    if not np.isfinite(a).all():
        raise InvalidInput("matrix contains non-finite entries")
    return a


def _default_rcond(shape):
    return max(shape) * np.finfo(np.float64).eps


@dataclass(frozen=True)
class SolveReport:
    """Minimum-norm solve outcome with feasibility evidence."""

    solution: np.ndarray
    residual_norm: float
    relative_residual: float
    rank: int

    def feasible(self, tol=FEAS_TOL):
        return self.relative_residual <= tol


def pinv(a, rcond=None):
    """Moore-Penrose pseudoinverse; singular values <= rcond*sigma_max dropped."""
    a = _validate(a)
    if rcond is None:
        rcond = _default_rcond(a.shape)
    return np.linalg.pinv(a, rcond=rcond)


def min_norm_solve(a, b, rcond=None, feas_tol=FEAS_TOL):
    """Minimum-Euclidean-norm least-squares solution of a x = b."""
    a = _validate(a)
    b = _validate(b).ravel()
    if a.shape[0] != b.size:
        raise InvalidInput(f"shape mismatch: {a.shape} vs rhs {b.size}")
    if rcond is None:
        rcond = _default_rcond(a.shape)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    keep = s > rcond * (s[0] if s.size else 0.0)
    rank = int(keep.sum())
    coef = (u[:, keep].T @ b) / s[keep]
    x = vt[keep].T @ coef
    resid = float(np.linalg.norm(a @ x - b))
    rel = resid / max(float(np.linalg.norm(b)), 1.0)
    return SolveReport(solution=x, residual_norm=resid, relative_residual=rel, rank=rank)


def project_colspace(b, v, rcond=None):
    """Orthogonal projection of v onto the column space of b."""
    b = _validate(b)
    v = _validate(v).ravel()
    if b.shape[0] != v.size:
        raise InvalidInput(f"shape mismatch: {b.shape} vs vector {v.size}")
    if rcond is None:
        rcond = _default_rcond(b.shape)
    u, s, _ = np.linalg.svd(b, full_matrices=False)
    keep = s > rcond * (s[0] if s.size else 0.0)
    uk = u[:, keep]
    return uk @ (uk.T @ v)


class DesignOps:
    """One SVD of a design matrix, reused across every solver that needs it.

    Backs the balancing solve (min-norm row-space solve), the OLS coefficient
    map, and column-space projections, so a fit pays for a single
    decomposition.
    """

    def __init__(self, phi, rcond=None, feas_tol=FEAS_TOL):
        phi = _validate(phi)
        if rcond is None:
            rcond = _default_rcond(phi.shape)
        self.phi = phi
        self.feas_tol = feas_tol
        u, s, vt = np.linalg.svd(phi, full_matrices=False)
        keep = s > rcond * (s[0] if s.size else 0.0)
        self._u = u[:, keep]
        self._s = s[keep]
        self._vt = vt[keep]
        self.rank = int(keep.sum())

    def ols_coefficients(self, y):
        """phi^+ y: minimum-norm least-squares coefficients."""
        return self._vt.T @ ((self._u.T @ np.asarray(y, float)) / self._s)

    def min_norm_row_solve(self, t):
        """Minimum-norm w with phi^T w = t, as a SolveReport."""
        t = np.asarray(t, dtype=np.float64).ravel()
        w = self._u @ ((self._vt @ t) / self._s)
        resid = float(np.linalg.norm(self.phi.T @ w - t))
        rel = resid / max(float(np.linalg.norm(t)), 1.0)
        return SolveReport(solution=w, residual_norm=resid, relative_residual=rel, rank=self.rank)

    def project(self, v):
        """Projection of v onto the column space of phi."""
        v = np.asarray(v, dtype=np.float64).ravel()
        return self._u @ (self._u.T @ v)
