"""Collapsed variational lower bounds assembled from sufficient statistics.

All of this is M-sized algebra: it runs once per evaluation on the reduced
statistics and never touches individual datapoints.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np
import scipy.linalg as la

from .kernels import JITTER_MAX, jitchol
from .psi_stats import SufficientStats, VariationalPosterior

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class BoundBreakdown:
    total: float
    log_det_term: float
    data_fit_term: float
    quadratic_term: float
    trace_phi_term: float
    trace_kmm_term: float
    kl_term: float = 0.0

    def terms(self):
        return astuple(self)[1:]


@dataclass
class Factors:
    """Cholesky factors shared by the bound, its adjoints and prediction."""

    L: np.ndarray  # chol(Kmm)
    LA: np.ndarray  # chol(Kmm + beta Phi)
    C: np.ndarray  # (Kmm + beta Phi)^-1 Psi

    @classmethod
    def compute(cls, stats: SufficientStats, Kmm: np.ndarray, beta: float) -> "Factors":
        _check_beta(beta)
        try:
            L = la.cholesky(Kmm, lower=True, check_finite=False)
        except la.LinAlgError as err:
            raise la.LinAlgError("Kmm is not positive definite") from err
        A = Kmm + beta * stats.phi_big
        # escalation on A is measured against its own diagonal scale
        LA, _ = jitchol(A, float(np.mean(np.diag(A))), rel_start=0.0, rel_max=JITTER_MAX)
        C = la.cho_solve((LA, True), stats.psi_y, check_finite=False)
        return cls(L, LA, C)


def _check_beta(beta):
    if not beta > 0:
        raise ValueError(f"noise precision must be positive, got {beta}")


def _logdet(L):
    return 2.0 * np.sum(np.log(np.diag(L)))


def bound_regression(stats: SufficientStats, Kmm: np.ndarray, beta: float, N: int, D: int,
                     factors: Factors | None = None) -> BoundBreakdown:
    f = factors or Factors.compute(stats, Kmm, beta)
    log_det = D * (0.5 * N * np.log(beta) + 0.5 * _logdet(f.L) - 0.5 * N * LOG_2PI - 0.5 * _logdet(f.LA))
    data_fit = -0.5 * beta * stats.yy
    # trace of Psi^T A^-1 Psi, one term per output dimension
    quadratic = 0.5 * beta**2 * np.sum(stats.psi_y * f.C)
    trace_phi = -0.5 * beta * D * stats.phi
    trace_kmm = 0.5 * beta * D * np.trace(la.cho_solve((f.L, True), stats.phi_big, check_finite=False))
    total = log_det + data_fit + quadratic + trace_phi + trace_kmm
    return BoundBreakdown(float(total), float(log_det), float(data_fit), float(quadratic),
                          float(trace_phi), float(trace_kmm), 0.0)


def bound_per_dimension(y_d, Knm, Kmm, beta: float, phi: float, phi_big) -> float:
    """Single-output bound built from the N x M cross-covariance (small N only)."""
    y_d = np.asarray(y_d, dtype=float).ravel()
    N = y_d.shape[0]
    L = la.cholesky(Kmm, lower=True)
    LA = la.cholesky(Kmm + beta * phi_big, lower=True)
    b = Knm.T @ y_d
    c = la.cho_solve((LA, True), b)
    return float(
        0.5 * N * np.log(beta) + 0.5 * _logdet(L) - 0.5 * N * LOG_2PI - 0.5 * _logdet(LA)
        - 0.5 * beta * y_d @ y_d
        + 0.5 * beta**2 * b @ c
        - 0.5 * beta * phi
        + 0.5 * beta * np.trace(la.cho_solve((L, True), phi_big))
    )


def kl_gaussian(q: VariationalPosterior) -> float:
    """KL(q(X) || N(0, I)) summed over datapoints and latent dimensions."""
    if not np.all(q.s > 0):
        raise ValueError("variational variances must be positive")
    return float(0.5 * np.sum(q.s + q.mu**2 - np.log(q.s) - 1.0))


def kl_gaussian_grads(q: VariationalPosterior):
    return q.mu.copy(), 0.5 * (1.0 - 1.0 / q.s)


def bound_gplvm(stats: SufficientStats, Kmm, beta: float, q: VariationalPosterior | None, N: int, D: int,
                kl: float | None = None, factors: Factors | None = None) -> BoundBreakdown:
    """Expected-statistics bound minus KL(q || p). ``kl`` may be supplied pre-reduced."""
    b = bound_regression(stats, Kmm, beta, N, D, factors=factors)
    if kl is None:
        kl = kl_gaussian(q)
    b.kl_term = -float(kl)
    b.total = b.total - float(kl)
    return b


def bound_adjoints(stats: SufficientStats, Kmm, beta: float, N: int, D: int,
                   factors: Factors | None = None) -> dict:
    """Partial derivatives of bound_regression's total w.r.t. each argument.

    Matrix adjoints treat every entry as free, so they come out symmetric.
    """
    f = factors or Factors.compute(stats, Kmm, beta)
    M = Kmm.shape[0]
    eye = np.eye(M)
    Kinv = la.cho_solve((f.L, True), eye, check_finite=False)
    Ainv = la.cho_solve((f.LA, True), eye, check_finite=False)
    Kinv_Phi = Kinv @ stats.phi_big
    CC = f.C @ f.C.T

    d_phi = -0.5 * beta * D
    d_psi_y = beta**2 * f.C
    d_phi_big = -0.5 * D * beta * Ainv - 0.5 * beta**3 * CC + 0.5 * beta * D * Kinv
    d_Kmm = 0.5 * D * (Kinv - Ainv) - 0.5 * beta**2 * CC - 0.5 * beta * D * Kinv_Phi @ Kinv
    d_beta = (
        0.5 * D * N / beta
        - 0.5 * D * np.sum(Ainv * stats.phi_big)
        - 0.5 * stats.yy
        + beta * np.sum(stats.psi_y * f.C)
        - 0.5 * beta**2 * np.sum(f.C * (stats.phi_big @ f.C))
        - 0.5 * D * stats.phi
        + 0.5 * D * np.trace(Kinv_Phi)
    )
    sym = lambda A: 0.5 * (A + A.T)  # noqa: E731
    return {
        "d_phi": float(d_phi),
        "d_psi_y": d_psi_y,
        "d_phi_big": sym(d_phi_big),
        "d_Kmm": sym(d_Kmm),
        "d_beta": float(d_beta),
    }
