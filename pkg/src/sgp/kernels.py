"""ARD exponentiated-quadratic covariance and its derivatives.

    k(x, x') = variance * exp(-0.5 * sum_q (x_q - x'_q)**2 / lengthscale_q**2)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

# Gram jitter is relative to the kernel variance.
JITTER_INITIAL = 1e-6
JITTER_MAX = 1e-2


@dataclass
class KernelSpec:
    """Hyperparameters of the ARD exponentiated-quadratic kernel."""

    variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        self.variance = float(self.variance)
        self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        if not self.variance > 0:
            raise ValueError(f"kernel variance must be positive, got {self.variance}")
        if self.lengthscales.ndim != 1 or not np.all(self.lengthscales > 0):
            raise ValueError("lengthscales must be a vector of positive reals")

    @property
    def input_dim(self) -> int:
        return self.lengthscales.shape[0]

    def copy(self) -> "KernelSpec":
        return KernelSpec(self.variance, self.lengthscales.copy())


def _check_inputs(A: np.ndarray, theta: KernelSpec, name: str) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {A.shape}")
    if A.shape[1] != theta.input_dim:
        raise ValueError(
            f"{name} has {A.shape[1]} columns but the kernel has {theta.input_dim} lengthscales"
        )
    return A


def check_inducing(Z: np.ndarray) -> None:
    """Warn when inducing inputs contain exact duplicate rows."""
    Z = np.asarray(Z)
    if Z.shape[0] < 1:
        raise ValueError("need at least one inducing input")
    if np.unique(Z, axis=0).shape[0] < Z.shape[0]:
        warnings.warn("inducing inputs contain duplicate rows; relying on jitter", stacklevel=2)


def scaled_sqdist(A: np.ndarray, B: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    """Pairwise sum_q (a_q - b_q)**2 / l_q**2, formed by explicit differences."""
    diff = (A[:, None, :] - B[None, :, :]) / lengthscales
    return np.einsum("nmq,nmq->nm", diff, diff)


def kern_diag(X: np.ndarray, theta: KernelSpec) -> np.ndarray:
    X = _check_inputs(X, theta, "X")
    return np.full(X.shape[0], theta.variance)


def kern_cross(X: np.ndarray, Z: np.ndarray, theta: KernelSpec) -> np.ndarray:
    X = _check_inputs(X, theta, "X")
    Z = _check_inputs(Z, theta, "Z")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Z))):
        raise ValueError("non-finite kernel inputs")
    return theta.variance * np.exp(-0.5 * scaled_sqdist(X, Z, theta.lengthscales))


def kern_gram(Z: np.ndarray, theta: KernelSpec, jitter: float = 0.0) -> np.ndarray:
    """K(Z, Z) with ``jitter`` added to the diagonal (absolute units)."""
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    K = kern_cross(Z, Z, theta)
    K[np.diag_indices_from(K)] += jitter
    return K


def jitchol(K: np.ndarray, base: float, rel_start: float = 0.0, rel_max: float = JITTER_MAX):
    """Lower Cholesky factor of K, escalating diagonal jitter by x10 on failure.

    ``base`` sets the jitter unit (the kernel variance). The first attempt adds
    ``rel_start * base``; each retry multiplies by 10 until ``rel_max * base``.

    Returns (L, added) where ``added`` is the absolute jitter that was applied.
    """
    rel = rel_start
    while True:
        added = rel * base
        Kj = K if added == 0.0 else K + added * np.eye(K.shape[0])
        try:
            return la.cholesky(Kj, lower=True, check_finite=False), added
        except la.LinAlgError:
            pass
        if rel >= rel_max:
            raise la.LinAlgError(
                f"matrix not positive definite even with jitter {added:.3g}; "
                "inducing inputs are ill-conditioned"
            )
        rel = JITTER_INITIAL if rel == 0.0 else rel * 10.0


def stable_gram(Z: np.ndarray, theta: KernelSpec, jitter: float | None = None):
    """K(Z, Z) plus jitter, with the default escalation policy.

    With ``jitter=None`` the relative jitter starts at 1e-6 and escalates; an
    explicit ``jitter`` (relative to the variance) is used as the starting value.
    Returns (Kmm, L, rel_jitter).
    """
    K = kern_gram(Z, theta)
    rel0 = JITTER_INITIAL if jitter is None else float(jitter)
    L, added = jitchol(K, theta.variance, rel_start=rel0)
    rel = added / theta.variance
    if added:
        K = K + added * np.eye(K.shape[0])
    return K, L, rel


def kern_grads(X: np.ndarray, Z: np.ndarray, theta: KernelSpec, upstream: np.ndarray) -> dict:
    """Contract ``upstream`` (adjoint of kern_cross(X, Z)) with the kernel derivatives.

    Returns a dict with ``variance`` (scalar), ``lengthscales`` (Q,), ``Z`` (M, Q)
    and ``X`` (N, Q).
    """
    X = _check_inputs(X, theta, "X")
    Z = _check_inputs(Z, theta, "Z")
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (X.shape[0], Z.shape[0]):
        raise ValueError(f"upstream shape {upstream.shape} does not match ({X.shape[0]}, {Z.shape[0]})")
    ls = theta.lengthscales
    K = kern_cross(X, Z, theta)
    W = upstream * K
    diff = X[:, None, :] - Z[None, :, :]
    # dk/dx_q = -k (x_q - z_q) / l_q^2
    dX = -np.einsum("nm,nmq->nq", W, diff) / ls**2
    dZ = np.einsum("nm,nmq->mq", W, diff) / ls**2
    dls = np.einsum("nm,nmq->q", W, diff**2) / ls**3
    dvar = np.sum(W) / theta.variance
    return {"variance": dvar, "lengthscales": dls, "Z": dZ, "X": dX}


def gram_grads(Z: np.ndarray, theta: KernelSpec, upstream: np.ndarray, rel_jitter: float = 0.0) -> dict:
    """Gradients of <upstream, K(Z,Z) + rel_jitter * variance * I> w.r.t. theta and Z."""
    g = kern_grads(Z, Z, theta, upstream)
    return {
        "variance": g["variance"] + rel_jitter * np.trace(upstream),
        "lengthscales": g["lengthscales"],
        "Z": g["Z"] + g["X"],
    }
