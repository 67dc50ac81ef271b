"""Independent reference computations used to verify the fast paths.

Nothing here shares code with the tiled statistics or the bound: kernel values
are formed directly from the formula and expectations by brute-force
Gauss-Hermite tensor-product quadrature.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .kernels import KernelSpec

MAX_QUADRATURE_DIM = 3


def _rbf(x, Z, theta):
    r2 = np.sum(((x[None, :] - Z) / theta.lengthscales) ** 2, axis=1)
    return theta.variance * np.exp(-0.5 * r2)


def gauss_hermite_nodes(mu, s, n_nodes=50):
    """Tensor-product nodes/weights for N(mu, diag(s)); weights sum to one."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    s = np.atleast_1d(np.asarray(s, dtype=float))
    t, w = hermegauss(n_nodes)
    w = w / np.sqrt(2.0 * np.pi)
    grids = np.meshgrid(*([np.arange(n_nodes)] * mu.shape[0]), indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=1)
    nodes = mu + np.sqrt(s) * t[idx]
    weights = np.prod(w[idx], axis=1)
    return nodes, weights


def quadrature_oracle(mu, s, Z, theta: KernelSpec, which: str, n_nodes: int = 50) -> np.ndarray:
    """E[k(x,x)], E[k(x, z_m)] or E[k(x, z_m) k(x, z_m')] under x ~ N(mu, diag(s))."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if mu.shape[0] > MAX_QUADRATURE_DIM:
        raise ValueError(f"tensor-product quadrature limited to Q <= {MAX_QUADRATURE_DIM}")
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    nodes, weights = gauss_hermite_nodes(mu, s, n_nodes)
    if which == "psi0":
        return np.array(np.sum(weights) * theta.variance)
    # (nodes, M) kernel values at every node
    r2 = np.sum(((nodes[:, None, :] - Z[None, :, :]) / theta.lengthscales) ** 2, axis=2)
    k = theta.variance * np.exp(-0.5 * r2)
    if which == "psi1":
        return weights @ k
    if which == "psi2":
        return (k * weights[:, None]).T @ k
    raise ValueError(f"unknown statistic {which!r}")


def kl_quadrature(mu, s, n_nodes=50) -> float:
    """KL(N(mu, diag s) || N(0, I)) by quadrature of E_q[log q - log p]."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    s = np.atleast_1d(np.asarray(s, dtype=float))
    nodes, weights = gauss_hermite_nodes(mu, s, n_nodes)
    log_q = -0.5 * np.sum(np.log(2 * np.pi * s) + (nodes - mu) ** 2 / s, axis=1)
    log_p = -0.5 * np.sum(np.log(2 * np.pi) + nodes**2, axis=1)
    return float(np.dot(weights, log_q - log_p))


def dense_log_marginal(X, Y, theta: KernelSpec, beta: float) -> float:
    """log N(Y; 0, Knn + I/beta), summed over output columns, via LU (no Cholesky)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
    N, D = Y.shape
    K = np.array([[_rbf(x, xp[None, :], theta)[0] for xp in X] for x in X])
    C = K + np.eye(N) / beta
    sign, logdet = np.linalg.slogdet(C)
    if sign <= 0:
        raise np.linalg.LinAlgError("dense covariance not positive definite")
    alpha = np.linalg.solve(C, Y)
    return float(-0.5 * D * (N * np.log(2 * np.pi) + logdet) - 0.5 * np.sum(Y * alpha))


def dense_posterior(X, Y, Xs, theta: KernelSpec, beta: float):
    """Exact GP predictive mean and latent variance at Xs."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    K = np.array([[_rbf(x, xp[None, :], theta)[0] for xp in X] for x in X])
    Ks = np.array([_rbf(x, X, theta) for x in Xs])
    C = K + np.eye(X.shape[0]) / beta
    mean = Ks @ np.linalg.solve(C, Y)
    var = theta.variance - np.sum(Ks * np.linalg.solve(C, Ks.T).T, axis=1)
    return mean, var
