"""Sufficient statistics phi, Psi, Phi as sums of per-datapoint contributions.

The deterministic path (sparse GP regression) uses kernel evaluations at fixed
inputs; the expected path (Bayesian GP-LVM) replaces each kernel evaluation by
its expectation under a diagonal Gaussian q(x_n) = N(mu_n, diag(s_n)):

    psi1[n, m]      = var * prod_q (1 + s_nq/l_q^2)^-1/2
                          * exp(-(mu_nq - z_mq)^2 / (2 (s_nq + l_q^2)))
    psi2_n[m, m']   = var^2 * prod_q (1 + 2 s_nq/l_q^2)^-1/2
                          * exp(-(z_mq - z_m'q)^2 / (4 l_q^2)
                                - (mu_nq - zbar_q)^2 / (2 s_nq + l_q^2))

with zbar = (z_m + z_m') / 2. Psi is stored as the M x D product psi1^T Y.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _tiles
from .kernels import KernelSpec, kern_cross


@dataclass(frozen=True)
class TileConfig:
    """Two-level work division: inducing indices/pairs per block, datapoints per chunk."""

    block_span: int = 64
    thread_span: int = 256

    def __post_init__(self):
        if self.block_span < 1 or self.thread_span < 1:
            raise ValueError("tile spans must be >= 1")


DEFAULT_TILES = TileConfig()


@dataclass
class VariationalPosterior:
    """Diagonal Gaussian q(x_n) per datapoint."""

    mu: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        self.s = np.atleast_2d(np.asarray(self.s, dtype=float))
        if self.mu.shape != self.s.shape:
            raise ValueError(f"mu {self.mu.shape} and s {self.s.shape} differ in shape")
        if not np.all(self.s > 0):
            raise ValueError("variational variances must be positive")

    @property
    def num_data(self) -> int:
        return self.mu.shape[0]

    def rows(self, start: int, stop: int) -> "VariationalPosterior":
        return VariationalPosterior(self.mu[start:stop], self.s[start:stop])


def two_sum(a, b):
    """Error-free addition: a + b == s + e exactly (elementwise)."""
    s = a + b
    bp = s - a
    return s, (a - (s - bp)) + (b - bp)


def dd_add(x, x_lo, y, y_lo):
    """Add two (hi, lo) pairs and renormalize so that hi = fl(hi + lo)."""
    s, e = two_sum(x, y)
    lo = e + (x_lo + y_lo)
    hi = s + lo
    return hi, lo - (hi - s)


@dataclass
class SufficientStats:
    """phi, Psi (M x D), Phi (M x M) and yy over a set of datapoints.

    ``residual`` optionally carries the low-order words left over from the
    summation (same keys as :meth:`fields`); ``+`` uses them so partial
    statistics combine to the same rounded result however the rows were split.
    """

    phi: float
    psi_y: np.ndarray
    phi_big: np.ndarray
    yy: float
    n_count: int
    residual: dict | None = field(default=None, repr=False, compare=False)

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        a, b = self.fields(), other.fields()
        ra, rb = self._res(), other._res()
        hi, lo = {}, {}
        for k in a:
            hi[k], lo[k] = dd_add(a[k], ra[k], b[k], rb[k])
        return SufficientStats(float(hi["phi"]), hi["psi_y"], hi["phi_big"], float(hi["yy"]),
                               self.n_count + other.n_count, residual=lo)

    def _res(self):
        if self.residual is not None:
            return self.residual
        return {k: np.zeros_like(v) if isinstance(v, np.ndarray) else 0.0 for k, v in self.fields().items()}

    @classmethod
    def zeros(cls, M: int, D: int) -> "SufficientStats":
        return cls(0.0, np.zeros((M, D)), np.zeros((M, M)), 0.0, 0)

    def fields(self):
        return {"phi": self.phi, "psi_y": self.psi_y, "phi_big": self.phi_big, "yy": self.yy}


@dataclass
class StatsGradients:
    """Gradients of <adjoints, stats> split into per-datapoint and global parts.

    ``d_mu`` holds d/dX for the deterministic path; ``d_s`` is None there.
    ``residual`` holds the low-order words of the global sums, keyed like
    :meth:`global_parts`.
    """

    d_mu: np.ndarray
    d_s: np.ndarray | None
    d_Z: np.ndarray
    d_variance: float
    d_lengthscales: np.ndarray
    residual: dict | None = field(default=None, repr=False)

    def global_parts(self):
        return {"d_Z": self.d_Z, "d_variance": self.d_variance, "d_lengthscales": self.d_lengthscales}


def _as_matrix(A, name):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(A)


def _check(X, Y, Z, theta):
    X = _as_matrix(X, "inputs")
    Y = _as_matrix(Y, "Y")
    Z = _as_matrix(Z, "Z")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"row counts differ: {X.shape[0]} inputs vs {Y.shape[0]} outputs")
    Q = theta.input_dim
    if X.shape[1] != Q or Z.shape[1] != Q:
        raise ValueError(f"input dimension mismatch: kernel has {Q}, got {X.shape[1]} and {Z.shape[1]}")
    return X, Y, Z


def _pairs(M):
    return _tiles.pair_index(M)


def _assemble(N, Y, theta, psi_y, psi_y_lo, pairs, pairs_lo, m1, m2, M):
    # phi = N * variance is formed as an exact product so shards add up exactly
    phi, phi_lo = _tiles.two_prod(float(N), theta.variance)
    yy, yy_lo = _tiles.dd_sum_squares(Y)
    return SufficientStats(
        phi=phi,
        psi_y=psi_y,
        phi_big=_tiles.pairs_to_matrix(pairs, m1, m2, M),
        yy=yy,
        n_count=N,
        residual={"phi": phi_lo, "psi_y": psi_y_lo, "phi_big": _tiles.pairs_to_matrix(pairs_lo, m1, m2, M),
                  "yy": yy_lo},
    )


def stats_deterministic(X, Y, Z, theta: KernelSpec, tiles: TileConfig = DEFAULT_TILES) -> SufficientStats:
    X, Y, Z = _check(X, Y, Z, theta)
    M = Z.shape[0]
    K, psi_y, psi_y_lo = _tiles.psi1_forward(X, np.zeros_like(X), Y, Z, theta.variance, theta.lengthscales,
                                             tiles.block_span, tiles.thread_span)
    m1, m2 = _pairs(M)
    pairs, pairs_lo = _tiles.phi_det_forward(K, m1, m2, tiles.block_span, tiles.thread_span)
    return _assemble(X.shape[0], Y, theta, psi_y, psi_y_lo, pairs, pairs_lo, m1, m2, M)


def psi0_expected(q: VariationalPosterior, theta: KernelSpec) -> float:
    return q.num_data * theta.variance


def psi1_expected(q: VariationalPosterior, Z, theta: KernelSpec, tiles: TileConfig = DEFAULT_TILES) -> np.ndarray:
    mu, _, Z = _check(q.mu, np.zeros((q.num_data, 0)), Z, theta)
    psi1, _, _ = _tiles.psi1_forward(mu, np.ascontiguousarray(q.s), np.zeros((mu.shape[0], 0)), Z,
                                     theta.variance, theta.lengthscales, tiles.block_span, tiles.thread_span)
    return psi1


def psi2_expected(q: VariationalPosterior, Z, theta: KernelSpec, tiles: TileConfig = DEFAULT_TILES) -> np.ndarray:
    mu, _, Z = _check(q.mu, np.zeros((q.num_data, 0)), Z, theta)
    m1, m2 = _pairs(Z.shape[0])
    pairs, _ = _tiles.psi2_forward(mu, np.ascontiguousarray(q.s), Z, theta.variance, theta.lengthscales,
                                   m1, m2, tiles.block_span, tiles.thread_span)
    return _tiles.pairs_to_matrix(pairs, m1, m2, Z.shape[0])


def stats_expected(q: VariationalPosterior, Y, Z, theta: KernelSpec,
                   tiles: TileConfig = DEFAULT_TILES, return_psi1: bool = False):
    mu, Y, Z = _check(q.mu, Y, Z, theta)
    s = np.ascontiguousarray(q.s)
    M = Z.shape[0]
    psi1, psi_y, psi_y_lo = _tiles.psi1_forward(mu, s, Y, Z, theta.variance, theta.lengthscales,
                                                tiles.block_span, tiles.thread_span)
    m1, m2 = _pairs(M)
    pairs, pairs_lo = _tiles.psi2_forward(mu, s, Z, theta.variance, theta.lengthscales, m1, m2,
                                          tiles.block_span, tiles.thread_span)
    stats = _assemble(mu.shape[0], Y, theta, psi_y, psi_y_lo, pairs, pairs_lo, m1, m2, M)
    return (stats, psi1) if return_psi1 else stats


def _check_adjoints(d_psi_y, d_phi_big, M, D):
    d_psi_y = np.asarray(d_psi_y, dtype=float)
    d_phi_big = np.asarray(d_phi_big, dtype=float)
    if d_psi_y.shape != (M, D) or d_phi_big.shape != (M, M):
        raise ValueError("adjoint shapes do not match the statistics")
    if not np.allclose(d_phi_big, d_phi_big.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(d_phi_big).max())):
        raise ValueError("d_phi_big must be symmetric")
    return d_psi_y, d_phi_big


def _global_sum(M, Q, N, d_phi, *parts):
    """Add the flat [Z | lengthscales | variance] (hi, lo) partials plus N * d_phi."""
    hi = np.zeros(M * Q + Q + 1)
    lo = np.zeros_like(hi)
    for h, l in parts:
        hi, lo = dd_add(hi, lo, h, l)
    ph, pl = _tiles.two_prod(float(N), float(d_phi))
    hi[-1], lo[-1] = dd_add(hi[-1], lo[-1], ph, pl)
    split = lambda v: (v[: M * Q].reshape(M, Q), v[M * Q: M * Q + Q], float(v[-1]))  # noqa: E731
    (dZ, dls, dvar), (rZ, rls, rvar) = split(hi), split(lo)
    return dZ, dls, dvar, {"d_Z": rZ, "d_lengthscales": rls, "d_variance": rvar}


def stats_grads(q: VariationalPosterior, Y, Z, theta: KernelSpec, d_phi: float, d_psi_y, d_phi_big,
                tiles: TileConfig = DEFAULT_TILES) -> StatsGradients:
    """Gradient of d_phi*phi + <d_psi_y, Psi> + <d_phi_big, Phi> for the expected statistics."""
    mu, Y, Z = _check(q.mu, Y, Z, theta)
    s = np.ascontiguousarray(q.s)
    M, Q = Z.shape
    d_psi_y, d_phi_big = _check_adjoints(d_psi_y, d_phi_big, M, Y.shape[1])
    G1 = Y @ d_psi_y.T
    bs, ts = tiles.block_span, tiles.thread_span
    a_mu, a_s, a_g, a_lo = _tiles.psi1_backward(mu, s, Z, theta.variance, theta.lengthscales, G1, bs, ts)
    m1, m2 = _pairs(M)
    w = _tiles.pair_weights(d_phi_big, m1, m2)
    b_mu, b_s, b_g, b_lo = _tiles.psi2_backward(mu, s, Z, theta.variance, theta.lengthscales,
                                                m1, m2, w, bs, ts)
    dZ, dls, dvar, res = _global_sum(M, Q, mu.shape[0], d_phi, (a_g, a_lo), (b_g, b_lo))
    return StatsGradients(d_mu=a_mu + b_mu, d_s=a_s + b_s, d_Z=dZ, d_variance=dvar, d_lengthscales=dls,
                          residual=res)


def stats_grads_deterministic(X, Y, Z, theta: KernelSpec, d_phi: float, d_psi_y, d_phi_big,
                              tiles: TileConfig = DEFAULT_TILES) -> StatsGradients:
    """Same contraction for the deterministic statistics; ``d_mu`` holds d/dX."""
    X, Y, Z = _check(X, Y, Z, theta)
    M, Q = Z.shape
    d_psi_y, d_phi_big = _check_adjoints(d_psi_y, d_phi_big, M, Y.shape[1])
    G1 = Y @ d_psi_y.T
    bs, ts = tiles.block_span, tiles.thread_span
    zero_s = np.zeros_like(X)
    a_X, _, a_g, a_lo = _tiles.psi1_backward(X, zero_s, Z, theta.variance, theta.lengthscales, G1, bs, ts)
    K = kern_cross(X, Z, theta)
    m1, m2 = _pairs(M)
    w = _tiles.pair_weights(d_phi_big, m1, m2)
    b_X, b_g, b_lo = _tiles.phi_det_backward(X, Z, K, theta.variance, theta.lengthscales, m1, m2, w, bs, ts)
    dZ, dls, dvar, res = _global_sum(M, Q, X.shape[0], d_phi, (a_g, a_lo), (b_g, b_lo))
    return StatsGradients(d_mu=a_X + b_X, d_s=None, d_Z=dZ, d_variance=dvar, d_lengthscales=dls, residual=res)
