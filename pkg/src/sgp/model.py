"""Sparse GP regression and the Bayesian GP-LVM on top of the parallel engine."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .bound import BoundBreakdown, bound_regression
from .kernels import KernelSpec, check_inducing, kern_cross
from .optimizer import LBFGS, ModelParams, ParameterVector, layout_of, pack, pack_gradient, unpack
from .parallel import Cluster, Evaluation, sync_step, timing_split
from .psi_stats import DEFAULT_TILES, TileConfig, VariationalPosterior


class NotFittedError(RuntimeError):
    pass


class FitNumericError(np.linalg.LinAlgError):
    """A numeric failure during fit, tagged with the iteration it occurred in."""

    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"iteration {iteration}: {cause}")
        self.iteration = iteration


@dataclass
class FitRow:
    iteration: int
    bound: float
    grad_norm: float
    time_s: float
    indistributable_fraction: float


@dataclass
class FitTrace:
    rows: list = field(default_factory=list)
    status: str = ""
    message: str = ""
    n_evals: int = 0

    @property
    def bounds(self):
        return np.array([r.bound for r in self.rows])


class _SparseGP:
    """State shared by both models: outputs, inducing inputs, kernel and noise."""

    def __init__(self, Y, Z, theta: KernelSpec, beta: float, jitter: float | None = None):
        self.Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if not np.all(np.isfinite(self.Y)):
            raise ValueError("Y contains non-finite values")
        self.Z = np.atleast_2d(np.asarray(Z, dtype=float)).copy()
        check_inducing(self.Z)
        self.theta = theta
        if not beta > 0:
            raise ValueError("beta must be positive")
        self.beta = float(beta)
        self.jitter = jitter
        self._fitted: Evaluation | None = None

    @property
    def num_data(self):
        return self.Y.shape[0]

    @property
    def output_dim(self):
        return self.Y.shape[1]

    @property
    def num_inducing(self):
        return self.Z.shape[0]

    # subclasses provide the inputs of the cluster and the local parameters
    def _inputs(self):
        raise NotImplementedError

    def get_params(self) -> ModelParams:
        raise NotImplementedError

    def set_params(self, p: ModelParams):
        self.beta = p.beta
        self.theta = p.theta.copy()
        self.Z = p.Z.copy()
        self._fitted = None

    def cluster(self, workers: int = 1, tiles: TileConfig = DEFAULT_TILES, max_threads=None) -> Cluster:
        return Cluster(self.Y, self._inputs(), workers=workers, tiles=tiles, jitter=self.jitter,
                       max_threads=max_threads)

    def evaluate(self, workers: int = 1, tiles: TileConfig = DEFAULT_TILES, with_grad: bool = True) -> Evaluation:
        with self.cluster(workers, tiles) as c:
            return c.evaluate(self.get_params(), with_grad=with_grad)

    def elbo(self, workers: int = 1, tiles: TileConfig = DEFAULT_TILES) -> BoundBreakdown:
        return self.evaluate(workers, tiles, with_grad=False).bound

    def objective(self, cluster: Cluster, layout=None):
        """Negative bound and its gradient as a function of the packed vector."""
        layout = layout or layout_of(self.get_params())
        last = {}

        def fun(x):
            p = unpack(ParameterVector(x, layout))
            try:
                ev = cluster.evaluate(p)
            except (np.linalg.LinAlgError, ArithmeticError, ValueError):
                return np.inf, np.zeros_like(x)
            last.clear()
            last[x.tobytes()] = ev
            return -ev.bound.total, -pack_gradient(p, ev.grads)

        fun.last = last
        return fun

    def fit(self, workers: int = 1, max_iters: int = 1000, gtol: float = 1e-5, ftol: float = 1e-9,
            tiles: TileConfig = DEFAULT_TILES, max_evals: int | None = None, max_threads=None,
            callback=None) -> FitTrace:
        """Maximize the bound with L-BFGS; one sync_step per iteration.

        Returns a trace whose row 0 is the initial bound. The model parameters
        are updated in place and the posterior factors cached for ``predict``.
        """
        v0 = pack(self.get_params())
        trace = FitTrace()
        with self.cluster(workers, tiles, max_threads) as c:
            fun = self.objective(c, v0.layout)
            t0 = time.perf_counter()
            try:
                opt = LBFGS(fun, v0.values, gtol=gtol, ftol=ftol, max_evals=max_evals)
            except (np.linalg.LinAlgError, ArithmeticError) as err:
                raise FitNumericError(0, err) from err
            trace.rows.append(FitRow(0, -opt.f, opt.grad_norm, time.perf_counter() - t0,
                                     timing_split(c.rounds)["indistributable_fraction"]))
            to_params = lambda x: unpack(ParameterVector(x, v0.layout))  # noqa: E731
            while opt.iteration < max_iters:
                n_before = len(c.rounds)
                try:
                    rec = sync_step(c, opt, to_params)
                except (np.linalg.LinAlgError, ArithmeticError) as err:
                    raise FitNumericError(opt.iteration + 1, err) from err
                if rec is None:
                    break
                frac = timing_split(c.rounds[n_before:])["indistributable_fraction"]
                trace.rows.append(FitRow(rec.iteration, -rec.value, rec.grad_norm, rec.elapsed, frac))
                if callback is not None:
                    callback(self, trace.rows[-1])
                if opt.status is not None:
                    break
            if opt.status is None:
                opt.status = "max_iters" if not opt.converged() else opt.status
            trace.status, trace.message, trace.n_evals = opt.status, opt.message, opt.obj.n_evals
            final = to_params(opt.x)
            ev = fun.last.get(opt.x.tobytes())
            if ev is None:
                ev = c.evaluate(final, with_grad=False)
        self.set_params(final)
        self._fitted = ev
        return trace

    def posterior_bound(self) -> BoundBreakdown:
        """Bound recomputed from the cached factors of the last fit."""
        ev = self._require_fit()
        b = bound_regression(ev.stats, ev.Kmm, self.beta, self.num_data, self.output_dim, factors=ev.factors)
        b.kl_term = ev.bound.kl_term
        b.total += b.kl_term
        return b

    def _require_fit(self) -> Evaluation:
        if self._fitted is None:
            raise NotFittedError("call fit() before predict()")
        return self._fitted

    def predict(self, Xs, noisy: bool = False):
        """Predictive mean and variance (T x D) at inputs ``Xs``.

        The latent-function variance is returned unless ``noisy`` is set, in
        which case the observation noise 1/beta is added.
        """
        ev = self._require_fit()
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        Ksm = kern_cross(Xs, self.Z, self.theta)
        f = ev.factors
        mean = self.beta * Ksm @ f.C
        a = la.solve_triangular(f.L, Ksm.T, lower=True)
        b = la.solve_triangular(f.LA, Ksm.T, lower=True)
        var = self.theta.variance - np.sum(a * a, axis=0) + np.sum(b * b, axis=0)
        if noisy:
            var = var + 1.0 / self.beta
        var = np.maximum(var, np.finfo(float).tiny)
        return mean, np.repeat(var[:, None], self.output_dim, axis=1)


class SparseGPRegression(_SparseGP):
    """Collapsed variational sparse GP regression with fixed inputs X."""

    def __init__(self, X, Y, Z=None, theta: KernelSpec | None = None, beta: float | None = None,
                 num_inducing: int = 10, seed: int = 0, jitter: float | None = None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
        if Z is None:
            rng = np.random.default_rng(seed)
            Z = X[rng.choice(X.shape[0], min(num_inducing, X.shape[0]), replace=False)]
        var = float(np.var(Y))
        if theta is None:
            theta = KernelSpec(var if var > 0 else 1.0, np.ones(X.shape[1]))
        if beta is None:
            beta = 100.0 / var if var > 0 else 1.0
        super().__init__(Y, Z, theta, beta, jitter)
        self.X = X

    def _inputs(self):
        return self.X

    def get_params(self) -> ModelParams:
        return ModelParams(self.beta, self.theta.copy(), self.Z.copy())


class BayesianGPLVM(_SparseGP):
    """Bayesian GP-LVM with a factorized Gaussian q(X) and standard normal prior."""

    def __init__(self, Y, q: VariationalPosterior, Z, theta: KernelSpec, beta: float, jitter: float | None = None):
        super().__init__(Y, Z, theta, beta, jitter)
        if q.mu.shape[0] != self.num_data:
            raise ValueError("q(X) must have one row per datapoint")
        if q.mu.shape[1] != self.Z.shape[1] or theta.input_dim != self.Z.shape[1]:
            raise ValueError("latent dimension mismatch between q(X), Z and the kernel")
        self.q = q

    @property
    def latent_dim(self):
        return self.q.mu.shape[1]

    def _inputs(self):
        return None

    def get_params(self) -> ModelParams:
        return ModelParams(self.beta, self.theta.copy(), self.Z.copy(), self.q.mu.copy(), self.q.s.copy())

    def set_params(self, p: ModelParams):
        super().set_params(p)
        self.q = VariationalPosterior(p.mu, p.s)


def pca_latent(Y, Q: int, rng=None) -> np.ndarray:
    """Projection of centred Y onto its first Q principal directions, unit variance per column."""
    Yc = Y - Y.mean(axis=0)
    _, _, Vt = np.linalg.svd(Yc, full_matrices=False)
    k = min(Q, Vt.shape[0])
    X = Yc @ Vt[:k].T
    if k < Q:
        rng = rng or np.random.default_rng(0)
        X = np.hstack([X, rng.standard_normal((Y.shape[0], Q - k))])
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return X / sd


def init_gplvm(Y, Q: int, M: int, seed: int = 0, jitter: float | None = None) -> BayesianGPLVM:
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    N, D = Y.shape
    var = float(np.var(Y))
    if not var > 0:
        raise ValueError("Y has zero variance")
    if M > N:
        raise ValueError(f"more inducing inputs ({M}) than datapoints ({N})")
    if Q > D:
        warnings.warn(f"latent dimension {Q} exceeds data dimension {D}", stacklevel=2)
    rng = np.random.default_rng(seed)
    mu = pca_latent(Y, Q, rng)
    Z = mu[np.sort(rng.choice(N, M, replace=False))].copy()
    q = VariationalPosterior(mu, np.full((N, Q), 0.5))
    return BayesianGPLVM(Y, q, Z, KernelSpec(var, np.ones(Q)), 100.0 / var, jitter=jitter)
