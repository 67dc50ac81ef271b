"""Parameter packing, an L-BFGS driver and a finite-difference gradient checker."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import line_search

from .kernels import KernelSpec

logger = logging.getLogger(__name__)

SEGMENTS = ("log_beta", "log_variance", "log_lengthscales", "Z", "mu", "log_s")


@dataclass
class ModelParams:
    """Constrained model parameters. ``mu``/``s`` are None for regression."""

    beta: float
    theta: KernelSpec
    Z: np.ndarray
    mu: np.ndarray | None = None
    s: np.ndarray | None = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.beta,
            self.theta.copy(),
            self.Z.copy(),
            None if self.mu is None else self.mu.copy(),
            None if self.s is None else self.s.copy(),
        )


@dataclass
class RawGradients:
    """d(bound)/d(constrained parameter), same shapes as ModelParams."""

    beta: float
    variance: float
    lengthscales: np.ndarray
    Z: np.ndarray
    mu: np.ndarray | None = None
    s: np.ndarray | None = None


@dataclass(frozen=True)
class Layout:
    M: int
    Q: int
    N: int = 0  # latent rows; 0 when there are no local parameters

    def shapes(self):
        shapes = {
            "log_beta": (1,),
            "log_variance": (1,),
            "log_lengthscales": (self.Q,),
            "Z": (self.M, self.Q),
        }
        if self.N:
            shapes["mu"] = (self.N, self.Q)
            shapes["log_s"] = (self.N, self.Q)
        return shapes

    def slices(self):
        out = {}
        start = 0
        for name, shape in self.shapes().items():
            size = int(np.prod(shape))
            out[name] = slice(start, start + size)
            start += size
        return out

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())

    @property
    def segments(self):
        return tuple(self.shapes())


@dataclass
class ParameterVector:
    values: np.ndarray
    layout: Layout

    def segment(self, name):
        return self.values[self.layout.slices()[name]].reshape(self.layout.shapes()[name])


def layout_of(p: ModelParams) -> Layout:
    N = 0 if p.mu is None else p.mu.shape[0]
    return Layout(M=p.Z.shape[0], Q=p.Z.shape[1], N=N)


def pack(p: ModelParams) -> ParameterVector:
    if not p.beta > 0:
        raise ValueError("beta must be positive")
    if p.s is not None and not np.all(p.s > 0):
        raise ValueError("variational variances must be positive")
    layout = layout_of(p)
    parts = [np.log([p.beta]), np.log([p.theta.variance]), np.log(p.theta.lengthscales), p.Z.ravel()]
    if layout.N:
        parts += [p.mu.ravel(), np.log(p.s).ravel()]
    return ParameterVector(np.concatenate(parts).astype(float), layout)


def unpack(v: ParameterVector) -> ModelParams:
    seg = v.segment
    layout = v.layout
    p = ModelParams(
        beta=float(np.exp(seg("log_beta")[0])),
        theta=KernelSpec(float(np.exp(seg("log_variance")[0])), np.exp(seg("log_lengthscales"))),
        Z=seg("Z").copy(),
    )
    if layout.N:
        p.mu = seg("mu").copy()
        p.s = np.exp(seg("log_s"))
    return p


def pack_gradient(p: ModelParams, g: RawGradients) -> np.ndarray:
    """Chain raw gradients through the log transforms: d/dlog(x) = x * d/dx."""
    parts = [
        np.array([p.beta * g.beta]),
        np.array([p.theta.variance * g.variance]),
        p.theta.lengthscales * g.lengthscales,
        np.asarray(g.Z).ravel(),
    ]
    if p.mu is not None:
        parts += [np.asarray(g.mu).ravel(), (p.s * g.s).ravel()]
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# L-BFGS
# ---------------------------------------------------------------------------


@dataclass
class IterationRecord:
    iteration: int
    value: float
    grad_norm: float
    elapsed: float
    n_evals: int


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    trace: list
    status: str
    message: str
    n_evals: int


class _CachedObjective:
    def __init__(self, fun, max_evals=None):
        self.fun = fun
        self.max_evals = max_evals
        self.n_evals = 0
        self._key = None
        self._val = None

    def __call__(self, x):
        key = x.tobytes()
        if key != self._key:
            if self.max_evals is not None and self.n_evals >= self.max_evals:
                raise _EvalBudget()
            f, g = self.fun(x)
            self.n_evals += 1
            if not np.isfinite(f):
                g = np.zeros_like(x)
            self._key, self._val = key, (float(f), np.asarray(g, dtype=float))
        return self._val

    def value(self, x):
        return self(x)[0]

    def grad(self, x):
        return self(x)[1]


class _EvalBudget(Exception):
    pass


class LBFGS:
    """Limited-memory BFGS with a strong-Wolfe line search.

    ``fun(x) -> (value, gradient)`` is minimized. Each call to :meth:`step`
    performs one accepted iteration (one line search).
    """

    def __init__(self, fun, x0, memory=10, c1=1e-4, c2=0.9, gtol=1e-5, ftol=1e-9, max_evals=None):
        self.obj = _CachedObjective(fun, max_evals)
        self.memory = memory
        self.c1, self.c2 = c1, c2
        self.gtol, self.ftol = gtol, ftol
        self.x = np.array(x0, dtype=float)
        self.f, self.g = self.obj(self.x)
        if not np.isfinite(self.f):
            raise FloatingPointError("objective is not finite at the starting point")
        self.f_prev = None
        self.s_hist = []
        self.y_hist = []
        self.iteration = 0
        self.status = None
        self.message = ""

    @property
    def grad_norm(self):
        return float(np.max(np.abs(self.g))) if self.g.size else 0.0

    def _direction(self):
        q = -self.g.copy()
        alphas = []
        for s, y in zip(reversed(self.s_hist), reversed(self.y_hist)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            q -= a * y
            alphas.append((rho, a))
        if self.s_hist:
            s, y = self.s_hist[-1], self.y_hist[-1]
            q *= (s @ y) / (y @ y)
        for (s, y), (rho, a) in zip(zip(self.s_hist, self.y_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return q

    def _wolfe(self, p, f_prev):
        old_old = f_prev if f_prev is not None else self.f + np.linalg.norm(self.g) / 2
        with warnings.catch_warnings():
            # a failed search is handled below; its RuntimeWarning subclass is noise here
            warnings.simplefilter("ignore", RuntimeWarning)
            alpha, _, _, f_new, _, _ = line_search(
                self.obj.value, self.obj.grad, self.x, p, self.g, self.f, old_old,
                c1=self.c1, c2=self.c2, maxiter=20,
            )
        if alpha is None or not np.isfinite(f_new) or f_new >= self.f:
            return None
        return alpha

    def _backtrack(self, p, shrink=0.5, tries=30):
        """Armijo backtracking, used when the Wolfe search gives up (noisy objective)."""
        slope = p @ self.g
        alpha = min(1.0, 1.0 / max(np.max(np.abs(p)), 1e-300))
        for _ in range(tries):
            f = self.obj.value(self.x + alpha * p)
            if np.isfinite(f) and f < self.f and f <= self.f + self.c1 * alpha * slope:
                return alpha
            alpha *= shrink
        return None

    def converged(self):
        if self.grad_norm < self.gtol:
            self.status, self.message = "converged", "gradient norm below tolerance"
            return True
        return False

    def step(self):
        """Take one iteration; returns an IterationRecord, or None when stopped."""
        if self.status is not None or self.converged():
            return None
        t0 = time.perf_counter()
        evals0 = self.obj.n_evals
        p = self._direction()
        if p @ self.g >= 0:
            self.s_hist.clear()
            self.y_hist.clear()
            p = -self.g
        try:
            alpha = self._wolfe(p, self.f_prev)
            if alpha is None and self.s_hist:
                # curvature pairs may be stale; restart from steepest descent
                self.s_hist.clear()
                self.y_hist.clear()
                p = -self.g
                alpha = self._wolfe(p, None)
            if alpha is None:
                alpha = self._backtrack(p)
        except _EvalBudget:
            self.status, self.message = "budget", "evaluation budget exhausted"
            return None
        if alpha is None:
            self.status, self.message = "line_search_failed", "no step along the search direction decreases the objective"
            logger.warning("L-BFGS: %s at iteration %d", self.message, self.iteration)
            return None
        x_new = self.x + alpha * p
        # re-read through the cache so value and gradient belong to x_new exactly
        f_new, g_new = self.obj(x_new)
        s, y = x_new - self.x, g_new - self.g
        if s @ y > 1e-10 * (y @ y):
            self.s_hist.append(s)
            self.y_hist.append(y)
            if len(self.s_hist) > self.memory:
                self.s_hist.pop(0)
                self.y_hist.pop(0)
        self.f_prev, self.f = self.f, float(f_new)
        self.x, self.g = x_new, np.asarray(g_new, dtype=float)
        self.iteration += 1
        rec = IterationRecord(self.iteration, self.f, self.grad_norm, time.perf_counter() - t0,
                              self.obj.n_evals - evals0)
        if abs(self.f_prev - self.f) <= self.ftol * max(abs(self.f_prev), abs(self.f), 1.0):
            self.status, self.message = "converged", "relative objective change below tolerance"
        return rec


def minimize(fun, x0, max_iters=1000, gtol=1e-5, ftol=1e-9, memory=10, max_evals=None,
             callback=None) -> OptimizeResult:
    """Minimize ``fun(x) -> (value, gradient)`` with L-BFGS.

    The trace starts with the initial point (iteration 0). A line-search failure
    stops the run and returns the best iterate with status ``line_search_failed``.
    """
    t0 = time.perf_counter()
    opt = LBFGS(fun, x0, memory=memory, gtol=gtol, ftol=ftol, max_evals=max_evals)
    trace = [IterationRecord(0, opt.f, opt.grad_norm, time.perf_counter() - t0, opt.obj.n_evals)]
    while opt.iteration < max_iters:
        rec = opt.step()
        if rec is None:
            break
        trace.append(rec)
        if callback is not None:
            callback(opt, rec)
        if opt.status is not None:
            break
    if opt.status is None:
        if opt.converged():
            pass
        else:
            opt.status, opt.message = "max_iters", "iteration limit reached"
    return OptimizeResult(opt.x, opt.f, opt.g, trace, opt.status, opt.message, opt.obj.n_evals)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float
    checked: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def lines(self):
        for name, err in self.errors.items():
            flag = "ok" if err < self.tolerance else "FAIL"
            yield f"{name:18s} {err:.3e}  ({self.checked[name]} coords)  {flag}"


def grad_check(fun, v: ParameterVector, step=1e-5, segments=None, max_coords=50, seed=0,
               tolerance=1e-5) -> GradCheckReport:
    """Compare the analytic gradient of ``fun`` with central differences.

    The error of a segment is max|analytic - numeric| over the checked
    coordinates divided by the larger of the two max-abs gradients there.
    Segments longer than ``max_coords`` are checked on a random subsample.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(seed)
    x0 = np.array(v.values, dtype=float)
    _, g0 = fun(x0)
    errors, checked = {}, {}
    for name, sl in v.layout.slices().items():
        if segments is not None and name not in segments:
            continue
        idx = np.arange(sl.start, sl.stop)
        if idx.size > max_coords:
            idx = np.sort(rng.choice(idx, max_coords, replace=False))
        num = np.empty(idx.size)
        for k, i in enumerate(idx):
            xp = x0.copy()
            xp[i] += step
            xm = x0.copy()
            xm[i] -= step
            num[k] = (fun(xp)[0] - fun(xm)[0]) / (2 * step)
        ana = g0[idx]
        scale = max(np.max(np.abs(ana)), np.max(np.abs(num)), 1e-300)
        errors[name] = float(np.max(np.abs(ana - num)) / scale)
        checked[name] = int(idx.size)
    return GradCheckReport(errors, tolerance, checked)
