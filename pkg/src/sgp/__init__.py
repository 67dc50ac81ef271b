"""Sparse GP regression and Bayesian GP-LVM with a data-parallel bound engine."""

from .bound import BoundBreakdown, bound_gplvm, bound_regression
from .kernels import KernelSpec
from .model import BayesianGPLVM, FitNumericError, FitTrace, NotFittedError, SparseGPRegression, init_gplvm
from .optimizer import LBFGS, ModelParams, grad_check, minimize, pack, unpack
from .parallel import Cluster, make_partition
from .psi_stats import SufficientStats, TileConfig, VariationalPosterior, stats_deterministic, stats_expected

__version__ = "0.1.0"

__all__ = [
    "BayesianGPLVM",
    "BoundBreakdown",
    "Cluster",
    "FitNumericError",
    "FitTrace",
    "KernelSpec",
    "LBFGS",
    "ModelParams",
    "NotFittedError",
    "SparseGPRegression",
    "SufficientStats",
    "TileConfig",
    "VariationalPosterior",
    "bound_gplvm",
    "bound_regression",
    "grad_check",
    "init_gplvm",
    "make_partition",
    "minimize",
    "pack",
    "stats_deterministic",
    "stats_expected",
    "unpack",
]
