"""Two-level data-parallel evaluation of the bound and its gradients.

Datapoints are split into contiguous shards, one per worker. Each evaluation
is a collect/broadcast round:

1. the coordinator broadcasts global parameters (theta, beta, Z) and each
   worker's slice of the local parameters (mu, S);
2. every worker returns its partial statistics (and KL) for its shard;
3. the coordinator reduces the partials in ascending shard order, factorizes
   the M x M matrices and computes the bound and its adjoints;
4. the adjoints are broadcast, workers return per-datapoint gradients and
   partial global gradients, which the coordinator sums and assembles.

Within a worker the statistics are computed by the tiled loops in
``_tiles`` under a :class:`TileConfig`.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bound import BoundBreakdown, Factors, bound_adjoints, bound_gplvm, bound_regression, \
    kl_gaussian_grads
from .kernels import KernelSpec, gram_grads, stable_gram
from .optimizer import ModelParams, RawGradients
from . import _tiles
from .psi_stats import (DEFAULT_TILES, SufficientStats, TileConfig, VariationalPosterior, dd_add,
                        stats_deterministic, stats_expected, stats_grads, stats_grads_deterministic)

__all__ = [
    "Partition", "TileConfig", "WorkerReport", "Worker", "ThreadTransport", "Cluster",
    "make_partition", "worker_pass", "reduce_reports", "sync_step", "timing_split",
]


@dataclass(frozen=True)
class Partition:
    worker_count: int
    shards: tuple

    @property
    def num_data(self) -> int:
        return self.shards[-1][1]


def make_partition(N: int, P: int) -> Partition:
    """Balanced contiguous split of range(N); the first N % P shards get one extra row."""
    if P < 1 or P > N:
        raise ValueError(f"need 1 <= workers <= N, got workers={P}, N={N}")
    base, extra = divmod(N, P)
    shards = []
    start = 0
    for i in range(P):
        stop = start + base + (1 if i < extra else 0)
        shards.append((start, stop))
        start = stop
    return Partition(P, tuple(shards))


@dataclass(frozen=True)
class ParamMessage:
    theta: KernelSpec
    Z: np.ndarray
    beta: float
    mu: np.ndarray | None = None
    s: np.ndarray | None = None
    tiles: TileConfig = DEFAULT_TILES


@dataclass(frozen=True)
class AdjointMessage:
    d_phi: float
    d_psi_y: np.ndarray
    d_phi_big: np.ndarray


@dataclass
class WorkerReport:
    shard_index: int
    shard: tuple
    stats: SufficientStats
    local_grads: dict | None = None
    global_grad_partials: dict | None = None
    kl_partial: float = 0.0
    # low-order words of the shard sums, consumed by reduce_reports
    kl_residual: float = 0.0
    grad_residuals: dict | None = None
    elapsed_distributable: float = 0.0
    elapsed_total: float = 0.0


class ShardError(RuntimeError):
    pass


class Worker:
    """Owns one shard of the data; computes only from its rows and broadcasts."""

    def __init__(self, index: int, shard: tuple, Y: np.ndarray, X: np.ndarray | None = None):
        self.index = index
        self.shard = tuple(shard)
        self.Y = np.array(Y, dtype=float)
        self.X = None if X is None else np.array(X, dtype=float)
        self.params: ParamMessage | None = None
        self.adjoints: AdjointMessage | None = None
        self._stats = None
        self.received = 0

    def receive(self, message):
        self.received += 1
        if isinstance(message, ParamMessage):
            self.params = message
            self.adjoints = None
            self._stats = None
        elif isinstance(message, AdjointMessage):
            self.adjoints = message
        else:
            raise TypeError(f"unexpected message {type(message).__name__}")

    @property
    def latent(self) -> bool:
        return self.X is None

    def run(self) -> WorkerReport:
        if self.params is None:
            raise ShardError(f"worker {self.index} has no parameters")
        t0 = time.perf_counter()
        p = self.params
        try:
            report = self._compute(p)
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as err:
            raise ShardError(f"shard {self.index} {self.shard}: {err}") from err
        elapsed = time.perf_counter() - t0
        report.elapsed_distributable = elapsed
        report.elapsed_total = elapsed
        return report

    def _compute(self, p: ParamMessage) -> WorkerReport:
        q = VariationalPosterior(p.mu, p.s) if self.latent else None
        if self._stats is None:
            if self.latent:
                self._stats = stats_expected(q, self.Y, p.Z, p.theta, p.tiles)
            else:
                self._stats = stats_deterministic(self.X, self.Y, p.Z, p.theta, p.tiles)
        kl, kl_lo = 0.0, 0.0
        if self.latent:
            rows = 0.5 * np.sum(q.s + q.mu**2 - np.log(q.s) - 1.0, axis=1)
            kl, kl_lo = _tiles.dd_sum_rows(rows)
        report = WorkerReport(self.index, self.shard, self._stats, kl_partial=kl, kl_residual=kl_lo)
        a = self.adjoints
        if a is None:
            return report
        if self.latent:
            g = stats_grads(q, self.Y, p.Z, p.theta, a.d_phi, a.d_psi_y, a.d_phi_big, p.tiles)
            kl_mu, kl_s = kl_gaussian_grads(q)
            report.local_grads = {"d_mu": g.d_mu - kl_mu, "d_s": g.d_s - kl_s}
        else:
            g = stats_grads_deterministic(self.X, self.Y, p.Z, p.theta, a.d_phi, a.d_psi_y, a.d_phi_big,
                                          p.tiles)
            report.local_grads = None
        report.global_grad_partials = g.global_parts()
        report.grad_residuals = g.residual
        return report


def worker_pass(worker: Worker, params: ParamMessage, adjoints: AdjointMessage | None = None) -> WorkerReport:
    worker.receive(params)
    if adjoints is not None:
        worker.receive(adjoints)
    return worker.run()


class ThreadTransport:
    """In-process transport: messages are handed to workers, passes run on a thread pool.

    The tiled kernels release the GIL, so workers run concurrently on
    multi-core hosts.
    """

    def __init__(self, workers: list, max_threads: int | None = None):
        self.workers = workers
        self._pool = ThreadPoolExecutor(max_workers=max_threads or len(workers))
        self.broadcasts = 0

    def broadcast(self, messages: list):
        if len(messages) != len(self.workers):
            raise ValueError("one message per worker required")
        for w, m in zip(self.workers, messages):
            w.receive(m)
        self.broadcasts += 1

    def gather(self) -> list:
        return list(self._pool.map(lambda w: w.run(), self.workers))

    def close(self):
        self._pool.shutdown(wait=True)


@dataclass
class Reduced:
    stats: SufficientStats
    global_grads: dict | None
    kl: float
    local_grads: list = field(default_factory=list)


def reduce_reports(reports: list, partition: Partition | None = None) -> Reduced:
    """Sum partial statistics and global gradients in ascending shard order."""
    reports = sorted(reports, key=lambda r: r.shard_index)
    indices = [r.shard_index for r in reports]
    if len(set(indices)) != len(indices):
        raise ValueError("duplicate shard report")
    if partition is not None:
        if indices != list(range(partition.worker_count)):
            raise ValueError(f"missing shard reports: got {indices}")
        for r in reports:
            if tuple(r.shard) != partition.shards[r.shard_index]:
                raise ValueError(f"report {r.shard_index} covers {r.shard}, expected "
                                 f"{partition.shards[r.shard_index]}")
    stats = reports[0].stats
    kl, kl_lo = reports[0].kl_partial, reports[0].kl_residual
    for r in reports[1:]:
        stats = stats + r.stats
        kl, kl_lo = dd_add(kl, kl_lo, r.kl_partial, r.kl_residual)
    grads = None
    if all(r.global_grad_partials is not None for r in reports):
        grads, lows = {}, {}
        for r in reports:
            res = r.grad_residuals or {}
            for k, v in r.global_grad_partials.items():
                lo = res.get(k, np.zeros_like(v) if isinstance(v, np.ndarray) else 0.0)
                if k not in grads:
                    grads[k], lows[k] = v, lo
                else:
                    grads[k], lows[k] = dd_add(grads[k], lows[k], v, lo)
    return Reduced(stats, grads, float(kl), [r.local_grads for r in reports])


@dataclass
class RoundTiming:
    wall: float
    coordinator: float
    workers: float

    @property
    def indistributable_fraction(self) -> float:
        return min(1.0, self.coordinator / self.wall) if self.wall > 0 else 0.0


@dataclass
class Evaluation:
    bound: BoundBreakdown
    grads: RawGradients | None
    timing: RoundTiming
    stats: SufficientStats
    factors: Factors
    Kmm: np.ndarray


class Cluster:
    """Coordinator plus its workers for one dataset.

    For the GP-LVM pass ``X=None``; for regression pass the fixed inputs.
    ``jitter`` is the starting relative Kmm jitter (None: default policy).
    """

    def __init__(self, Y, X=None, workers: int = 1, tiles: TileConfig = DEFAULT_TILES,
                 jitter: float | None = None, max_threads: int | None = None):
        self.Y = np.asarray(Y, dtype=float)
        self.X = None if X is None else np.asarray(X, dtype=float)
        self.N, self.D = self.Y.shape
        self.partition = make_partition(self.N, workers)
        self.tiles = tiles
        self.jitter = jitter
        self.workers = [
            Worker(i, (a, b), self.Y[a:b], None if self.X is None else self.X[a:b])
            for i, (a, b) in enumerate(self.partition.shards)
        ]
        self.transport = ThreadTransport(self.workers, max_threads)
        self.rounds: list[RoundTiming] = []

    def close(self):
        self.transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def param_messages(self, params: ModelParams) -> list:
        msgs = []
        for a, b in self.partition.shards:
            if params.mu is None:
                msgs.append(ParamMessage(params.theta, params.Z, params.beta, tiles=self.tiles))
            else:
                msgs.append(ParamMessage(params.theta, params.Z, params.beta,
                                         params.mu[a:b], params.s[a:b], self.tiles))
        return msgs

    def broadcast(self, params: ModelParams):
        self.transport.broadcast(self.param_messages(params))

    def evaluate(self, params: ModelParams, with_grad: bool = True) -> Evaluation:
        latent = params.mu is not None
        if latent != (self.X is None):
            raise ValueError("parameters do not match the model type of this cluster")
        t0 = time.perf_counter()
        self.broadcast(params)
        reports = self.transport.gather()
        worker_time = max(r.elapsed_distributable for r in reports)
        red = reduce_reports(reports, self.partition)

        tc = time.perf_counter()
        Kmm, _, rel = stable_gram(params.Z, params.theta, self.jitter)
        factors = Factors.compute(red.stats, Kmm, params.beta)
        if latent:
            bound = bound_gplvm(red.stats, Kmm, params.beta, None, self.N, self.D, kl=red.kl, factors=factors)
        else:
            bound = bound_regression(red.stats, Kmm, params.beta, self.N, self.D, factors=factors)
        coord = time.perf_counter() - tc

        grads = None
        if with_grad:
            tc = time.perf_counter()
            adj = bound_adjoints(red.stats, Kmm, params.beta, self.N, self.D, factors=factors)
            coord += time.perf_counter() - tc
            self.transport.broadcast([AdjointMessage(adj["d_phi"], adj["d_psi_y"], adj["d_phi_big"])] *
                                     len(self.workers))
            reports = self.transport.gather()
            worker_time += max(r.elapsed_distributable for r in reports)
            red_g = reduce_reports(reports, self.partition)
            tc = time.perf_counter()
            gk = gram_grads(params.Z, params.theta, adj["d_Kmm"], rel)
            g = red_g.global_grads
            grads = RawGradients(
                beta=adj["d_beta"],
                variance=g["d_variance"] + gk["variance"],
                lengthscales=g["d_lengthscales"] + gk["lengthscales"],
                Z=g["d_Z"] + gk["Z"],
            )
            if latent:
                grads.mu = np.concatenate([lg["d_mu"] for lg in red_g.local_grads])
                grads.s = np.concatenate([lg["d_s"] for lg in red_g.local_grads])
            coord += time.perf_counter() - tc
        timing = RoundTiming(time.perf_counter() - t0, coord, worker_time)
        self.rounds.append(timing)
        return Evaluation(bound, grads, timing, red.stats, factors, Kmm)


def sync_step(cluster: Cluster, optimizer, to_params) -> object:
    """One optimizer iteration on the coordinator, then broadcast of the result.

    ``optimizer`` is an :class:`~sgp.optimizer.LBFGS` whose objective runs
    collect/broadcast rounds on ``cluster``; ``to_params`` maps its current
    vector back to ModelParams. Returns the iteration record (None if stopped).
    """
    rec = optimizer.step()
    cluster.broadcast(to_params(optimizer.x))
    return rec


def timing_split(rounds: list) -> dict:
    """Fraction of wall time spent in coordinator-only M-sized algebra."""
    wall = sum(r.wall for r in rounds)
    coord = sum(r.coordinator for r in rounds)
    indist = min(1.0, coord / wall) if wall > 0 else 0.0
    return {"distributable_fraction": 1.0 - indist, "indistributable_fraction": indist}
