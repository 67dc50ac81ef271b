import numpy as np
import pytest

from sgp.kernels import KernelSpec
from sgp.optimizer import LBFGS, ModelParams, ParameterVector, pack, pack_gradient, unpack
from sgp.parallel import (
    AdjointMessage,
    Cluster,
    ParamMessage,
    RoundTiming,
    ShardError,
    Worker,
    make_partition,
    reduce_reports,
    sync_step,
    timing_split,
    worker_pass,
)
from sgp.psi_stats import TileConfig, VariationalPosterior, stats_expected

from conftest import random_theta, rel_err


def _gplvm_params(rng, N, M, Q):
    return ModelParams(rng.uniform(0.5, 2), random_theta(rng, Q), rng.uniform(-2, 2, (M, Q)),
                       rng.uniform(-2, 2, (N, Q)), rng.uniform(0.5, 2, (N, Q)))


def _grads_vec(p, ev):
    return pack_gradient(p, ev.grads)


def test_partition_examples():
    assert make_partition(10, 1).shards == ((0, 10),)
    assert make_partition(10, 3).shards == ((0, 4), (4, 7), (7, 10))
    p = make_partition(64000, 32)
    assert len(p.shards) == 32 and all(b - a == 2000 for a, b in p.shards)
    for bad in (0, 11):
        with pytest.raises(ValueError):
            make_partition(10, bad)


@pytest.mark.parametrize("N,P", [(7, 7), (100, 3), (1001, 8), (5, 2)])
def test_partition_covers(N, P):
    shards = make_partition(N, P).shards
    assert shards[0][0] == 0 and shards[-1][1] == N
    assert all(a[1] == b[0] for a, b in zip(shards, shards[1:]))
    sizes = [b - a for a, b in shards]
    assert max(sizes) - min(sizes) <= 1


def _worker_setup(rng, N=40, M=5, Q=2, D=3):
    Y = rng.standard_normal((N, D))
    p = _gplvm_params(rng, N, M, Q)
    return Y, p


def test_forward_only_pass(rng):
    Y, p = _worker_setup(rng)
    w = Worker(0, (0, 40), Y)
    r = worker_pass(w, ParamMessage(p.theta, p.Z, p.beta, p.mu, p.s))
    assert r.local_grads is None and r.global_grad_partials is None
    assert r.stats.n_count == 40


def test_full_shard_equals_direct(rng):
    Y, p = _worker_setup(rng)
    r = worker_pass(Worker(0, (0, 40), Y), ParamMessage(p.theta, p.Z, p.beta, p.mu, p.s))
    direct = stats_expected(VariationalPosterior(p.mu, p.s), Y, p.Z, p.theta)
    for a, b in zip(r.stats.fields().values(), direct.fields().values()):
        assert np.max(np.abs(np.asarray(a) - np.asarray(b))) <= 1e-15 * max(1.0, np.max(np.abs(b)))


def _reports(Y, p, P, adjoints=None):
    part = make_partition(Y.shape[0], P)
    out = []
    for i, (a, b) in enumerate(part.shards):
        msg = ParamMessage(p.theta, p.Z, p.beta, p.mu[a:b], p.s[a:b])
        out.append(worker_pass(Worker(i, (a, b), Y[a:b]), msg, adjoints))
    return part, out


def test_reduce_cross_partition(rng):
    Y, p = _worker_setup(rng)
    ref = reduce_reports(_reports(Y, p, 1)[1]).stats
    for P in (2, 4):
        part, reps = _reports(Y, p, P)
        red = reduce_reports(reps, part)
        for a, b in zip(red.stats.fields().values(), ref.fields().values()):
            assert rel_err(a, b) < 1e-12


def test_reduce_single_is_identity(rng):
    Y, p = _worker_setup(rng)
    _, reps = _reports(Y, p, 1)
    red = reduce_reports(reps)
    assert red.stats is reps[0].stats


def test_reduce_permutation_and_errors(rng):
    Y, p = _worker_setup(rng)
    G = np.eye(5)
    adj = AdjointMessage(-1.0, np.ones((5, 3)), G)
    part, reps = _reports(Y, p, 4, adj)
    a = reduce_reports(reps, part)
    b = reduce_reports(list(reversed(reps)), part)
    for x, y in zip(a.stats.fields().values(), b.stats.fields().values()):
        np.testing.assert_array_equal(x, y)
    for k in a.global_grads:
        np.testing.assert_array_equal(a.global_grads[k], b.global_grads[k])
    with pytest.raises(ValueError):
        reduce_reports(reps[:3], part)
    with pytest.raises(ValueError):
        reduce_reports(reps + [reps[0]], part)


def test_worker_errors_tagged(rng):
    Y, p = _worker_setup(rng)
    w = Worker(3, (0, 40), Y)
    with pytest.raises(ShardError):
        w.run()
    w.receive(ParamMessage(p.theta, p.Z[:, :1], p.beta, p.mu, p.s))
    with pytest.raises(ShardError, match="shard 3"):
        w.run()


def test_no_cross_shard_reads(rng):
    """A worker's report depends only on its own rows and the broadcast."""
    N = 30
    Y, p = _worker_setup(rng, N=N)
    part = make_partition(N, 3)
    a, b = part.shards[1]
    adj = AdjointMessage(-0.7, rng.standard_normal((5, 3)), np.eye(5))
    Y2 = Y.copy()
    mu2, s2 = p.mu.copy(), p.s.copy()
    outside = np.r_[0:a, b:N]
    Y2[outside] = rng.permutation(Y2[outside]) + 5.0
    mu2[outside] = -mu2[outside]
    c1 = Cluster(Y, workers=3)
    c2 = Cluster(Y2, workers=3)
    p2 = ModelParams(p.beta, p.theta, p.Z, mu2, s2)
    for c, pp in ((c1, p), (c2, p2)):
        c.broadcast(pp)
        c.workers[1].receive(adj)
    r1, r2 = c1.workers[1].run(), c2.workers[1].run()
    for x, y in zip(r1.stats.fields().values(), r2.stats.fields().values()):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(r1.local_grads["d_mu"], r2.local_grads["d_mu"])
    np.testing.assert_array_equal(r1.global_grad_partials["d_Z"], r2.global_grad_partials["d_Z"])
    c1.close()
    c2.close()


@pytest.mark.parametrize("latent", [True, False])
def test_partition_and_tile_invariance(latent):
    rng = np.random.default_rng(7)
    N, M, Q, D = 300, 8, 2, 3
    Y = rng.standard_normal((N, D))
    p = _gplvm_params(rng, N, M, Q)
    X = None
    if not latent:
        X, p.mu, p.s = p.mu, None, None
    ref_b, ref_g = None, None
    for P in (1, 2, 4, 8):
        for tiles in (TileConfig(1, 1), TileConfig(7, 7), TileConfig(64, 64)):
            with Cluster(Y, X, workers=P, tiles=tiles) as c:
                ev = c.evaluate(p)
            g = _grads_vec(p, ev)
            if ref_b is None:
                ref_b, ref_g = ev.bound.total, g
            assert rel_err(ev.bound.total, ref_b) < 1e-10
            assert rel_err(g, ref_g) < 1e-10


def test_bit_identical_runs(rng):
    Y, p = _worker_setup(rng, N=100)
    out = []
    for _ in range(2):
        with Cluster(Y, workers=4, tiles=TileConfig(3, 5)) as c:
            ev = c.evaluate(p)
        out.append((ev.bound.total, _grads_vec(p, ev)))
    assert out[0][0] == out[1][0]
    np.testing.assert_array_equal(out[0][1], out[1][1])


def test_cluster_rejects_wrong_model_type(rng):
    Y, p = _worker_setup(rng)
    with Cluster(Y, X=rng.standard_normal((40, 2)), workers=2) as c:
        with pytest.raises(ValueError):
            c.evaluate(p)


def _objective(cluster, layout):
    def fun(x):
        q = unpack(ParameterVector(x, layout))
        ev = cluster.evaluate(q)
        return -ev.bound.total, -pack_gradient(q, ev.grads)
    return fun


def test_sync_step_broadcasts(rng):
    Y, p = _worker_setup(rng, N=30)
    v = pack(p)
    with Cluster(Y, workers=3) as c:
        opt = LBFGS(_objective(c, v.layout), v.values)
        before = c.transport.broadcasts
        rec = sync_step(c, opt, lambda x: unpack(ParameterVector(x, v.layout)))
        assert rec is not None and rec.iteration == 1
        assert c.transport.broadcasts > before
        # the final broadcast carries the accepted iterate to every worker
        for w, (a, b) in zip(c.workers, c.partition.shards):
            np.testing.assert_array_equal(w.params.mu, unpack(ParameterVector(opt.x, v.layout)).mu[a:b])


def test_sync_step_zero_gradient_fixed_point():
    class Stationary:
        x = np.array([1.0, 2.0])
        iteration = 0

        def step(self):
            return None

    class Recorder:
        def __init__(self):
            self.sent = []

        def broadcast(self, params):
            self.sent.append(params)

    c = Recorder()
    opt = Stationary()
    assert sync_step(c, opt, lambda x: x.copy()) is None
    np.testing.assert_array_equal(c.sent[0], [1.0, 2.0])
    # the real optimizer also stops at once when the gradient vanishes
    lb = LBFGS(lambda x: (0.0, np.zeros_like(x)), np.array([3.0]))
    assert lb.step() is None and lb.status == "converged"
    np.testing.assert_array_equal(lb.x, [3.0])


def _trajectory(Y, p, P, tiles=TileConfig(), steps=10):
    v = pack(p)
    with Cluster(Y, workers=P, tiles=tiles) as c:
        opt = LBFGS(_objective(c, v.layout), v.values)
        xs = []
        for _ in range(steps):
            if sync_step(c, opt, lambda x: unpack(ParameterVector(x, v.layout))) is None:
                break
            xs.append(opt.x.copy())
    return np.array(xs)


def test_trajectory_agreement():
    rng = np.random.default_rng(1)
    Y, p = _worker_setup(rng, N=120, M=6)
    ref = _trajectory(Y, p, 1)
    assert ref.shape[0] == 10
    for P in (2, 4):
        got = _trajectory(Y, p, P)
        assert got.shape == ref.shape
        assert rel_err(got, ref) < 1e-8


def test_trajectory_agreement_seeded_model():
    from sgp.data import GeneratorSettings, generate
    from sgp.model import init_gplvm

    _, Y = generate(GeneratorSettings(200, seed=1))
    p = init_gplvm(Y, 1, 10, seed=1).get_params()
    ref = _trajectory(Y, p, 1)
    for P, tiles in ((2, TileConfig(3, 7)), (4, TileConfig(1, 1))):
        np.testing.assert_array_equal(_trajectory(Y, p, P, tiles), ref)


def test_timing_split():
    assert timing_split([RoundTiming(1.0, 0.0, 1.0)])["indistributable_fraction"] == 0.0
    t = timing_split([RoundTiming(2.0, 0.5, 1.5), RoundTiming(1.0, 0.1, 0.9)])
    assert abs(t["distributable_fraction"] + t["indistributable_fraction"] - 1.0) < 1e-9
    assert t["indistributable_fraction"] == pytest.approx(0.2)
    rng = np.random.default_rng(0)
    Y, p = _worker_setup(rng)
    with Cluster(Y, workers=2) as c:
        c.evaluate(p)
        c.evaluate(p, with_grad=False)
        assert len(c.rounds) == 2
        assert all(0 <= r.indistributable_fraction <= 1 for r in c.rounds)
