import numpy as np
import pytest

from sgp.bound import (
    BoundBreakdown,
    bound_adjoints,
    bound_gplvm,
    bound_per_dimension,
    bound_regression,
    kl_gaussian,
    kl_gaussian_grads,
)
from sgp.kernels import KernelSpec, kern_cross, kern_gram, stable_gram
from sgp.oracles import dense_log_marginal, kl_quadrature
from sgp.psi_stats import SufficientStats, VariationalPosterior, stats_deterministic, stats_expected

from conftest import central_diff, random_theta, rel_err


def _regression(rng, N, M, Q, D, Z=None, theta=None):
    X = rng.uniform(-2, 2, (N, Q))
    Y = rng.standard_normal((N, D))
    Z = rng.uniform(-2, 2, (M, Q)) if Z is None else Z
    theta = theta or random_theta(rng, Q)
    return X, Y, Z, theta


def test_single_point_example():
    X = np.zeros((1, 1))
    th = KernelSpec(1.0, [1.0])
    st_ = stats_deterministic(X, np.ones((1, 1)), X, th)
    b = bound_regression(st_, kern_gram(X, th), 1.0, 1, 1)
    assert b.total == pytest.approx(-1.5155121234846454, abs=1e-14)
    assert b.total == pytest.approx(-0.5 * np.log(4 * np.pi) - 0.25, abs=1e-14)
    assert b.total == pytest.approx(dense_log_marginal(X, [[1.0]], th, 1.0), abs=1e-13)


def test_terms_sum_to_total(rng):
    X, Y, Z, th = _regression(rng, 30, 6, 2, 3)
    Kmm, _, _ = stable_gram(Z, th)
    b = bound_regression(stats_deterministic(X, Y, Z, th), Kmm, 1.7, 30, 3)
    assert isinstance(b, BoundBreakdown)
    assert abs(b.total - sum(b.terms())) < 1e-12 * max(1, abs(b.total))


@pytest.mark.parametrize("N", [10, 50, 200])
def test_dense_exactness(N):
    rng = np.random.default_rng(N)
    X = rng.uniform(0, 1, (N, 2)) * np.sqrt(N) * 0.7
    Y = rng.standard_normal((N, 2))
    th = KernelSpec(1.3, [0.8, 1.1])
    beta = 4.0
    st_ = stats_deterministic(X, Y, X, th)
    b = bound_regression(st_, kern_gram(X, th), beta, N, 2)
    dense = dense_log_marginal(X, Y, th, beta)
    assert abs(b.total - dense) / abs(dense) < 1e-8


def test_lower_bound(rng):
    for _ in range(20):
        N, M = rng.integers(5, 40), rng.integers(1, 8)
        X, Y, Z, th = _regression(rng, N, M, 2, 2)
        beta = rng.uniform(0.5, 20)
        Kmm, _, _ = stable_gram(Z, th)
        b = bound_regression(stats_deterministic(X, Y, Z, th), Kmm, beta, N, 2)
        assert b.total <= dense_log_marginal(X, Y, th, beta) + 1e-10


def test_per_dimension_consistency(rng):
    X, Y, Z, th = _regression(rng, 6, 3, 2, 2)
    Kmm = kern_gram(Z, th)
    st_ = stats_deterministic(X, Y, Z, th)
    Knm = kern_cross(X, Z, th)
    total = bound_regression(st_, Kmm, 2.3, 6, 2).total
    per = sum(bound_per_dimension(Y[:, d], Knm, Kmm, 2.3, st_.phi, st_.phi_big) for d in range(2))
    assert abs(per - total) < 1e-10
    st1 = stats_deterministic(X, Y[:, :1], Z, th)
    one = bound_per_dimension(Y[:, 0], Knm, Kmm, 2.3, st1.phi, st1.phi_big)
    assert abs(one - bound_regression(st1, Kmm, 2.3, 6, 1).total) < 1e-12


def test_per_dimension_zero_outputs(rng):
    X, _, Z, th = _regression(rng, 6, 3, 1, 1)
    Y0 = np.zeros((6, 1))
    st_ = stats_deterministic(X, Y0, Z, th)
    Kmm = kern_gram(Z, th)
    b = bound_regression(st_, Kmm, 1.5, 6, 1)
    assert b.data_fit_term == 0 and b.quadratic_term == 0
    f = bound_per_dimension(Y0[:, 0], kern_cross(X, Z, th), Kmm, 1.5, st_.phi, st_.phi_big)
    assert abs(f - b.total) < 1e-12


def test_kl_examples(rng):
    assert kl_gaussian(VariationalPosterior(np.zeros((4, 2)), np.ones((4, 2)))) == 0.0
    assert kl_gaussian(VariationalPosterior([[1.0]], [[1.0]])) == 0.5
    q = VariationalPosterior(rng.uniform(-2, 2, (3, 2)), rng.uniform(0.5, 2, (3, 2)))
    quad = sum(kl_quadrature(q.mu[n], q.s[n], 60) for n in range(3))
    assert rel_err(kl_gaussian(q), quad) < 1e-6
    assert kl_gaussian(q) >= 0
    with pytest.raises(ValueError):
        VariationalPosterior([[0.0]], [[0.0]])


def test_kl_grads(rng):
    q = VariationalPosterior(rng.uniform(-2, 2, (3, 2)), rng.uniform(0.5, 2, (3, 2)))
    g_mu, g_s = kl_gaussian_grads(q)
    assert rel_err(g_mu, central_diff(lambda a: kl_gaussian(VariationalPosterior(a, q.s)), q.mu)) < 1e-8
    assert rel_err(g_s, central_diff(lambda a: kl_gaussian(VariationalPosterior(q.mu, a)), q.s)) < 1e-8


def test_gplvm_delta_limit(rng):
    X, Y, Z, th = _regression(rng, 15, 5, 2, 3)
    Kmm, _, _ = stable_gram(Z, th)
    q = VariationalPosterior(X, np.full(X.shape, 1e-14))
    b = bound_gplvm(stats_expected(q, Y, Z, th), Kmm, 2.0, q, 15, 3)
    ref = bound_regression(stats_deterministic(X, Y, Z, th), Kmm, 2.0, 15, 3)
    assert rel_err(b.total - b.kl_term, ref.total) < 1e-8
    assert b.total <= b.total - b.kl_term
    assert b.kl_term == pytest.approx(-kl_gaussian(q))


def test_gplvm_s_derivative(rng):
    _, Y, Z, th = _regression(rng, 5, 3, 1, 2)
    Kmm, _, _ = stable_gram(Z, th)
    mu = rng.uniform(-2, 2, (5, 1))
    s = rng.uniform(0.5, 2, (5, 1))

    def total(s_):
        q = VariationalPosterior(mu, s_)
        return bound_gplvm(stats_expected(q, Y, Z, th), Kmm, 1.5, q, 5, 2).total

    from sgp.psi_stats import stats_grads
    q = VariationalPosterior(mu, s)
    st_ = stats_expected(q, Y, Z, th)
    adj = bound_adjoints(st_, Kmm, 1.5, 5, 2)
    g = stats_grads(q, Y, Z, th, adj["d_phi"], adj["d_psi_y"], adj["d_phi_big"])
    analytic = g.d_s - kl_gaussian_grads(q)[1]
    assert rel_err(analytic, central_diff(total, s)) < 1e-6


def _sym_fd(f, A, step=1e-5):
    """Directional derivatives along E_ij + E_ji (E_ii on the diagonal)."""
    out = np.empty_like(A)
    for i in range(A.shape[0]):
        for j in range(A.shape[1]):
            E = np.zeros_like(A)
            E[i, j] += step
            E[j, i] = step
            out[i, j] = (f(A + E) - f(A - E)) / (2 * step)
    return out


def _sym_analytic(G):
    out = G + G.T
    out[np.diag_indices_from(out)] = np.diag(G)
    return out


@pytest.mark.parametrize("seed", range(4))
def test_adjoints_finite_difference(seed):
    rng = np.random.default_rng(seed)
    N, M, D = 5, 3, 2
    X, Y, Z, th = _regression(rng, N, M, 2, D)
    st_ = stats_deterministic(X, Y, Z, th)
    Kmm, _, _ = stable_gram(Z, th)
    beta = rng.uniform(0.5, 2)
    adj = bound_adjoints(st_, Kmm, beta, N, D)

    def with_(**kw):
        s = SufficientStats(kw.get("phi", st_.phi), kw.get("psi_y", st_.psi_y), kw.get("phi_big", st_.phi_big),
                            st_.yy, N)
        return bound_regression(s, kw.get("Kmm", Kmm), kw.get("beta", beta), N, D).total

    assert adj["d_phi"] == -beta * D / 2
    assert rel_err(adj["d_phi"], central_diff(lambda a: with_(phi=a[0]), [st_.phi])) < 1e-6
    assert rel_err(adj["d_psi_y"], central_diff(lambda a: with_(psi_y=a), st_.psi_y)) < 1e-6
    assert rel_err(_sym_analytic(adj["d_phi_big"]), _sym_fd(lambda a: with_(phi_big=a), st_.phi_big)) < 1e-6
    assert rel_err(_sym_analytic(adj["d_Kmm"]), _sym_fd(lambda a: with_(Kmm=a), Kmm)) < 1e-6
    assert rel_err(adj["d_beta"], central_diff(lambda a: with_(beta=a[0]), [beta])) < 1e-6
    np.testing.assert_array_equal(adj["d_phi_big"], adj["d_phi_big"].T)
    np.testing.assert_array_equal(adj["d_Kmm"], adj["d_Kmm"].T)


def test_adjoint_zero_psi(rng):
    X, _, Z, th = _regression(rng, 5, 3, 1, 2)
    st_ = stats_deterministic(X, np.zeros((5, 2)), Z, th)
    adj = bound_adjoints(st_, kern_gram(Z, th, 1e-8), 1.0, 5, 2)
    assert not np.any(adj["d_psi_y"])


def test_nesting_monotone(rng):
    for _ in range(20):
        X, Y, Z, th = _regression(rng, 25, 4, 2, 2)
        beta = rng.uniform(0.5, 10)
        Z2 = np.vstack([Z, rng.uniform(-2, 2, (1, 2))])
        b1 = bound_regression(stats_deterministic(X, Y, Z, th), kern_gram(Z, th), beta, 25, 2).total
        b2 = bound_regression(stats_deterministic(X, Y, Z2, th), kern_gram(Z2, th), beta, 25, 2).total
        assert b2 >= b1 - 1e-8


def test_nonpositive_beta(rng):
    X, Y, Z, th = _regression(rng, 5, 2, 1, 1)
    with pytest.raises(ValueError):
        bound_regression(stats_deterministic(X, Y, Z, th), kern_gram(Z, th), 0.0, 5, 1)
