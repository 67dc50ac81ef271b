"""Tiled loops for the sufficient statistics and their gradients.

Every loop nest has the same shape: an outer loop over *blocks* (a span of
inducing indices for the Psi-type statistic, a span of inducing pairs
``m1 <= m2`` for the Phi-type statistic) and an inner loop over *thread
chunks* (a span of datapoints). Tiles are visited in ascending (block, chunk)
order and each tile accumulates into a private buffer that is merged into the
output once the tile is done. This fixes the floating point summation order
for a given ``(block_span, thread_span)``.

Inside a tile, datapoints are visited in ascending order and, for each
datapoint, inducing indices or pairs in ascending order. Per-datapoint
gradients (mu, S, X) are written straight to their row, so their summation
order does not depend on the tile spans at all.

Sums over datapoints are kept as unevaluated pairs (hi, lo) updated with the
error-free two-sum, so the low word collects the rounding error of every
addition. Rounding hi + lo once at the end gives the nearly exact sum, which
is why results agree to the last bit across partitions and tile spans in all
but vanishingly rare ties. Outputs come back normalized: hi = fl(hi + lo).
"""

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True, fastmath=False)


@njit(**_JIT)
def _add(H, L, i, v):
    h = H[i]
    t = h + v
    bp = t - h
    L[i] += (h - (t - bp)) + (v - bp)
    H[i] = t


@njit(**_JIT)
def _add2(H, L, i, j, v):
    h = H[i, j]
    t = h + v
    bp = t - h
    L[i, j] += (h - (t - bp)) + (v - bp)
    H[i, j] = t


@njit(**_JIT)
def _merge(H, L, TH, TL):
    """(H, L) += (TH, TL) elementwise and clear the tile buffers (flat arrays)."""
    for i in range(H.shape[0]):
        h = H[i]
        v = TH[i]
        t = h + v
        bp = t - h
        L[i] += (h - (t - bp)) + (v - bp) + TL[i]
        H[i] = t
        TH[i] = 0.0
        TL[i] = 0.0


@njit(**_JIT)
def _normalize(H, L):
    for i in range(H.shape[0]):
        hi = H[i] + L[i]
        L[i] = L[i] - (hi - H[i])
        H[i] = hi


@njit(**_JIT)
def dd_sum_squares(Y):
    """Sum of squared entries as a normalized (hi, lo) pair."""
    H = np.zeros(1)
    L = np.zeros(1)
    for n in range(Y.shape[0]):
        for j in range(Y.shape[1]):
            _add(H, L, 0, Y[n, j] * Y[n, j])
    _normalize(H, L)
    return H[0], L[0]


@njit(**_JIT)
def dd_sum_rows(v):
    H = np.zeros(1)
    L = np.zeros(1)
    for n in range(v.shape[0]):
        _add(H, L, 0, v[n])
    _normalize(H, L)
    return H[0], L[0]


@njit(**_JIT)
def two_prod(a, b):
    """Exact product a*b as (hi, lo) via Dekker splitting."""
    p = a * b
    c = 134217729.0 * a
    ah = c - (c - a)
    al = a - ah
    c = 134217729.0 * b
    bh = c - (c - b)
    bl = b - bh
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    hi = p + e
    return hi, e - (hi - p)


@njit(**_JIT)
def pair_index(M):
    P = M * (M + 1) // 2
    m1 = np.empty(P, np.int64)
    m2 = np.empty(P, np.int64)
    p = 0
    for a in range(M):
        for b in range(a, M):
            m1[p] = a
            m2[p] = b
            p += 1
    return m1, m2


@njit(**_JIT)
def pairs_to_matrix(vals, m1, m2, M):
    out = np.zeros((M, M))
    for p in range(vals.shape[0]):
        out[m1[p], m2[p]] = vals[p]
        out[m2[p], m1[p]] = vals[p]
    return out


@njit(**_JIT)
def pair_weights(G, m1, m2):
    # symmetric adjoint folded onto the upper triangle
    w = np.empty(m1.shape[0])
    for p in range(m1.shape[0]):
        a = m1[p]
        b = m2[p]
        w[p] = G[a, b] if a == b else G[a, b] + G[b, a]
    return w


# ---------------------------------------------------------------------------
# Psi-type statistic: E[k(x_n, z_m)] (or k(x_n, z_m) when s == 0), and Psi = psi1^T Y
# ---------------------------------------------------------------------------


@njit(**_JIT)
def psi1_forward(mu, s, Y, Z, variance, ls, block_span, thread_span):
    N, Q = mu.shape
    M = Z.shape[0]
    D = Y.shape[1]
    ls2 = ls * ls
    psi1 = np.empty((N, M))
    psi_y = np.zeros((M, D))
    psi_y_lo = np.zeros((M, D))
    for b0 in range(0, M, block_span):
        b1 = min(b0 + block_span, M)
        for t0 in range(0, N, thread_span):
            t1 = min(t0 + thread_span, N)
            for n in range(t0, t1):
                for m in range(b0, b1):
                    expo = 0.0
                    scale = variance
                    for q in range(Q):
                        den = s[n, q] + ls2[q]
                        d = mu[n, q] - Z[m, q]
                        expo += d * d / den
                        scale *= np.sqrt(ls2[q] / den)
                    v = scale * np.exp(-0.5 * expo)
                    psi1[n, m] = v
                    # each block owns its rows of psi_y
                    for j in range(D):
                        _add2(psi_y, psi_y_lo, m, j, v * Y[n, j])
    _normalize(psi_y.reshape(-1), psi_y_lo.reshape(-1))
    return psi1, psi_y, psi_y_lo


@njit(**_JIT)
def psi1_backward(mu, s, Z, variance, ls, G1, block_span, thread_span):
    """Contract G1 = dL/dpsi1 (N x M) with the derivatives of psi1."""
    N, Q = mu.shape
    M = Z.shape[0]
    ls2 = ls * ls
    d_mu = np.zeros((N, Q))
    d_s = np.zeros((N, Q))
    # global partials: [Z (M*Q) | lengthscales (Q) | variance (1)] as hi/lo words
    G = np.zeros(M * Q + Q + 1)
    GL = np.zeros(M * Q + Q + 1)
    T = np.zeros(M * Q + Q + 1)
    TL = np.zeros(M * Q + Q + 1)
    iv_ = M * Q + Q
    for b0 in range(0, M, block_span):
        b1 = min(b0 + block_span, M)
        for t0 in range(0, N, thread_span):
            t1 = min(t0 + thread_span, N)
            for n in range(t0, t1):
                for m in range(b0, b1):
                    expo = 0.0
                    scale = variance
                    for q in range(Q):
                        den = s[n, q] + ls2[q]
                        d = mu[n, q] - Z[m, q]
                        expo += d * d / den
                        scale *= np.sqrt(ls2[q] / den)
                    g = G1[n, m] * scale * np.exp(-0.5 * expo)
                    _add(T, TL, iv_, g / variance)
                    for q in range(Q):
                        inv = 1.0 / (s[n, q] + ls2[q])
                        d = mu[n, q] - Z[m, q]
                        a = d * inv
                        d_mu[n, q] -= g * a
                        d_s[n, q] += g * 0.5 * (a * a - inv)
                        _add(T, TL, m * Q + q, g * a)
                        _add(T, TL, M * Q + q, g * (1.0 / ls[q] - ls[q] * inv + ls[q] * a * a))
            # merge the tile partials
            _merge(G, GL, T, TL)
    _normalize(G, GL)
    return d_mu, d_s, G, GL


# ---------------------------------------------------------------------------
# Phi-type statistic, expected: sum_n E[k(x_n, z_m1) k(x_n, z_m2)]
# ---------------------------------------------------------------------------


@njit(**_JIT)
def _pair_geometry(Z, ls2, m1, m2):
    P = m1.shape[0]
    Q = Z.shape[1]
    zbar = np.empty((P, Q))
    sep = np.empty(P)
    for p in range(P):
        acc = 0.0
        for q in range(Q):
            a = Z[m1[p], q]
            b = Z[m2[p], q]
            zbar[p, q] = 0.5 * (a + b)
            acc += (a - b) * (a - b) / (4.0 * ls2[q])
        sep[p] = acc
    return zbar, sep


@njit(**_JIT)
def _point_terms(s, variance, ls2):
    N, Q = s.shape
    coef = np.empty(N)
    inv = np.empty((N, Q))
    for n in range(N):
        c = variance * variance
        for q in range(Q):
            den = 2.0 * s[n, q] + ls2[q]
            inv[n, q] = 1.0 / den
            c *= np.sqrt(ls2[q] / den)
        coef[n] = c
    return coef, inv


@njit(**_JIT)
def psi2_forward(mu, s, Z, variance, ls, m1, m2, block_span, thread_span):
    N, Q = mu.shape
    P = m1.shape[0]
    ls2 = ls * ls
    zbar, sep = _pair_geometry(Z, ls2, m1, m2)
    coef, inv = _point_terms(s, variance, ls2)
    out = np.zeros(P)
    out_lo = np.zeros(P)
    acc = np.zeros(P)
    acc_lo = np.zeros(P)
    for b0 in range(0, P, block_span):
        b1 = min(b0 + block_span, P)
        for t0 in range(0, N, thread_span):
            t1 = min(t0 + thread_span, N)
            for n in range(t0, t1):
                for p in range(b0, b1):
                    expo = sep[p]
                    for q in range(Q):
                        e = mu[n, q] - zbar[p, q]
                        expo += e * e * inv[n, q]
                    _add(acc, acc_lo, p, coef[n] * np.exp(-expo))
            # "shared memory" partial of this chunk merged into the block output
            _merge(out[b0:b1], out_lo[b0:b1], acc[b0:b1], acc_lo[b0:b1])
    _normalize(out, out_lo)
    return out, out_lo


@njit(**_JIT)
def psi2_backward(mu, s, Z, variance, ls, m1, m2, w, block_span, thread_span):
    """Contract pair weights w (folded symmetric dL/dPhi) with d psi2."""
    N, Q = mu.shape
    M = Z.shape[0]
    P = m1.shape[0]
    ls2 = ls * ls
    zbar, sep = _pair_geometry(Z, ls2, m1, m2)
    coef, inv = _point_terms(s, variance, ls2)
    d_mu = np.zeros((N, Q))
    d_s = np.zeros((N, Q))
    # global partials: [Z (M*Q) | lengthscales (Q) | variance (1)] as hi/lo words
    G = np.zeros(M * Q + Q + 1)
    GL = np.zeros(M * Q + Q + 1)
    T = np.zeros(M * Q + Q + 1)
    TL = np.zeros(M * Q + Q + 1)
    iv_ = M * Q + Q
    for b0 in range(0, P, block_span):
        b1 = min(b0 + block_span, P)
        for t0 in range(0, N, thread_span):
            t1 = min(t0 + thread_span, N)
            for n in range(t0, t1):
                for p in range(b0, b1):
                    if w[p] == 0.0:
                        continue
                    expo = sep[p]
                    for q in range(Q):
                        e = mu[n, q] - zbar[p, q]
                        expo += e * e * inv[n, q]
                    g = w[p] * coef[n] * np.exp(-expo)
                    _add(T, TL, iv_, 2.0 * g / variance)
                    a_idx = m1[p]
                    b_idx = m2[p]
                    for q in range(Q):
                        iv = inv[n, q]
                        e = mu[n, q] - zbar[p, q]
                        ei = e * iv
                        half_sep = (Z[a_idx, q] - Z[b_idx, q]) / (2.0 * ls2[q])
                        d_mu[n, q] -= 2.0 * g * ei
                        d_s[n, q] += g * (2.0 * ei * ei - iv)
                        _add(T, TL, a_idx * Q + q, g * (ei - half_sep))
                        _add(T, TL, b_idx * Q + q, g * (ei + half_sep))
                        dz = Z[a_idx, q] - Z[b_idx, q]
                        _add(T, TL, M * Q + q, g * (
                            1.0 / ls[q] - ls[q] * iv + dz * dz / (2.0 * ls2[q] * ls[q]) + 2.0 * ls[q] * ei * ei
                        ))
            _merge(G, GL, T, TL)
    _normalize(G, GL)
    return d_mu, d_s, G, GL


# ---------------------------------------------------------------------------
# Phi-type statistic, deterministic: sum_n k(x_n, z_m1) k(x_n, z_m2)
# ---------------------------------------------------------------------------


@njit(**_JIT)
def phi_det_forward(K, m1, m2, block_span, thread_span):
    N = K.shape[0]
    P = m1.shape[0]
    out = np.zeros(P)
    out_lo = np.zeros(P)
    acc = np.zeros(P)
    acc_lo = np.zeros(P)
    for b0 in range(0, P, block_span):
        b1 = min(b0 + block_span, P)
        for t0 in range(0, N, thread_span):
            t1 = min(t0 + thread_span, N)
            for n in range(t0, t1):
                for p in range(b0, b1):
                    _add(acc, acc_lo, p, K[n, m1[p]] * K[n, m2[p]])
            _merge(out[b0:b1], out_lo[b0:b1], acc[b0:b1], acc_lo[b0:b1])
    _normalize(out, out_lo)
    return out, out_lo


@njit(**_JIT)
def phi_det_backward(X, Z, K, variance, ls, m1, m2, w, block_span, thread_span):
    N, Q = X.shape
    M = Z.shape[0]
    P = m1.shape[0]
    ls2 = ls * ls
    d_X = np.zeros((N, Q))
    # global partials: [Z (M*Q) | lengthscales (Q) | variance (1)] as hi/lo words
    G = np.zeros(M * Q + Q + 1)
    GL = np.zeros(M * Q + Q + 1)
    T = np.zeros(M * Q + Q + 1)
    TL = np.zeros(M * Q + Q + 1)
    iv_ = M * Q + Q
    for b0 in range(0, P, block_span):
        b1 = min(b0 + block_span, P)
        for t0 in range(0, N, thread_span):
            t1 = min(t0 + thread_span, N)
            for n in range(t0, t1):
                for p in range(b0, b1):
                    if w[p] == 0.0:
                        continue
                    a_idx = m1[p]
                    b_idx = m2[p]
                    g = w[p] * K[n, a_idx] * K[n, b_idx]
                    _add(T, TL, iv_, 2.0 * g / variance)
                    for q in range(Q):
                        da = (X[n, q] - Z[a_idx, q]) / ls2[q]
                        db = (X[n, q] - Z[b_idx, q]) / ls2[q]
                        d_X[n, q] -= g * (da + db)
                        _add(T, TL, a_idx * Q + q, g * da)
                        _add(T, TL, b_idx * Q + q, g * db)
                        _add(T, TL, M * Q + q, g * (da * da + db * db) * ls[q])
            _merge(G, GL, T, TL)
    _normalize(G, GL)
    return d_X, G, GL
