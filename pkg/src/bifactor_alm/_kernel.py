"""Compiled evaluation of the augmented Lagrangian and its gradient.

Mirrors the numpy implementation in :mod:`bifactor_alm.objective`, which
remains the reference. Loops are written out because the matrices involved
are small enough that per-call overhead, not flops, dominates.
"""

from __future__ import annotations

import numpy as np
from numba import njit

Z_CLAMP = 1.0 - 1e-12


@njit(cache=True)
def _correlation_parts(gamma, G):
    Z = np.zeros((G, G))
    m = 0
    for j in range(G):
        for i in range(j):
            z = np.tanh(gamma[m])
            if z > Z_CLAMP:
                z = Z_CLAMP
            elif z < -Z_CLAMP:
                z = -Z_CLAMP
            Z[i, j] = z
            m += 1
    Sq = np.sqrt(1.0 - Z * Z)
    P = np.ones((G, G))
    for j in range(G):
        for i in range(1, G):
            P[i, j] = P[i - 1, j] * Sq[i - 1, j]
    U = np.zeros((G, G))
    for j in range(G):
        for i in range(j):
            U[i, j] = Z[i, j] * P[i, j]
        U[j, j] = P[j, j]
    return Z, Sq, P, U


@njit(cache=True)
def evaluate(x, free_rows, free_cols, J, K, n_gamma, S, N, logdet_S, beta, c, left, right, grad):
    """Write the gradient into ``grad`` and return the objective value.

    Returns ``inf`` (with a zero gradient) when the implied covariance is not
    positive definite or the input is not finite.
    """
    nl = free_rows.shape[0]
    n = x.shape[0]
    for i in range(n):
        grad[i] = 0.0
        if not np.isfinite(x[i]):
            return np.inf
    for j in range(J):
        if x[nl + n_gamma + j] > 700.0:
            return np.inf

    L = np.zeros((J, K))
    for i in range(nl):
        L[free_rows[i], free_cols[i]] = x[i]
    psi = np.exp(x[nl + n_gamma :])

    G = K - 1
    phi = np.eye(K)
    oblique = n_gamma > 0
    if oblique:
        Z, Sq, P, U = _correlation_parts(x[nl : nl + n_gamma], G)
        block = U.T @ U
        for a in range(G):
            for b in range(a + 1, G):
                v = 0.5 * (block[a, b] + block[b, a])
                phi[a + 1, b + 1] = v
                phi[b + 1, a + 1] = v

    sigma = L @ phi @ L.T
    for j in range(J):
        sigma[j, j] += psi[j]

    # Cholesky, lower triangular
    C = np.zeros((J, J))
    for j in range(J):
        s = sigma[j, j]
        for k in range(j):
            s -= C[j, k] * C[j, k]
        if not s > 0.0 or not np.isfinite(s):
            return np.inf
        C[j, j] = np.sqrt(s)
        for i in range(j + 1, J):
            s = sigma[i, j]
            for k in range(j):
                s -= C[i, k] * C[j, k]
            C[i, j] = s / C[j, j]
    logdet = 0.0
    for j in range(J):
        logdet += 2.0 * np.log(C[j, j])

    # inverse of the factor by forward substitution
    Ci = np.zeros((J, J))
    for j in range(J):
        Ci[j, j] = 1.0 / C[j, j]
        for i in range(j + 1, J):
            s = 0.0
            for k in range(j, i):
                s -= C[i, k] * Ci[k, j]
            Ci[i, j] = s / C[i, i]
    sigma_inv = Ci.T @ Ci

    trace = 0.0
    for i in range(J):
        for j in range(J):
            trace += S[i, j] * sigma_inv[i, j]
    value = N * (logdet + trace - logdet_S - J)

    W = sigma_inv @ S @ sigma_inv
    dS = np.empty((J, J))
    for i in range(J):
        for j in range(J):
            dS[i, j] = 0.5 * N * ((sigma_inv[i, j] - W[i, j]) + (sigma_inv[j, i] - W[j, i]))

    dS_L = dS @ L
    gL = 2.0 * (dS_L @ phi)

    n_pairs = left.shape[0]
    for j in range(J):
        for p in range(n_pairs):
            a = left[p]
            b = right[p]
            r = L[j, a] * L[j, b]
            value += beta[j, p] * r + c * r * r
            w = beta[j, p] + 2.0 * c * r
            gL[j, a] += w * L[j, b]
            gL[j, b] += w * L[j, a]

    for i in range(nl):
        grad[i] = gL[free_rows[i], free_cols[i]]

    if oblique:
        d_phi = L.T @ dS_L
        M = np.empty((G, G))
        for a in range(G):
            for b in range(G):
                M[a, b] = d_phi[a + 1, b + 1] + d_phi[b + 1, a + 1]
        D = U @ M
        m = 0
        for j in range(G):
            # tail[i] = sum over rows k > i (k <= j) of D[k, j] * U[k, j]
            tail = 0.0
            tails = np.zeros(j + 1)
            for i in range(j, -1, -1):
                tails[i] = tail
                tail += D[i, j] * U[i, j]
            for i in range(j):
                dz = D[i, j] * P[i, j] - Z[i, j] / (Sq[i, j] * Sq[i, j]) * tails[i]
                grad[nl + m] = dz * (1.0 - Z[i, j] * Z[i, j])
                m += 1

    for j in range(J):
        grad[nl + n_gamma + j] = dS[j, j] * psi[j]
    return value
