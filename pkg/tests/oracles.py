"""Independent reference computations used by the test suite.

Nothing in here calls into the package's numerics: the joint-Gaussian
oracle builds the full stacked distribution of (x_{1:N}, y_{1:N}) and
conditions it directly, and the finite-difference helpers are plain
central differences. Tests compare the package's recursive/structured
implementations against these brute-force routes.
"""

from __future__ import annotations

import numpy as np


def fd_gradient(fn, theta, h=1e-6):
    """Central finite-difference gradient of a scalar function of theta."""
    theta = np.asarray(theta, dtype=float)
    g = np.zeros(theta.size)
    for j in range(theta.size):
        hj = h * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tp[j] += hj
        tm = theta.copy()
        tm[j] -= hj
        g[j] = (fn(tp) - fn(tm)) / (2.0 * hj)
    return g


def fd_hessian(fn, theta, h=1e-4):
    """Central finite-difference Hessian of a scalar function of theta."""
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    H = np.zeros((p, p))
    for i in range(p):
        for j in range(p):
            tpp = theta.copy(); tpp[i] += h; tpp[j] += h
            tpm = theta.copy(); tpm[i] += h; tpm[j] -= h
            tmp = theta.copy(); tmp[i] -= h; tmp[j] += h
            tmm = theta.copy(); tmm[i] -= h; tmm[j] -= h
            H[i, j] = (fn(tpp) - fn(tpm) - fn(tmp) + fn(tmm)) / (4.0 * h * h)
    return 0.5 * (H + H.T)


def joint_gaussian(spec, n):
    """Stacked mean/covariance of (x_{1:n}, y_{1:n}) for a linear system.

    Returns (mx, Sxx, my, Syy, Sxy) with x stacked time-major: block t of
    x covers rows t*d_x:(t+1)*d_x.
    """
    F, G, Q, R = spec.F, spec.G, spec.Q, spec.R
    d_x, d_y = F.shape[0], G.shape[0]
    mx = np.zeros(n * d_x)
    marg = [None] * n
    mx[:d_x] = spec.init_mean
    marg[0] = spec.init_cov.copy()
    for t in range(1, n):
        mx[t * d_x:(t + 1) * d_x] = F @ mx[(t - 1) * d_x:t * d_x]
        marg[t] = F @ marg[t - 1] @ F.T + Q
    Sxx = np.zeros((n * d_x, n * d_x))
    for t in range(n):
        blk = marg[t]
        Sxx[t * d_x:(t + 1) * d_x, t * d_x:(t + 1) * d_x] = blk
        prop = blk
        for s in range(t + 1, n):
            prop = prop @ F.T
            Sxx[t * d_x:(t + 1) * d_x, s * d_x:(s + 1) * d_x] = prop
            Sxx[s * d_x:(s + 1) * d_x, t * d_x:(t + 1) * d_x] = prop.T
    Gb = np.kron(np.eye(n), G)
    my = Gb @ mx
    Syy = Gb @ Sxx @ Gb.T + np.kron(np.eye(n), R)
    Sxy = Sxx @ Gb.T
    return mx, Sxx, my, Syy, Sxy


def oracle_loglik(spec, y):
    """Exact log p(y_{1:n}) from the stacked joint Gaussian."""
    n = y.shape[0]
    _, _, my, Syy, _ = joint_gaussian(spec, n)
    r = y.reshape(-1) - my
    L = np.linalg.cholesky(Syy)
    z = np.linalg.solve(L, r)
    return float(-0.5 * (r.size * np.log(2 * np.pi) + z @ z)
                 - np.log(np.diag(L)).sum())


def oracle_smoothed(spec, y):
    """Smoothed means/covariances/lag-one cross-covariances by conditioning.

    Returns (means (n, d_x), covs (n, d_x, d_x), cross (n-1, d_x, d_x))
    where cross[t] = Cov(x_t, x_{t+1} | y_{1:n}).
    """
    n = y.shape[0]
    d_x = spec.F.shape[0]
    mx, Sxx, my, Syy, Sxy = joint_gaussian(spec, n)
    K = np.linalg.solve(Syy, Sxy.T).T          # Sxy @ Syy^{-1}
    mean = mx + K @ (y.reshape(-1) - my)
    cov = Sxx - K @ Sxy.T
    means = mean.reshape(n, d_x)
    covs = np.empty((n, d_x, d_x))
    cross = np.empty((n - 1, d_x, d_x)) if n > 1 else np.empty((0, d_x, d_x))
    for t in range(n):
        covs[t] = cov[t * d_x:(t + 1) * d_x, t * d_x:(t + 1) * d_x]
        if t + 1 < n:
            cross[t] = cov[t * d_x:(t + 1) * d_x, (t + 1) * d_x:(t + 2) * d_x]
    return means, covs, cross
