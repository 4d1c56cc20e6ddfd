"""Kalman filter, RTS smoother, and first-order extended Kalman filter.

The three share one measurement-update core so that the EKF collapses to
the exact filter on linear models up to floating-point identity, which the
test suite checks at 1e-10.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FilterDivergedError
from .models import GaussianParts, LinearGaussianSpec, StateSpaceModel
from .util import chol_lower, ensure_psd, solve_lower, LOG_2PI

Array = np.ndarray


@dataclass
class FilterResult:
    """Filtered/predicted beliefs plus the predictive observation terms.

    ``loglik`` equals the sum of Gaussian log-densities of each y_t under
    (obs_pred_means[t], obs_pred_covs[t]); the invariant is recomputable
    from the stored pieces.
    """

    loglik: float
    filt_means: Array      # (N, d_x)
    filt_covs: Array       # (N, d_x, d_x)
    pred_means: Array      # (N, d_x)   mean of x_t | y_{1:t-1}
    pred_covs: Array       # (N, d_x, d_x)
    obs_pred_means: Array  # (N, d_y)
    obs_pred_covs: Array   # (N, d_y, d_y)

    @property
    def n_steps(self) -> int:
        return self.filt_means.shape[0]


@dataclass
class SmoothedMoments:
    """Marginal smoothed moments plus lag-one cross-covariances.

    ``cross[t] = Cov(x_t, x_{t+1} | y_{1:N})`` for t = 0..N-2.
    """

    means: Array  # (N, d_x)
    covs: Array   # (N, d_x, d_x)
    cross: Array  # (N-1, d_x, d_x)

    @property
    def n_steps(self) -> int:
        return self.means.shape[0]


def _measurement_update(m_pred, P_pred, y, C, obs_mean, R, t):
    """Joseph-form Kalman update; returns (m, P, y_pred, S, loglik_term)."""
    S = C @ P_pred @ C.T + R
    L = chol_lower(S, time_index=t)
    innov = y - obs_mean
    z = solve_lower(L, innov)
    ll = float(-0.5 * (y.size * LOG_2PI + z @ z) - np.log(np.diag(L)).sum())
    K = np.linalg.solve(S, C @ P_pred).T  # = P C^T S^{-1}, P symmetric
    m = m_pred + K @ innov
    I_KC = np.eye(P_pred.shape[0]) - K @ C
    P = I_KC @ P_pred @ I_KC.T + K @ R @ K.T
    P = ensure_psd(P, time_index=t)
    return m, P, obs_mean, S, ll


def kalman_filter(spec: LinearGaussianSpec, y: Array,
                  validate: bool = True) -> FilterResult:
    """Exact filter for a linear-Gaussian system.

    Parameters
    ----------
    spec : LinearGaussianSpec
    y : ndarray, shape (N, d_y)
    validate : bool
        Run ``spec.validate()`` first (skippable in hot loops).
    """
    if validate:
        spec.validate()
    y = np.atleast_2d(np.asarray(y, dtype=float))
    parts = GaussianParts(
        init_mean=spec.init_mean, init_cov=spec.init_cov,
        trans_cov=spec.Q, obs_cov=spec.R,
        trans_mean=lambda x: x @ spec.F.T,
        trans_jac=lambda x: np.broadcast_to(spec.F, (x.shape[0],) + spec.F.shape),
        obs_mean=lambda x: x @ spec.G.T,
        obs_jac=lambda x: np.broadcast_to(spec.G, (x.shape[0],) + spec.G.shape),
    )
    return _gaussian_filter(parts, y)


def ekf(model: StateSpaceModel, theta, y: Array) -> FilterResult:
    """First-order extended Kalman filter.

    The transition is linearized at the previous filtered mean and the
    measurement at the current predicted mean. Requires the model to carry
    an additive-Gaussian form.
    """
    if model.gaussian is None:
        raise FilterDivergedError(0, "model has no additive-Gaussian form")
    y = np.atleast_2d(np.asarray(y, dtype=float))
    parts = model.gaussian(np.asarray(theta, dtype=float)
                           if theta is not None else None)
    return _gaussian_filter(parts, y)


def _gaussian_filter(parts: GaussianParts, y: Array) -> FilterResult:
    n = y.shape[0]
    d_x = parts.init_mean.shape[0]
    d_y = y.shape[1]
    out = FilterResult(
        loglik=0.0,
        filt_means=np.empty((n, d_x)), filt_covs=np.empty((n, d_x, d_x)),
        pred_means=np.empty((n, d_x)), pred_covs=np.empty((n, d_x, d_x)),
        obs_pred_means=np.empty((n, d_y)), obs_pred_covs=np.empty((n, d_y, d_y)),
    )
    m_pred = parts.init_mean.copy()
    P_pred = parts.init_cov.copy()
    ll = 0.0
    for t in range(n):
        if t > 0:
            A = parts.trans_jac(m[None, :])[0]
            m_pred = parts.trans_mean(m[None, :])[0]
            P_pred = ensure_psd(A @ P @ A.T + parts.trans_cov, time_index=t)
        C = parts.obs_jac(m_pred[None, :])[0]
        y_hat = parts.obs_mean(m_pred[None, :])[0]
        m, P, y_hat, S, term = _measurement_update(
            m_pred, P_pred, y[t], C, y_hat, parts.obs_cov, t)
        if not np.all(np.isfinite(m)):
            raise FilterDivergedError(t, "non-finite filtered mean")
        ll += term
        out.pred_means[t] = m_pred
        out.pred_covs[t] = P_pred
        out.filt_means[t] = m
        out.filt_covs[t] = P
        out.obs_pred_means[t] = y_hat
        out.obs_pred_covs[t] = S
    out.loglik = ll
    return out


def rts_smoother(spec: LinearGaussianSpec, fr: FilterResult) -> SmoothedMoments:
    """Fixed-interval smoother for a linear-Gaussian system.

    Lag-one cross-covariances come from the smoother-gain identity
    Cov(x_t, x_{t+1} | y_{1:N}) = A_t P_{t+1|N} with
    A_t = P_{t|t} F^T P_{t+1|t}^{-1}.
    """
    F = spec.F
    n = fr.n_steps
    d_x = F.shape[0]
    means = np.empty((n, d_x))
    covs = np.empty((n, d_x, d_x))
    cross = np.empty((max(n - 1, 0), d_x, d_x))
    means[-1] = fr.filt_means[-1]
    covs[-1] = fr.filt_covs[-1]
    for t in range(n - 2, -1, -1):
        P_f = fr.filt_covs[t]
        P_pred_next = fr.pred_covs[t + 1]
        A = np.linalg.solve(P_pred_next.T, (P_f @ F.T).T).T
        means[t] = fr.filt_means[t] + A @ (means[t + 1] - fr.pred_means[t + 1])
        covs[t] = ensure_psd(
            P_f + A @ (covs[t + 1] - P_pred_next) @ A.T, time_index=t)
        cross[t] = A @ covs[t + 1]
    return SmoothedMoments(means=means, covs=covs, cross=cross)
