"""Score and information estimation for Newton-type parameter search.

The gradient of the data log-likelihood decomposes over time into smoothed
expectations of the complete-data score: term t couples (x_t, x_{t+1}) and
y_t, and the final term has no transition part. Every estimator here
returns that per-time decomposition, because the information estimate is
built from the same pieces: an outer-product combination of the per-time
terms whose expectation approaches the expected information.

Two families provide the per-time terms. The moment route evaluates exact
Gaussian expectations (linear models, or models that declare their own
smoothed-gradient hook) or falls back to plugging smoothed means into the
score integrand. The sampling route weights the score integrand over
two-step particle pairs or averages it along backward trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import InsufficientMomentsError, NonFiniteEvaluationError
from .kalman import SmoothedMoments, ekf
from .map_smoother import smoothed_moments_map
from .models import LinearGaussianSpec, StateSpaceModel
from .particle import (SmootherConfig, WeightedPairs, bootstrap_pf, ffbsi,
                       fixed_lag_pairs, transition_bound)
from .util import as_generator

Array = np.ndarray

HESSIAN_FLOOR_SCALE = 1e-6


@dataclass(frozen=True)
class DerivativeEstimate:
    """Log-likelihood value with score and curvature estimates at one point.

    gradient is exactly the column sum of per_time; hessian is the
    outer-product information estimate built from the same terms.
    """

    loglik: float
    gradient: Array  # (p,)
    per_time: Array  # (N, p)
    hessian: Array   # (p, p)


def segal_weinstein_hessian(per_time: Array,
                            n_steps: Optional[int] = None) -> Array:
    """Outer-product Hessian estimate from per-time score terms.

    (1/N) G G^T - sum_t G_t G_t^T with G the summed gradient; symmetric by
    construction and negative semidefinite whenever G = 0.
    """
    per_time = np.asarray(per_time, dtype=float)
    if n_steps is None:
        n_steps = per_time.shape[0]
    g = per_time.sum(axis=0)
    return np.outer(g, g) / n_steps \
        - np.einsum("ti,tj->ij", per_time, per_time)


def assemble_estimate(loglik: float, per_time: Array) -> DerivativeEstimate:
    """Bundle per-time score terms into a DerivativeEstimate."""
    per_time = np.asarray(per_time, dtype=float)
    return DerivativeEstimate(loglik=float(loglik),
                              gradient=per_time.sum(axis=0),
                              per_time=per_time,
                              hessian=segal_weinstein_hessian(per_time))


def make_negative_definite(hessian: Array,
                           floor_scale: float = HESSIAN_FLOOR_SCALE) -> Array:
    """Flip and floor eigenvalues so Newton directions are always ascent.

    Each eigenvalue lambda becomes -max(|lambda|, floor) with
    floor = floor_scale * max(1, |lambda|_max). A comfortably negative
    definite input is reproduced up to reconstruction roundoff.
    """
    hessian = np.asarray(hessian, dtype=float)
    sym = 0.5 * (hessian + hessian.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    largest = float(np.max(np.abs(eigvals))) if eigvals.size else 0.0
    floor = floor_scale * max(1.0, largest)
    repaired = -np.maximum(np.abs(eigvals), floor)
    return (eigvecs * repaired) @ eigvecs.T


# ---------------------------------------------------------------------------
# Moment route
# ---------------------------------------------------------------------------

def _lgss_per_time(spec: LinearGaussianSpec, y: Array,
                   sm: SmoothedMoments) -> Array:
    """Exact per-time score terms of a linear-Gaussian system.

    Smoothed expectations of the complete-data score are polynomial in the
    moments, so each term reduces to traces against E[x_t x_t^T] and
    E[x_t x_{t+1}^T]. Needs the lag-one cross-covariances.
    """
    j = spec.jacobians
    n = y.shape[0]
    if j is None:
        return np.zeros((n, 0))
    if sm.cross is None:
        raise InsufficientMomentsError(
            "lag-one cross-covariances are required for the exact "
            "smoothed-moment score of a linear-Gaussian system")
    m, P, C = sm.means, sm.covs, sm.cross
    F, G, Q, R = spec.F, spec.G, spec.Q, spec.R
    Qi = np.linalg.inv(Q)
    Ri = np.linalg.inv(R)
    # second moments: E[x_t x_t^T] and E[x_t x_{t+1}^T]
    Exx = P + m[:, :, None] * m[:, None, :]
    if n > 1:
        Exn = C + m[:-1, :, None] * m[1:, None, :]

    out = np.zeros((n, j.n_params))
    for k in range(j.n_params):
        dF, dG, dQ, dR = j.dF[k], j.dG[k], j.dQ[k], j.dR[k]
        dQi = -Qi @ dQ @ Qi
        dRi = -Ri @ dR @ Ri
        d_RiG = dRi @ G + Ri @ dG
        d_GRiG = dG.T @ Ri @ G + G.T @ dRi @ G + G.T @ Ri @ dG
        out[:, k] += (-0.5 * np.trace(Ri @ dR)
                      + np.einsum("ti,ij,tj->t", y, d_RiG, m)
                      - 0.5 * np.einsum("ti,ij,tj->t", y, dRi, y)
                      - 0.5 * np.einsum("tij,ji->t", Exx, d_GRiG))
        if n > 1:
            d_QiF = dQi @ F + Qi @ dF
            d_FQiF = dF.T @ Qi @ F + F.T @ dQi @ F + F.T @ Qi @ dF
            out[:-1, k] += (-0.5 * np.trace(Qi @ dQ)
                            - 0.5 * np.einsum("tij,ji->t", Exx[1:], dQi)
                            - 0.5 * np.einsum("tij,ji->t", Exx[:-1], d_FQiF)
                            + np.einsum("tij,ji->t", Exn, d_QiF))
    return out


def _plugin_per_time(model: StateSpaceModel, theta, y: Array,
                     sm: SmoothedMoments) -> Array:
    """Score integrand evaluated at the smoothed means (no covariance
    corrections); the generic fallback for models without hooks."""
    n = y.shape[0]
    out = np.empty((n, model.n_params))
    for t in range(n):
        x = sm.means[t][None, :]
        x_next = sm.means[t + 1][None, :] if t + 1 < n else None
        out[t] = model.xi(theta, x_next, x, y[t])[0]
    return out


def gradient_from_moments(target: Union[LinearGaussianSpec, StateSpaceModel],
                          theta, y: Array, sm: SmoothedMoments) -> Array:
    """Per-time score terms from smoothed moments.

    A LinearGaussianSpec (or a model exposing one) gets the exact
    trace-form expectations; a model with a smoothed_gradient hook gets
    its own closed form; anything else gets the plug-in evaluation at the
    smoothed means.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if sm.means.shape[0] != y.shape[0]:
        raise InsufficientMomentsError(
            f"smoothed moments cover {sm.means.shape[0]} steps, "
            f"data has {y.shape[0]}")
    if isinstance(target, LinearGaussianSpec):
        return _lgss_per_time(target, y, sm)
    theta = None if theta is None else np.asarray(theta, dtype=float)
    if target.smoothed_gradient is not None:
        return np.asarray(target.smoothed_gradient(theta, y, sm), dtype=float)
    if target.linear_spec is not None:
        return _lgss_per_time(target.linear_spec(theta), y, sm)
    return _plugin_per_time(target, theta, y, sm)


# ---------------------------------------------------------------------------
# Sampling route
# ---------------------------------------------------------------------------

def gradient_from_pairs(model: StateSpaceModel, theta, y: Array,
                        pairs: WeightedPairs) -> Array:
    """Per-time score terms from weighted two-step samples."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    theta = None if theta is None else np.asarray(theta, dtype=float)
    n = pairs.x.shape[0]
    out = np.empty((n, model.n_params))
    for t in range(n):
        x_next = pairs.x_next[t] if t + 1 < n else None
        vals = model.xi(theta, x_next, pairs.x[t], y[t])
        out[t] = pairs.weights[t] @ vals
    return out


def gradient_fl(model: StateSpaceModel, theta, y: Array, ps, lag: int) -> Array:
    """Per-time score terms via fixed-lag pair extraction."""
    return gradient_from_pairs(model, theta, y, fixed_lag_pairs(ps, lag))


def gradient_ffbsi(model: StateSpaceModel, theta, y: Array,
                   trajectories: Array) -> Array:
    """Per-time score terms averaged over backward trajectories."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    theta = None if theta is None else np.asarray(theta, dtype=float)
    n = trajectories.shape[1]
    out = np.empty((n, model.n_params))
    for t in range(n):
        x_next = trajectories[:, t + 1] if t + 1 < n else None
        out[t] = model.xi(theta, x_next, trajectories[:, t], y[t]).mean(axis=0)
    return out


# ---------------------------------------------------------------------------
# Numerical route
# ---------------------------------------------------------------------------

def finite_difference_gradient(loglik_fn: Callable[[Array], float], theta,
                               h: float = 1e-5) -> Array:
    """Central finite differences with per-coordinate relative steps.

    Coordinate j uses step h * max(1, |theta_j|). Raises
    :class:`NonFiniteEvaluationError` (with the coordinate) when either
    probe evaluates non-finite.
    """
    theta = np.asarray(theta, dtype=float)
    out = np.empty(theta.size)
    for jx in range(theta.size):
        step = h * max(1.0, abs(float(theta[jx])))
        up = theta.copy()
        up[jx] += step
        down = theta.copy()
        down[jx] -= step
        f_up = float(loglik_fn(up))
        f_down = float(loglik_fn(down))
        if not (np.isfinite(f_up) and np.isfinite(f_down)):
            raise NonFiniteEvaluationError(jx)
        out[jx] = (f_up - f_down) / (2.0 * step)
    return out


# ---------------------------------------------------------------------------
# End-to-end derivative providers
# ---------------------------------------------------------------------------

def linearization_derivatives(model: StateSpaceModel, theta,
                              y: Array) -> DerivativeEstimate:
    """Moment-route derivatives: filter loglik, trajectory-MAP moments,
    closed-form per-time score, outer-product Hessian."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    fr = ekf(model, theta, y)
    sm, _ = smoothed_moments_map(model, theta, y, x0=fr.filt_means)
    per_time = gradient_from_moments(model, theta, y, sm)
    return assemble_estimate(fr.loglik, per_time)


def sampling_derivatives(model: StateSpaceModel, theta, y: Array,
                         config: SmootherConfig,
                         seed: int | np.random.Generator) -> DerivativeEstimate:
    """Sampling-route derivatives: particle-filter loglik plus per-time
    score from the configured trajectory smoother."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    config.validate()
    rng = as_generator(seed)
    ps = bootstrap_pf(model, theta, y, config.n_particles, rng)
    if config.kind == "fixed-lag":
        per_time = gradient_fl(model, theta, y, ps,
                               min(config.lag, y.shape[0]))
    else:
        bound = transition_bound(model, theta, config.density_bound)
        trajectories = ffbsi(model, theta, ps, config.n_draws,
                             config.exact_cutoff, bound, rng)
        per_time = gradient_ffbsi(model, theta, y, trajectories)
    return assemble_estimate(ps.loglik, per_time)
