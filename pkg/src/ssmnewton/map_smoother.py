"""Trajectory MAP smoothing as banded nonlinear least squares.

The negative complete-data log-density of an additive-Gaussian model is,
up to a constant, half the squared norm of a whitened residual stack
(initial deviation, dynamics mismatches, measurement mismatches). Its
Gauss-Newton normal matrix is block tridiagonal in the states, so each
iteration costs O(N d_x^3), and the selected inverse of the final normal
matrix supplies smoothed marginal covariances and lag-one
cross-covariances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FilterDivergedError, NoProgressError, SingularBlockError
from .kalman import SmoothedMoments, ekf
from .models import StateSpaceModel

Array = np.ndarray

ARMIJO_C = 1e-4
MIN_STEP = 2.0 ** -20


# ---------------------------------------------------------------------------
# Block-tridiagonal symmetric matrices
# ---------------------------------------------------------------------------

class BlockTridiagonal:
    """Symmetric block-tridiagonal matrix.

    diag: (N, d, d) diagonal blocks; upper: (N-1, d, d) blocks at (t, t+1).
    The (t+1, t) blocks are the transposes of ``upper`` implicitly.
    """

    def __init__(self, diag: Array, upper: Array):
        self.diag = diag
        self.upper = upper
        self.n = diag.shape[0]
        self.d = diag.shape[1]

    def to_dense(self) -> Array:
        n, d = self.n, self.d
        out = np.zeros((n * d, n * d))
        for t in range(n):
            out[t * d:(t + 1) * d, t * d:(t + 1) * d] = self.diag[t]
            if t + 1 < n:
                out[t * d:(t + 1) * d, (t + 1) * d:(t + 2) * d] = self.upper[t]
                out[(t + 1) * d:(t + 2) * d, t * d:(t + 1) * d] = self.upper[t].T
        return out

    def matvec(self, x: Array) -> Array:
        """Product with a stacked vector x of shape (N, d)."""
        out = np.einsum("tij,tj->ti", self.diag, x)
        if self.n > 1:
            out[:-1] += np.einsum("tij,tj->ti", self.upper, x[1:])
            out[1:] += np.einsum("tji,tj->ti", self.upper, x[:-1])
        return out

    def cholesky(self) -> "BlockCholesky":
        if self.d == 1:
            return self._cholesky_scalar()
        n, d = self.n, self.d
        C = np.empty((n, d, d))
        E = np.empty((max(n - 1, 0), d, d))
        try:
            C[0] = np.linalg.cholesky(self.diag[0])
        except np.linalg.LinAlgError:
            raise SingularBlockError(0) from None
        for t in range(n - 1):
            # E_t = upper_t^T C_t^{-T}
            E[t] = np.linalg.solve(C[t], self.upper[t]).T
            S = self.diag[t + 1] - E[t] @ E[t].T
            try:
                C[t + 1] = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise SingularBlockError(t + 1) from None
        return BlockCholesky(C, E)

    def _cholesky_scalar(self) -> "BlockCholesky":
        dd = self.diag[:, 0, 0]
        uu = self.upper[:, 0, 0] if self.n > 1 else np.empty(0)
        c = np.empty(self.n)
        e = np.empty(max(self.n - 1, 0))
        prev = dd[0]
        if prev <= 0.0 or not np.isfinite(prev):
            raise SingularBlockError(0)
        c[0] = prev ** 0.5
        for t in range(self.n - 1):
            et = uu[t] / c[t]
            pivot = dd[t + 1] - et * et
            if pivot <= 0.0 or not np.isfinite(pivot):
                raise SingularBlockError(t + 1)
            e[t] = et
            c[t + 1] = pivot ** 0.5
        return BlockCholesky(c[:, None, None], e[:, None, None])


@dataclass
class BlockCholesky:
    """Lower factor of a block-tridiagonal SPD matrix: diagonal blocks C_t
    and subdiagonal blocks E_t with H = L L^T."""

    C: Array  # (N, d, d)
    E: Array  # (N-1, d, d)

    def solve(self, b: Array) -> Array:
        """Solve H x = b with b stacked as (N, d)."""
        n, d = self.C.shape[0], self.C.shape[1]
        if d == 1:
            return self._solve_scalar(b)
        z = np.empty_like(b)
        z[0] = np.linalg.solve(self.C[0], b[0])
        for t in range(1, n):
            z[t] = np.linalg.solve(self.C[t], b[t] - self.E[t - 1] @ z[t - 1])
        x = np.empty_like(b)
        x[-1] = np.linalg.solve(self.C[-1].T, z[-1])
        for t in range(n - 2, -1, -1):
            x[t] = np.linalg.solve(self.C[t].T, z[t] - self.E[t].T @ x[t + 1])
        return x

    def _solve_scalar(self, b: Array) -> Array:
        n = self.C.shape[0]
        c = self.C[:, 0, 0]
        e = self.E[:, 0, 0] if n > 1 else np.empty(0)
        bb = b[:, 0]
        z = np.empty(n)
        z[0] = bb[0] / c[0]
        for t in range(1, n):
            z[t] = (bb[t] - e[t - 1] * z[t - 1]) / c[t]
        x = np.empty(n)
        x[-1] = z[-1] / c[-1]
        for t in range(n - 2, -1, -1):
            x[t] = (z[t] - e[t] * x[t + 1]) / c[t]
        return x[:, None]

    def selected_inverse(self) -> tuple[Array, Array]:
        """Diagonal and superdiagonal blocks of H^{-1}.

        Returns (diag (N, d, d), upper (N-1, d, d)) with
        upper[t] = (H^{-1})_{t, t+1}.
        """
        n, d = self.C.shape[0], self.C.shape[1]
        if d == 1:
            return self._selected_inverse_scalar()
        Sd = np.empty((n, d, d))
        Su = np.empty((max(n - 1, 0), d, d))
        Cinv_last = np.linalg.inv(self.C[-1])
        Sd[-1] = Cinv_last.T @ Cinv_last
        for t in range(n - 2, -1, -1):
            Cinv = np.linalg.inv(self.C[t])
            W = Cinv.T @ self.E[t].T        # C_t^{-T} E_t^T
            Su[t] = -W @ Sd[t + 1]
            Sd[t] = Cinv.T @ Cinv + W @ Sd[t + 1] @ W.T
        return Sd, Su

    def _selected_inverse_scalar(self) -> tuple[Array, Array]:
        n = self.C.shape[0]
        c = self.C[:, 0, 0]
        e = self.E[:, 0, 0] if n > 1 else np.empty(0)
        sd = np.empty(n)
        su = np.empty(max(n - 1, 0))
        sd[-1] = 1.0 / (c[-1] * c[-1])
        for t in range(n - 2, -1, -1):
            w = e[t] / c[t]
            su[t] = -w * sd[t + 1]
            sd[t] = 1.0 / (c[t] * c[t]) + w * w * sd[t + 1]
        return sd[:, None, None], su[:, None, None]


# ---------------------------------------------------------------------------
# Whitened residual stack
# ---------------------------------------------------------------------------

@dataclass
class ResidualStack:
    """Whitened residuals of a state trajectory and the Jacobian blocks
    needed to form the Gauss-Newton system.

    Residual order: initial deviation, then dynamics mismatches t=1..N-1,
    then measurement mismatches t=1..N. All residuals are whitened by the
    Cholesky factors of the corresponding covariances, so the objective is
    0.5 * ||r||^2 and differences of it equal differences of the negative
    complete-data log-density.
    """

    r_init: Array   # (d_x,)
    r_dyn: Array    # (N-1, d_x)
    r_obs: Array    # (N, d_y)
    A: Array        # (N-1, d_x, d_x) transition jacobians at x_t
    C: Array        # (N, d_y, d_x) measurement jacobians at x_t
    P0_inv: Array   # (d_x, d_x)
    Q_inv: Array
    R_inv: Array
    Lp0: Array
    Lq: Array
    Lr: Array

    def vector(self) -> Array:
        return np.concatenate([self.r_init.ravel(), self.r_dyn.ravel(),
                               self.r_obs.ravel()])

    @property
    def objective(self) -> float:
        return 0.5 * float(self.r_init @ self.r_init
                           + np.einsum("ti,ti->", self.r_dyn, self.r_dyn)
                           + np.einsum("ti,ti->", self.r_obs, self.r_obs))

    def gradient(self) -> Array:
        """J^T r stacked as (N, d_x).

        Computed from unwhitened residuals: the init block contributes
        P0^{-1}(x_1 - mu), dynamics t contributes -A_t^T Q^{-1} e_t at t
        and +Q^{-1} e_t at t+1, measurements contribute -C_t^T R^{-1} u_t.
        """
        n = self.r_obs.shape[0]
        d = self.r_init.shape[0]
        g = np.zeros((n, d))
        g[0] = self.P0_inv @ (self.Lp0 @ self.r_init)
        w_obs = (self.r_obs @ self.Lr.T) @ self.R_inv   # rows: R^{-1} u_t
        g -= np.einsum("tji,tj->ti", self.C, w_obs)
        if n > 1:
            w_dyn = (self.r_dyn @ self.Lq.T) @ self.Q_inv  # rows: Q^{-1} e_t
            g[1:] += w_dyn
            g[:-1] -= np.einsum("tji,tj->ti", self.A, w_dyn)
        return g

    def normal_matrix(self) -> BlockTridiagonal:
        """J^T J as a block-tridiagonal matrix."""
        n = self.r_obs.shape[0]
        d = self.r_init.shape[0]
        diag = np.zeros((n, d, d))
        upper = np.zeros((max(n - 1, 0), d, d))
        diag[0] += self.P0_inv
        diag += np.einsum("tji,jk,tkl->til", self.C, self.R_inv, self.C)
        if n > 1:
            diag[:-1] += np.einsum("tji,jk,tkl->til", self.A, self.Q_inv, self.A)
            diag[1:] += self.Q_inv
            upper -= np.einsum("tji,jk->tik", self.A, self.Q_inv)
        return BlockTridiagonal(diag, upper)


def stack_residuals(model: StateSpaceModel, theta, y: Array,
                    x: Array) -> tuple[Array, ResidualStack]:
    """Whitened residual vector and Jacobian structure at trajectory ``x``.

    Returns ``(r, stack)`` where ``r`` is the flat stacked residual and
    ``stack`` carries the pieces needed for Gauss-Newton assembly.
    """
    if model.gaussian is None:
        raise FilterDivergedError(0, "model has no additive-Gaussian form")
    parts = model.gaussian(theta)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = y.shape[0]
    if x.shape[0] != n:
        raise FilterDivergedError(0, "trajectory/observation length mismatch")

    Lp0 = np.linalg.cholesky(parts.init_cov)
    Lq = np.linalg.cholesky(parts.trans_cov)
    Lr = np.linalg.cholesky(parts.obs_cov)

    def whiten(L, rows):
        if L.shape[0] == 1:
            return rows / L[0, 0]
        return np.linalg.solve(L, rows.T).T

    r_init = whiten(Lp0, (x[0] - parts.init_mean)[None, :])[0]
    if n > 1:
        e = x[1:] - parts.trans_mean(x[:-1])
        r_dyn = whiten(Lq, e)
        A = parts.trans_jac(x[:-1])
    else:
        r_dyn = np.zeros((0, x.shape[1]))
        A = np.zeros((0, x.shape[1], x.shape[1]))
    r_obs = whiten(Lr, y - parts.obs_mean(x))
    C = parts.obs_jac(x)

    stack = ResidualStack(
        r_init=r_init, r_dyn=r_dyn, r_obs=r_obs, A=A, C=C,
        P0_inv=np.linalg.inv(parts.init_cov),
        Q_inv=np.linalg.inv(parts.trans_cov),
        R_inv=np.linalg.inv(parts.obs_cov),
        Lp0=Lp0, Lq=Lq, Lr=Lr,
    )
    return stack.vector(), stack


def _objective_only(parts, y, x, Lp0, Lq, Lr) -> float:
    """0.5 ||r(x)||^2 without Jacobian assembly (line-search probes)."""
    def wsq(L, rows):
        if L.shape[0] == 1:
            z = rows / L[0, 0]
        else:
            z = np.linalg.solve(L, rows.T).T
        return float(np.einsum("ti,ti->", z, z))

    total = wsq(Lp0, (x[0] - parts.init_mean)[None, :])
    if x.shape[0] > 1:
        total += wsq(Lq, x[1:] - parts.trans_mean(x[:-1]))
    total += wsq(Lr, y - parts.obs_mean(x))
    return 0.5 * total


# ---------------------------------------------------------------------------
# Gauss-Newton driver
# ---------------------------------------------------------------------------

@dataclass
class MapResult:
    means: Array            # (N, d_x) MAP trajectory
    n_iters: int
    converged: bool
    objective: float
    grad_inf_norm: float
    normal: BlockTridiagonal  # Gauss-Newton matrix at the solution


def gauss_newton_map(model: StateSpaceModel, theta, y: Array,
                     x0: Optional[Array] = None, max_iters: int = 50,
                     grad_tol: float = 1e-6) -> MapResult:
    """Maximize the complete-data density over the state trajectory.

    Backtracking Gauss-Newton with an Armijo condition (c = 1e-4) on the
    half-squared-residual objective; exits when the gradient's infinity
    norm drops to ``grad_tol`` or after ``max_iters`` iterations. ``x0``
    defaults to the EKF filtered means. The objective never increases
    across accepted steps.

    When the predicted decrease of a full step falls below the float
    resolution of the objective, the iterate is a stationary point to
    machine precision and the solve counts as converged even if the
    gradient tolerance is out of reach at the problem's scale; raises
    :class:`NoProgressError` (carrying the last iterate) only when real
    predicted progress finds no acceptable step.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    theta = None if theta is None else np.asarray(theta, dtype=float)
    if x0 is None:
        x0 = ekf(model, theta, y).filt_means
    x = np.array(x0, dtype=float)
    parts = model.gaussian(theta)

    _, stack = stack_residuals(model, theta, y, x)
    phi = stack.objective
    g = stack.gradient()
    n_iters = 0
    converged = bool(np.max(np.abs(g)) <= grad_tol)
    while not converged and n_iters < max_iters:
        H = stack.normal_matrix()
        delta = H.cholesky().solve(-g)
        slope = float(np.einsum("ti,ti->", g, delta))
        alpha = 1.0
        stalled = False
        while True:
            trial = x + alpha * delta
            phi_trial = _objective_only(parts, y, trial,
                                        stack.Lp0, stack.Lq, stack.Lr)
            if np.isfinite(phi_trial) and phi_trial <= phi + ARMIJO_C * alpha * slope:
                break
            alpha *= 0.5
            if alpha < MIN_STEP:
                if abs(slope) <= 1e-12 * (1.0 + abs(phi)):
                    stalled = True
                    break
                raise NoProgressError(x)
        if stalled:
            converged = True
            break
        x = trial
        _, stack = stack_residuals(model, theta, y, x)
        assert stack.objective <= phi + 1e-9, "objective increased"
        phi = stack.objective
        g = stack.gradient()
        n_iters += 1
        converged = bool(np.max(np.abs(g)) <= grad_tol)

    return MapResult(means=x, n_iters=n_iters, converged=converged,
                     objective=phi, grad_inf_norm=float(np.max(np.abs(g))),
                     normal=stack.normal_matrix())


def extract_smoothed_covariances(H: BlockTridiagonal) -> tuple[Array, Array]:
    """Smoothed covariances from a Gauss-Newton normal matrix.

    Returns ``(covs, cross)`` where ``covs[t]`` approximates
    Cov(x_t | y_{1:N}) and ``cross[t]`` approximates
    Cov(x_t, x_{t+1} | y_{1:N}) — the diagonal and superdiagonal blocks of
    the inverse of ``H``.
    """
    return H.cholesky().selected_inverse()


def smoothed_moments_map(model: StateSpaceModel, theta, y: Array,
                         x0: Optional[Array] = None, max_iters: int = 50,
                         grad_tol: float = 1e-6) -> tuple[SmoothedMoments, MapResult]:
    """MAP trajectory plus Laplace-style covariances, as SmoothedMoments."""
    res = gauss_newton_map(model, theta, y, x0=x0, max_iters=max_iters,
                           grad_tol=grad_tol)
    covs, cross = extract_smoothed_covariances(res.normal)
    return SmoothedMoments(means=res.means, covs=covs, cross=cross), res
