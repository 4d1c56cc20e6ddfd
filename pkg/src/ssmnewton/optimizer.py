"""Newton-type maximum-likelihood solvers over state-space models.

Four methods share one iteration shell and trace contract. ALG2 draws its
derivatives from the linearization bundle (EKF loglik, smoothed-moment
score, empirical curvature); ALG3FL and ALG3FFBSi draw them from particle
smoothers with a fresh filter seed each iteration; NUM is a quasi-Newton
baseline on the EKF loglik with finite-difference gradients.

Deterministic back-ends (ALG2, NUM) pair with a backtracking line search
and stop when the gradient sup-norm falls under ``grad_tol``; stochastic
back-ends use the ``k**-exponent`` schedule and stop after three
consecutive parameter moves under ``param_tol``. When a derivative
back-end raises, the exception is re-raised with ``iteration`` and
``theta`` attributes attached so drivers can report where a run died.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from .errors import ConfigError, EstimationError, ZeroStepError
from .inference import (DerivativeEstimate, finite_difference_gradient,
                        linearization_derivatives, make_negative_definite,
                        sampling_derivatives)
from .kalman import ekf
from .models import StateSpaceModel
from .particle import SmootherConfig
from .util import derive_seed

Array = np.ndarray

METHODS = ("ALG2", "ALG3FL", "ALG3FFBSi", "NUM")
DETERMINISTIC_METHODS = ("ALG2", "NUM")

ARMIJO_C = 1e-4
MIN_STEP = 2.0 ** -20
DEFAULT_EXPONENT = 2.0 / 3.0

_METHOD_KIND = {"ALG3FL": "fixed-lag", "ALG3FFBSi": "ffbsi"}


# ---------------------------------------------------------------------------
# Configuration and trace containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    """Solver settings; ``None`` fields resolve to per-method defaults.

    ``max_iters`` counts parameter updates, so a solve records at most
    ``max_iters + 1`` trace entries. Zero is allowed and returns the
    initial point after evaluating it once.
    """

    method: str
    theta0: Array
    max_iters: Optional[int] = None
    step_policy: Optional[str] = None
    step_exponent: float = DEFAULT_EXPONENT
    grad_tol: float = 1e-3
    param_tol: float = 1e-4
    smoother: Optional[SmootherConfig] = None
    seed: int = 0

    def normalized(self) -> "OptimizerConfig":
        """Fill per-method defaults and validate; returns a complete copy."""
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        deterministic = self.method in DETERMINISTIC_METHODS
        max_iters = self.max_iters
        if max_iters is None:
            max_iters = 100 if deterministic else 500
        if max_iters < 0:
            raise ConfigError(f"max_iters must be >= 0, got {max_iters}")
        policy = self.step_policy
        if policy is None:
            policy = "backtracking" if deterministic else "stochastic"
        if policy not in ("backtracking", "stochastic"):
            raise ConfigError(f"unknown step policy {policy!r}")
        if not (self.grad_tol > 0 and self.param_tol > 0):
            raise ConfigError("tolerances must be positive")
        if not (np.ndim(self.theta0) == 1 and np.all(np.isfinite(self.theta0))):
            raise ConfigError("theta0 must be a finite parameter vector")
        if self.step_exponent <= 0:
            raise ConfigError("step exponent must be positive")
        smoother = self.smoother
        if self.method in _METHOD_KIND:
            kind = _METHOD_KIND[self.method]
            if smoother is None:
                smoother = SmootherConfig(kind=kind)
            elif smoother.kind != kind:
                raise ConfigError(
                    f"method {self.method} needs a {kind!r} smoother, "
                    f"got {smoother.kind!r}")
            smoother.validate()
        return replace(self, max_iters=max_iters, step_policy=policy,
                       smoother=smoother,
                       theta0=np.asarray(self.theta0, dtype=float))


@dataclass(frozen=True)
class TraceEntry:
    """One visited iterate.

    ``step`` is the length used to leave this point (0.0 on the last
    entry) and ``note`` flags irregular iterations ("gradient-step" when
    the repaired curvature could not be inverted, "zero-step" when the
    line search gave up here).
    """

    k: int
    theta: Array
    loglik: float
    grad_norm: float
    step: float
    seconds: float
    note: str = ""


@dataclass(frozen=True)
class NewtonTrace:
    iterates: List[TraceEntry]
    final: Array
    converged: bool
    total_time: float


# ---------------------------------------------------------------------------
# Step-length policies
# ---------------------------------------------------------------------------

def step_length(policy: str, k: int, theta: Array, direction: Array,
                loglik_fn: Callable[[Array], float],
                gradient: Optional[Array] = None,
                exponent: float = DEFAULT_EXPONENT,
                base_loglik: Optional[float] = None) -> float:
    """Pick the length of update ``k`` (1-based) along ``direction``.

    The stochastic schedule returns ``k**-exponent`` without touching the
    objective. Backtracking halves from 1 down to ``2**-20`` until the
    objective improves on the starting value (by the Armijo margin when
    ``gradient`` is supplied) and raises :class:`ZeroStepError` when no
    trial qualifies. ``base_loglik`` may pass a precomputed starting value.
    """
    if policy == "stochastic":
        if k < 1:
            raise ConfigError(f"schedule index must be >= 1, got {k}")
        return float(k) ** -exponent
    if policy != "backtracking":
        raise ConfigError(f"unknown step policy {policy!r}")
    if not np.all(np.isfinite(direction)):
        raise ConfigError("search direction must be finite")
    base = loglik_fn(theta) if base_loglik is None else base_loglik
    slope = float(gradient @ direction) if gradient is not None else 0.0
    eps = 1.0
    while eps >= MIN_STEP:
        trial = loglik_fn(theta + eps * direction)
        if np.isfinite(trial) and trial >= base + ARMIJO_C * eps * slope and trial > base - 1e-12:
            return eps
        eps *= 0.5
    raise ZeroStepError("backtracking exhausted without an acceptable step")


# ---------------------------------------------------------------------------
# Newton iteration over pluggable derivative estimates
# ---------------------------------------------------------------------------

def _attach_context(err: EstimationError, k: int, theta: Array) -> EstimationError:
    err.iteration = k
    err.theta = np.array(theta)
    return err

def _ascent_direction(est: DerivativeEstimate):
    """Newton ascent direction from the repaired curvature.

    Falls back to the sup-norm-scaled gradient when the repaired matrix
    cannot be inverted cleanly; the second return flags that case.
    """
    if np.all(np.isfinite(est.hessian)):
        repaired = make_negative_definite(est.hessian)
        try:
            direction = np.linalg.solve(repaired, -est.gradient)
            if np.all(np.isfinite(direction)):
                return direction, False
        except np.linalg.LinAlgError:
            pass
    scale = np.max(np.abs(est.gradient))
    if scale == 0.0 or not np.isfinite(scale):
        raise ConfigError("cannot form a search direction from a zero or "
                          "non-finite gradient")
    return est.gradient / scale, True


def newton_solve(model: StateSpaceModel, y: Array,
                 cfg: OptimizerConfig) -> NewtonTrace:
    """Run the configured method on one observation record."""
    cfg = cfg.normalized()
    if cfg.method == "NUM":
        return quasi_newton_num(model, y, cfg)

    deterministic = cfg.method == "ALG2"

    def derivatives(theta: Array, k: int) -> DerivativeEstimate:
        if deterministic:
            return linearization_derivatives(model, theta, y)
        return sampling_derivatives(model, theta, y, cfg.smoother,
                                    seed=derive_seed(cfg.seed, k))

    def cheap_loglik(theta: Array) -> float:
        return ekf(model, theta, y).loglik

    start = time.perf_counter()
    entries: List[TraceEntry] = []
    theta = cfg.theta0.copy()
    converged = False
    small_streak = 0
    tick = start

    for k in range(cfg.max_iters + 1):
        try:
            est = derivatives(theta, k)
        except EstimationError as err:
            raise _attach_context(err, k, theta)
        grad_norm = float(np.max(np.abs(est.gradient))) if est.gradient.size else 0.0

        if deterministic and entries:
            # Backtracking accepted this point against the previous loglik.
            assert est.loglik >= entries[-1].loglik - 1e-9, \
                "line-searched loglik decreased"

        def record(step: float, note: str = "") -> None:
            nonlocal tick
            now = time.perf_counter()
            entries.append(TraceEntry(k=k, theta=theta.copy(),
                                      loglik=float(est.loglik),
                                      grad_norm=grad_norm, step=step,
                                      seconds=now - tick, note=note))
            tick = now

        if deterministic and grad_norm <= cfg.grad_tol:
            record(0.0)
            converged = True
            break
        if not deterministic and small_streak >= 3:
            record(0.0)
            converged = True
            break
        if k == cfg.max_iters:
            record(0.0)
            break

        direction, used_gradient = _ascent_direction(est)
        note = "gradient-step" if used_gradient else ""
        if deterministic:
            try:
                eps = step_length("backtracking", k + 1, theta, direction,
                                  cheap_loglik, gradient=est.gradient,
                                  base_loglik=est.loglik)
            except ZeroStepError:
                record(0.0, note="zero-step")
                break
        else:
            eps = step_length("stochastic", k + 1, theta, direction,
                              cheap_loglik, exponent=cfg.step_exponent)
        record(eps, note=note)
        new_theta = theta + eps * direction
        if float(np.max(np.abs(new_theta - theta))) <= cfg.param_tol:
            small_streak += 1
        else:
            small_streak = 0
        theta = new_theta

    return NewtonTrace(iterates=entries, final=entries[-1].theta,
                       converged=converged,
                       total_time=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Quasi-Newton baseline on the EKF loglik
# ---------------------------------------------------------------------------

def quasi_newton_num(model: StateSpaceModel, y: Array,
                     cfg: OptimizerConfig) -> NewtonTrace:
    """Maximize the EKF loglik with FD gradients and a rank-one inverse-
    curvature approximation (symmetric update, curvature-guarded)."""
    cfg = cfg.normalized()
    if cfg.method != "NUM":
        raise ConfigError(f"quasi_newton_num got method {cfg.method!r}")

    def loglik(theta: Array) -> float:
        return ekf(model, theta, y).loglik

    start = time.perf_counter()
    entries: List[TraceEntry] = []
    p = cfg.theta0.size
    theta = cfg.theta0.copy()
    inv_curv = np.eye(p)          # approximates (-hessian)^{-1}
    prev: Optional[tuple] = None  # (theta, gradient) at the previous iterate
    converged = False
    tick = start

    for k in range(cfg.max_iters + 1):
        try:
            ll = loglik(theta)
            grad = finite_difference_gradient(loglik, theta)
        except EstimationError as err:
            raise _attach_context(err, k, theta)
        grad_norm = float(np.max(np.abs(grad))) if grad.size else 0.0

        if entries:
            assert ll >= entries[-1].loglik - 1e-9, \
                "line-searched loglik decreased"

        if prev is not None:
            s = theta - prev[0]
            u = prev[1] - grad          # change of the negative gradient
            resid = s - inv_curv @ u
            denom = float(resid @ u)
            # Rank-one update only when the denominator is safely away
            # from zero, the standard guard against blow-up.
            if abs(denom) > 1e-8 * np.linalg.norm(resid) * np.linalg.norm(u):
                inv_curv = inv_curv + np.outer(resid, resid) / denom

        def record(step: float, note: str = "") -> None:
            nonlocal tick
            now = time.perf_counter()
            entries.append(TraceEntry(k=k, theta=theta.copy(), loglik=float(ll),
                                      grad_norm=grad_norm, step=step,
                                      seconds=now - tick, note=note))
            tick = now

        if grad_norm <= cfg.grad_tol:
            record(0.0)
            converged = True
            break
        if k == cfg.max_iters:
            record(0.0)
            break

        direction = inv_curv @ grad
        note = ""
        if not np.all(np.isfinite(direction)) or float(direction @ grad) <= 0.0:
            # The approximation lost positivity; restart it from identity.
            inv_curv = np.eye(p)
            direction = grad / grad_norm
            note = "gradient-step"
        try:
            eps = step_length("backtracking", k + 1, theta, direction,
                              loglik, gradient=grad, base_loglik=ll)
        except ZeroStepError:
            record(0.0, note="zero-step")
            break
        record(eps, note=note)
        prev = (theta, grad)
        theta = theta + eps * direction

    return NewtonTrace(iterates=entries, final=entries[-1].theta,
                       converged=converged,
                       total_time=time.perf_counter() - start)
