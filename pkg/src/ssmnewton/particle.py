"""Sampling back-end: bootstrap particle filter and trajectory smoothers.

The filter resamples multinomially at every step and keeps normalized
weights per time plus the ancestor indices, which is all the two smoothers
need: ancestral-path pair extraction (cheap, degenerate for early times)
and fixed-lag pair extraction (trace back only ``lag`` steps from each
time). Backward simulation draws whole trajectories against the backward
kernel by rejection with an exact-sampling fallback once few draws remain.

All randomness flows through a single ``numpy.random.Generator``, so equal
seeds give bit-identical output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DegenerateWeightsError, InvalidBoundError
from .models import StateSpaceModel
from .util import as_generator

Array = np.ndarray


@dataclass(frozen=True)
class ParticleSystem:
    """Output of one forward filtering pass.

    particles: (N, M, d_x) locations; norm_weights: (N, M) weights summing
    to one at each time; ancestors: (N, M) index of each particle's parent
    at the previous time (row 0 is its own index and is never used);
    loglik: likelihood estimate accumulated from the weight normalizers.
    """

    particles: Array
    norm_weights: Array
    ancestors: Array
    loglik: float

    @property
    def n_steps(self) -> int:
        return self.particles.shape[0]

    @property
    def n_particles(self) -> int:
        return self.particles.shape[1]


@dataclass(frozen=True)
class WeightedPairs:
    """Weighted smoothed samples of (x_t, x_{t+1}) for every time.

    x: (N, M, d_x) samples of x_t; x_next: (N-1, M, d_x) samples of
    x_{t+1} drawn jointly with row t of ``x``; weights: (N, M). The last
    time has no successor, so its row contributes marginal samples only.
    """

    x: Array
    x_next: Array
    weights: Array


@dataclass(frozen=True)
class SmootherConfig:
    """Which trajectory smoother to run behind the sampling estimator.

    kind: "fixed-lag" or "ffbsi". ``lag`` applies to the former;
    ``n_draws`` (backward trajectories) and ``exact_cutoff`` (pending-draw
    count at which rejection sampling gives way to exact sampling) to the
    latter. ``density_bound`` overrides the model-supplied transition
    density bound when set.
    """

    kind: str = "fixed-lag"
    lag: int = 12
    n_particles: int = 2000
    n_draws: int = 100
    exact_cutoff: int = 10
    density_bound: Optional[float] = None

    def validate(self) -> "SmootherConfig":
        if self.kind not in ("fixed-lag", "ffbsi"):
            raise ConfigError(f"unknown smoother kind {self.kind!r}")
        if self.lag < 1:
            raise ConfigError(f"lag must be positive, got {self.lag}")
        if self.n_particles < 2:
            raise ConfigError(
                f"need at least 2 particles, got {self.n_particles}")
        if self.n_draws < 1:
            raise ConfigError(
                f"need at least 1 backward draw, got {self.n_draws}")
        if not 0 <= self.exact_cutoff <= self.n_draws:
            raise ConfigError(
                f"exact_cutoff must lie in [0, {self.n_draws}], "
                f"got {self.exact_cutoff}")
        return self


def _multinomial(weights: Array, size: int, rng: np.random.Generator) -> Array:
    """``size`` categorical draws from normalized ``weights``."""
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, rng.random(size))


def bootstrap_pf(model: StateSpaceModel, theta, y: Array, n_particles: int,
                 seed: int | np.random.Generator) -> ParticleSystem:
    """Bootstrap particle filter with multinomial resampling at every step.

    Weights come from the observation density alone; the likelihood
    estimate adds log of the mean unnormalized weight at each time.

    Raises :class:`DegenerateWeightsError` (with the time index) when every
    particle has zero observation density.
    """
    if n_particles < 2:
        raise ConfigError(f"need at least 2 particles, got {n_particles}")
    theta = None if theta is None else np.asarray(theta, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = y.shape[0]
    rng = as_generator(seed)

    particles = np.empty((n, n_particles, model.d_x))
    norm_weights = np.empty((n, n_particles))
    ancestors = np.empty((n, n_particles), dtype=np.int64)
    ancestors[0] = np.arange(n_particles)

    loglik = 0.0
    x = model.sample_initial(theta, n_particles, rng)
    for t in range(n):
        if t > 0:
            idx = _multinomial(norm_weights[t - 1], n_particles, rng)
            ancestors[t] = idx
            x = model.sample_transition(theta, x[idx], rng)
        logw = model.observation_logdensity(theta, y[t], x)
        shift = np.max(logw)
        if not np.isfinite(shift):
            raise DegenerateWeightsError(t)
        w = np.exp(logw - shift)
        total = w.sum()
        if not (total > 0.0 and np.isfinite(total)):
            raise DegenerateWeightsError(t)
        loglik += shift + np.log(total / n_particles)
        particles[t] = x
        norm_weights[t] = w / total
    return ParticleSystem(particles=particles, norm_weights=norm_weights,
                          ancestors=ancestors, loglik=float(loglik))


# ---------------------------------------------------------------------------
# Pair extraction for smoothed-score estimation
# ---------------------------------------------------------------------------

def two_step_from_paths(ps: ParticleSystem) -> WeightedPairs:
    """Pairs read off the surviving ancestral paths, final-time weights.

    Cheap but degenerate for t far from the end: repeated resampling
    collapses the paths onto few (eventually one) common ancestors.
    """
    n, m = ps.norm_weights.shape
    lineage = np.empty((n, m), dtype=np.int64)
    lineage[n - 1] = np.arange(m)
    for t in range(n - 2, -1, -1):
        lineage[t] = ps.ancestors[t + 1][lineage[t + 1]]
    x = ps.particles[np.arange(n)[:, None], lineage]
    weights = np.broadcast_to(ps.norm_weights[n - 1], (n, m)).copy()
    return WeightedPairs(x=x, x_next=x[1:].copy(), weights=weights)


def pair_anchor_time(t: int, n: int, lag: int) -> int:
    """Time (0-indexed) whose weights and ancestry smooth the pair at t.

    One step past the later pair member, plus the lag, capped at the final
    time: min(n-1, t+1+lag).
    """
    return min(n - 1, t + 1 + lag)


def fixed_lag_pairs(ps: ParticleSystem, lag: int) -> WeightedPairs:
    """Pairs traced back from a per-time anchor only ``lag`` steps ahead.

    Row t carries the anchor-time weights and the states that anchor-time
    particles occupied at t and t+1. With ``lag >= n-1`` every anchor is
    the final time and the output equals :func:`two_step_from_paths`.
    """
    n, m = ps.norm_weights.shape
    if not 0 < lag <= n:
        raise ConfigError(f"lag must lie in [1, {n}], got {lag}")
    d = ps.particles.shape[2]
    x = np.empty((n, m, d))
    x_next = np.empty((max(n - 1, 0), m, d))
    weights = np.empty((n, m))

    x[n - 1] = ps.particles[n - 1]
    weights[n - 1] = ps.norm_weights[n - 1]
    for t in range(n - 1):
        anchor = pair_anchor_time(t, n, lag)
        idx = np.arange(m)
        for s in range(anchor, t + 1, -1):
            idx = ps.ancestors[s][idx]
        x_next[t] = ps.particles[t + 1][idx]
        x[t] = ps.particles[t][ps.ancestors[t + 1][idx]]
        weights[t] = ps.norm_weights[anchor]
    return WeightedPairs(x=x, x_next=x_next, weights=weights)


# ---------------------------------------------------------------------------
# Backward simulation
# ---------------------------------------------------------------------------

def ffbsi(model: StateSpaceModel, theta, ps: ParticleSystem, n_draws: int,
          exact_cutoff: int, density_bound: float,
          seed: int | np.random.Generator) -> Array:
    """Draw smoothed trajectories by backward simulation.

    Returns an (n_draws, N, d_x) array whose every state is one of the
    forward particles at its time. Each backward step proposes ancestors
    from the filter weights and accepts with probability (transition
    density / density_bound); once at most ``exact_cutoff`` draws remain
    pending (or the retry budget of M rounds is spent), the stragglers are
    sampled exactly from the normalized backward weights.

    Raises :class:`InvalidBoundError` if a transition density exceeding
    ``density_bound`` is encountered.
    """
    if n_draws < 1:
        raise ConfigError(f"need at least 1 backward draw, got {n_draws}")
    if not 0 <= exact_cutoff <= n_draws:
        raise ConfigError(
            f"exact_cutoff must lie in [0, {n_draws}], got {exact_cutoff}")
    if not (np.isfinite(density_bound) and density_bound > 0.0):
        raise InvalidBoundError(
            f"transition density bound must be positive and finite, "
            f"got {density_bound}")
    theta = None if theta is None else np.asarray(theta, dtype=float)
    rng = as_generator(seed)
    n, m, d = ps.particles.shape

    trajs = np.empty((n_draws, n, d))
    idx = _multinomial(ps.norm_weights[n - 1], n_draws, rng)
    trajs[:, n - 1] = ps.particles[n - 1][idx]

    log_bound = np.log(density_bound)
    for t in range(n - 2, -1, -1):
        w = ps.norm_weights[t]
        xt = ps.particles[t]
        x_next = trajs[:, t + 1]
        chosen = np.full(n_draws, -1, dtype=np.int64)
        pending = np.arange(n_draws)
        cum = np.cumsum(w)
        cum[-1] = 1.0
        rounds = 0
        while pending.size > exact_cutoff and rounds < m:
            prop = np.searchsorted(cum, rng.random(pending.size))
            logf = model.transition_logdensity(theta, x_next[pending],
                                               xt[prop])
            if np.any(logf > log_bound + 1e-9):
                raise InvalidBoundError(
                    f"transition density {np.exp(np.max(logf)):.6g} exceeds "
                    f"the declared bound {density_bound:.6g} at time {t}")
            accept = np.log(rng.random(pending.size)) < logf - log_bound
            chosen[pending[accept]] = prop[accept]
            pending = pending[~accept]
            rounds += 1
        for j in pending:
            logf = model.transition_logdensity(
                theta, np.broadcast_to(x_next[j], (m, d)), xt)
            if np.any(logf > log_bound + 1e-9):
                raise InvalidBoundError(
                    f"transition density {np.exp(np.max(logf)):.6g} exceeds "
                    f"the declared bound {density_bound:.6g} at time {t}")
            with np.errstate(divide="ignore"):
                logbw = np.log(w) + logf
            shift = np.max(logbw)
            if not np.isfinite(shift):
                raise DegenerateWeightsError(t)
            bw = np.exp(logbw - shift)
            chosen[j] = _multinomial(bw / bw.sum(), 1, rng)[0]
        trajs[:, t] = xt[chosen]
    return trajs


def transition_bound(model: StateSpaceModel, theta,
                     override: Optional[float] = None) -> float:
    """Transition density bound for rejection sampling.

    Uses ``override`` when given, otherwise the model's own hook; raises
    :class:`InvalidBoundError` when neither is available.
    """
    if override is not None:
        return float(override)
    if model.transition_density_bound is None:
        raise InvalidBoundError(
            f"model {model.name!r} declares no transition density bound; "
            f"set one in the smoother configuration")
    return float(model.transition_density_bound(
        None if theta is None else np.asarray(theta, dtype=float)))
