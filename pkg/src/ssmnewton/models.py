"""State-space model definitions.

A model is a bundle of samplers and log-densities over batches of states,
plus optional structure that the deterministic (linearization) estimators
exploit: an additive-Gaussian form for EKF/MAP smoothing, a smoothed-moment
gradient hook, and a linear-Gaussian description for exact special cases.

Shape conventions: a batch of states is ``(M, d_x)``, a batch of
observations ``(M, d_y)``, a single observation ``(d_y,)``, a parameter
vector ``(p,)``. All callables are vectorized over the batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidModelError, SimulationDivergedError
from .util import LOG_2PI, as_generator

Array = np.ndarray


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianParts:
    """Additive-Gaussian form of a model at a fixed parameter point.

    ``x_{t+1} = trans_mean(x_t) + v_t`` with ``v_t ~ N(0, trans_cov)`` and
    ``y_t = obs_mean(x_t) + e_t`` with ``e_t ~ N(0, obs_cov)``; the initial
    state is ``N(init_mean, init_cov)`` and carries no parameters.
    """

    init_mean: Array
    init_cov: Array
    trans_cov: Array
    obs_cov: Array
    trans_mean: Callable[[Array], Array]
    trans_jac: Callable[[Array], Array]
    obs_mean: Callable[[Array], Array]
    obs_jac: Callable[[Array], Array]


@dataclass(frozen=True)
class ParamJacobians:
    """Stacked derivatives of (F, G, Q, R) with respect to each parameter."""

    dF: Array  # (p, d_x, d_x)
    dG: Array  # (p, d_y, d_x)
    dQ: Array  # (p, d_x, d_x)
    dR: Array  # (p, d_y, d_y)

    @property
    def n_params(self) -> int:
        return self.dF.shape[0]


@dataclass(frozen=True)
class LinearGaussianSpec:
    """Linear-Gaussian state-space system at one parameter point.

    ``x_{t+1} = F x_t + v_t``, ``y_t = G x_t + e_t``, ``x_1 ~ N(init_mean,
    init_cov)``. ``jacobians`` (optional) differentiates the matrices with
    respect to a parameter vector, enabling exact score computation.
    """

    F: Array
    G: Array
    Q: Array
    R: Array
    init_mean: Array
    init_cov: Array
    jacobians: Optional[ParamJacobians] = None

    @property
    def d_x(self) -> int:
        return self.F.shape[0]

    @property
    def d_y(self) -> int:
        return self.G.shape[0]

    def validate(self) -> "LinearGaussianSpec":
        """Check shapes, symmetry, and positive-definiteness. Raises
        :class:`InvalidModelError` on any violation; returns self."""
        d_x, d_y = self.d_x, self.d_y
        shapes = {
            "F": (self.F, (d_x, d_x)),
            "G": (self.G, (d_y, d_x)),
            "Q": (self.Q, (d_x, d_x)),
            "R": (self.R, (d_y, d_y)),
            "init_mean": (self.init_mean, (d_x,)),
            "init_cov": (self.init_cov, (d_x, d_x)),
        }
        for name, (arr, want) in shapes.items():
            if arr.shape != want:
                raise InvalidModelError(f"{name} has shape {arr.shape}, expected {want}")
            if not np.all(np.isfinite(arr)):
                raise InvalidModelError(f"{name} contains non-finite entries")
        for name, arr in (("Q", self.Q), ("R", self.R), ("init_cov", self.init_cov)):
            if not np.allclose(arr, arr.T, atol=1e-12):
                raise InvalidModelError(f"{name} is not symmetric")
            try:
                np.linalg.cholesky(arr)
            except np.linalg.LinAlgError:
                raise InvalidModelError(f"{name} is not positive definite") from None
        if self.jacobians is not None:
            j = self.jacobians
            p = j.n_params
            for name, arr, want in (("dF", j.dF, (p, d_x, d_x)),
                                    ("dG", j.dG, (p, d_y, d_x)),
                                    ("dQ", j.dQ, (p, d_x, d_x)),
                                    ("dR", j.dR, (p, d_y, d_y))):
                if arr.shape != want:
                    raise InvalidModelError(f"{name} has shape {arr.shape}, expected {want}")
        return self


@dataclass(frozen=True)
class StateSpaceModel:
    """Behavioral interface consumed by filters, smoothers, and estimators.

    Required pieces are the samplers and log-densities; the optional hooks
    unlock the linearization path (``gaussian``), model-specific smoothed-
    moment gradients (``smoothed_gradient``), exact linear structure
    (``linear_spec``), and rejection-sampling bounds
    (``transition_density_bound``).
    """

    name: str
    d_x: int
    d_y: int
    n_params: int
    sample_initial: Callable[[Array, int, np.random.Generator], Array]
    sample_transition: Callable[[Array, Array, np.random.Generator], Array]
    sample_observation: Callable[[Array, Array, np.random.Generator], Array]
    transition_logdensity: Callable[[Array, Array, Array], Array]
    observation_logdensity: Callable[[Array, Array, Array], Array]
    xi: Callable[[Array, Optional[Array], Array, Array], Array]
    gaussian: Optional[Callable[[Array], GaussianParts]] = None
    smoothed_gradient: Optional[Callable] = None
    linear_spec: Optional[Callable[[Array], LinearGaussianSpec]] = None
    transition_density_bound: Optional[Callable[[Array], float]] = None


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def simulate(model: StateSpaceModel, theta, n: int,
             seed: int | np.random.Generator) -> tuple[Array, Array]:
    """Draw a length-``n`` trajectory and observation sequence.

    Parameters
    ----------
    model : StateSpaceModel
    theta : array_like, shape (p,)
    n : int
        Number of time steps (n >= 1).
    seed : int or numpy Generator
        Same seed, same arguments => bit-identical output.

    Returns
    -------
    states : ndarray, shape (n, d_x)
    obs : ndarray, shape (n, d_y)
    """
    if n < 1:
        raise InvalidModelError(f"n must be >= 1, got {n}")
    theta = np.asarray(theta, dtype=float)
    rng = as_generator(seed)
    states = np.empty((n, model.d_x))
    obs = np.empty((n, model.d_y))
    x = model.sample_initial(theta, 1, rng)
    for t in range(n):
        if t > 0:
            x = model.sample_transition(theta, x, rng)
        if not np.all(np.isfinite(x)):
            raise SimulationDivergedError(t, "state")
        y = model.sample_observation(theta, x, rng)
        if not np.all(np.isfinite(y)):
            raise SimulationDivergedError(t, "observation")
        states[t] = x[0]
        obs[t] = y[0]
    return states, obs


# ---------------------------------------------------------------------------
# Benchmark model 1: arctan dynamics, affine measurement
# ---------------------------------------------------------------------------

_M1_Q = 1.0
_M1_R = 0.01


def make_model1() -> StateSpaceModel:
    """Scalar benchmark model with parameter-free arctan dynamics.

    x_{t+1} = arctan(x_t) + v_t,  v_t ~ N(0, 1)
    y_t     = th1 * x_t + th2 + e_t,  e_t ~ N(0, 0.1^2)
    x_1 ~ N(0, 1). Parameters theta = (th1, th2).

    Both measurement parameters enter linearly, so the smoothed-moment
    gradient is the exact Gaussian expectation of the score integrand.
    """

    def sample_initial(theta, m, rng):
        return rng.standard_normal((m, 1))

    def sample_transition(theta, x, rng):
        return np.arctan(x) + rng.standard_normal(x.shape)

    def sample_observation(theta, x, rng):
        return theta[0] * x + theta[1] + 0.1 * rng.standard_normal(x.shape)

    def transition_logdensity(theta, x_next, x):
        r = x_next[:, 0] - np.arctan(x[:, 0])
        return -0.5 * (LOG_2PI + r * r / _M1_Q)

    def observation_logdensity(theta, y, x):
        r = y[0] - theta[0] * x[:, 0] - theta[1]
        return -0.5 * (LOG_2PI + np.log(_M1_R) + r * r / _M1_R)

    def xi(theta, x_next, x, y):
        # Transition density carries no parameters; only the measurement
        # part contributes to the score integrand.
        r = (y[0] - theta[0] * x[:, 0] - theta[1]) / _M1_R
        return np.stack([x[:, 0] * r, r], axis=1)

    def smoothed_gradient(theta, y, sm):
        m = sm.means[:, 0]
        P = sm.covs[:, 0, 0]
        resid = y[:, 0] - theta[0] * m - theta[1]
        g1 = (m * (y[:, 0] - theta[1]) - theta[0] * (P + m * m)) / _M1_R
        g2 = resid / _M1_R
        return np.stack([g1, g2], axis=1)

    def gaussian(theta):
        th1, th2 = float(theta[0]), float(theta[1])
        return GaussianParts(
            init_mean=np.zeros(1),
            init_cov=np.eye(1),
            trans_cov=np.array([[_M1_Q]]),
            obs_cov=np.array([[_M1_R]]),
            trans_mean=np.arctan,
            trans_jac=lambda x: (1.0 / (1.0 + x[:, 0] ** 2))[:, None, None],
            obs_mean=lambda x: th1 * x + th2,
            obs_jac=lambda x: np.full((x.shape[0], 1, 1), th1),
        )

    return StateSpaceModel(
        name="model1", d_x=1, d_y=1, n_params=2,
        sample_initial=sample_initial,
        sample_transition=sample_transition,
        sample_observation=sample_observation,
        transition_logdensity=transition_logdensity,
        observation_logdensity=observation_logdensity,
        xi=xi,
        gaussian=gaussian,
        smoothed_gradient=smoothed_gradient,
        transition_density_bound=lambda theta: 1.0 / np.sqrt(2.0 * np.pi * _M1_Q),
    )


# ---------------------------------------------------------------------------
# Benchmark model 2: scaled arctan dynamics, scaled measurement
# ---------------------------------------------------------------------------

_M2_Q = 1.0
_M2_R = 0.01


def make_model2() -> StateSpaceModel:
    """Scalar benchmark model with a dynamics parameter.

    x_{t+1} = th1 * arctan(x_t) + v_t,  v_t ~ N(0, 1)
    y_t     = th2 * x_t + e_t,          e_t ~ N(0, 0.1^2)
    x_1 ~ N(0, 1). Parameters theta = (th1, th2).

    th2 enters linearly (exact smoothed expectation); th1 sits inside the
    nonlinear dynamics, so its smoothed-moment gradient is the plug-in
    evaluation of the score integrand at the smoothed means.
    """

    def sample_initial(theta, m, rng):
        return rng.standard_normal((m, 1))

    def sample_transition(theta, x, rng):
        return theta[0] * np.arctan(x) + rng.standard_normal(x.shape)

    def sample_observation(theta, x, rng):
        return theta[1] * x + 0.1 * rng.standard_normal(x.shape)

    def transition_logdensity(theta, x_next, x):
        r = x_next[:, 0] - theta[0] * np.arctan(x[:, 0])
        return -0.5 * (LOG_2PI + r * r / _M2_Q)

    def observation_logdensity(theta, y, x):
        r = y[0] - theta[1] * x[:, 0]
        return -0.5 * (LOG_2PI + np.log(_M2_R) + r * r / _M2_R)

    def xi(theta, x_next, x, y):
        out = np.zeros((x.shape[0], 2))
        if x_next is not None:
            a = np.arctan(x[:, 0])
            out[:, 0] = a * (x_next[:, 0] - theta[0] * a) / _M2_Q
        out[:, 1] = x[:, 0] * (y[0] - theta[1] * x[:, 0]) / _M2_R
        return out

    def smoothed_gradient(theta, y, sm):
        m = sm.means[:, 0]
        P = sm.covs[:, 0, 0]
        n = m.shape[0]
        out = np.zeros((n, 2))
        a = np.arctan(m[:-1])
        out[:-1, 0] = a * (m[1:] - theta[0] * a) / _M2_Q
        out[:, 1] = (m * y[:, 0] - theta[1] * (P + m * m)) / _M2_R
        return out

    def gaussian(theta):
        th1, th2 = float(theta[0]), float(theta[1])
        return GaussianParts(
            init_mean=np.zeros(1),
            init_cov=np.eye(1),
            trans_cov=np.array([[_M2_Q]]),
            obs_cov=np.array([[_M2_R]]),
            trans_mean=lambda x: th1 * np.arctan(x),
            trans_jac=lambda x: (th1 / (1.0 + x[:, 0] ** 2))[:, None, None],
            obs_mean=lambda x: th2 * x,
            obs_jac=lambda x: np.full((x.shape[0], 1, 1), th2),
        )

    return StateSpaceModel(
        name="model2", d_x=1, d_y=1, n_params=2,
        sample_initial=sample_initial,
        sample_transition=sample_transition,
        sample_observation=sample_observation,
        transition_logdensity=transition_logdensity,
        observation_logdensity=observation_logdensity,
        xi=xi,
        gaussian=gaussian,
        smoothed_gradient=smoothed_gradient,
        transition_density_bound=lambda theta: 1.0 / np.sqrt(2.0 * np.pi * _M2_Q),
    )


# ---------------------------------------------------------------------------
# Linear-Gaussian wrappers
# ---------------------------------------------------------------------------

def _batched_mvn_logpdf(resid: Array, cov: Array) -> Array:
    """Gaussian log-density of rows of ``resid`` under N(0, cov)."""
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, resid.T).T if cov.shape[0] > 1 else resid / L[0, 0]
    quad = np.einsum("md,md->m", z, z)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * (resid.shape[1] * LOG_2PI + logdet + quad)


def _lgss_xi(spec: LinearGaussianSpec, x_next, x, y) -> Array:
    """Score integrand of a linear-Gaussian system from its jacobians."""
    j = spec.jacobians
    m = x.shape[0]
    if j is None:
        return np.zeros((m, 0))
    p = j.n_params
    out = np.zeros((m, p))
    Ri = np.linalg.inv(spec.R)
    u = y[None, :] - x @ spec.G.T                      # (m, d_y)
    if x_next is not None:
        Qi = np.linalg.inv(spec.Q)
        e = x_next - x @ spec.F.T                      # (m, d_x)
    for k in range(p):
        gk = np.zeros(m)
        # measurement part
        dRu = u @ (Ri @ j.dR[k] @ Ri).T
        gk += -0.5 * np.trace(Ri @ j.dR[k]) \
            + np.einsum("md,md->m", x @ j.dG[k].T, u @ Ri.T) \
            + 0.5 * np.einsum("md,md->m", u, dRu)
        # transition part
        if x_next is not None:
            dQe = e @ (Qi @ j.dQ[k] @ Qi).T
            gk += -0.5 * np.trace(Qi @ j.dQ[k]) \
                + np.einsum("md,md->m", x @ j.dF[k].T, e @ Qi.T) \
                + 0.5 * np.einsum("md,md->m", e, dQe)
        out[:, k] = gk
    return out


def make_linear_gaussian(spec: LinearGaussianSpec,
                         name: str = "linear-gaussian") -> StateSpaceModel:
    """Wrap a fixed linear-Gaussian system as a StateSpaceModel.

    The wrapper ignores the theta argument of every callable (the system is
    a single point); its xi comes from ``spec.jacobians`` and is empty when
    no jacobians are given.
    """
    spec.validate()
    return make_linear_gaussian_family(lambda theta: spec,
                                       0 if spec.jacobians is None
                                       else spec.jacobians.n_params,
                                       name)


def make_linear_gaussian_family(builder: Callable[[Array], LinearGaussianSpec],
                                n_params: int,
                                name: str = "linear-gaussian") -> StateSpaceModel:
    """Parametric family of linear-Gaussian systems.

    ``builder(theta)`` must return the system at ``theta`` together with
    jacobians taken at that point (when scores are needed).
    """
    probe = builder(np.zeros(n_params))
    d_x, d_y = probe.d_x, probe.d_y

    def sample_initial(theta, m, rng):
        s = builder(theta)
        L = np.linalg.cholesky(s.init_cov)
        return s.init_mean[None, :] + rng.standard_normal((m, d_x)) @ L.T

    def sample_transition(theta, x, rng):
        s = builder(theta)
        L = np.linalg.cholesky(s.Q)
        return x @ s.F.T + rng.standard_normal(x.shape) @ L.T

    def sample_observation(theta, x, rng):
        s = builder(theta)
        L = np.linalg.cholesky(s.R)
        return x @ s.G.T + rng.standard_normal((x.shape[0], d_y)) @ L.T

    def transition_logdensity(theta, x_next, x):
        s = builder(theta)
        return _batched_mvn_logpdf(x_next - x @ s.F.T, s.Q)

    def observation_logdensity(theta, y, x):
        s = builder(theta)
        return _batched_mvn_logpdf(y[None, :] - x @ s.G.T, s.R)

    def xi(theta, x_next, x, y):
        return _lgss_xi(builder(theta), x_next, x, y)

    def gaussian(theta):
        s = builder(theta)
        return GaussianParts(
            init_mean=s.init_mean, init_cov=s.init_cov,
            trans_cov=s.Q, obs_cov=s.R,
            trans_mean=lambda x: x @ s.F.T,
            trans_jac=lambda x: np.broadcast_to(s.F, (x.shape[0], d_x, d_x)),
            obs_mean=lambda x: x @ s.G.T,
            obs_jac=lambda x: np.broadcast_to(s.G, (x.shape[0], d_y, d_x)),
        )

    def transition_density_bound(theta):
        s = builder(theta)
        L = np.linalg.cholesky(s.Q)
        return float(np.exp(-0.5 * d_x * LOG_2PI - np.log(np.diag(L)).sum()))

    return StateSpaceModel(
        name=name, d_x=d_x, d_y=d_y, n_params=n_params,
        sample_initial=sample_initial,
        sample_transition=sample_transition,
        sample_observation=sample_observation,
        transition_logdensity=transition_logdensity,
        observation_logdensity=observation_logdensity,
        xi=xi,
        gaussian=gaussian,
        linear_spec=builder,
        transition_density_bound=transition_density_bound,
    )


#: Registry used by the CLI.
BENCHMARK_MODELS: dict[str, Callable[[], StateSpaceModel]] = {
    "model1": make_model1,
    "model2": make_model2,
}
