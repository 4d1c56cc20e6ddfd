"""Shared fixtures: parametric linear-Gaussian families used across tests."""

from __future__ import annotations

import numpy as np
import pytest

from ssmnewton.models import LinearGaussianSpec, ParamJacobians


def scalar_spec(f=0.9, g=1.0, q=0.5, r=0.2, with_jacobians=True):
    """Scalar system; theta = (f, g, q, r) when jacobians are attached."""
    jac = None
    if with_jacobians:
        Z = np.zeros((4, 1, 1))
        dF, dG, dQ, dR = Z.copy(), Z.copy(), Z.copy(), Z.copy()
        dF[0, 0, 0] = 1.0
        dG[1, 0, 0] = 1.0
        dQ[2, 0, 0] = 1.0
        dR[3, 0, 0] = 1.0
        jac = ParamJacobians(dF=dF, dG=dG, dQ=dQ, dR=dR)
    return LinearGaussianSpec(
        F=np.array([[f]]), G=np.array([[g]]),
        Q=np.array([[q]]), R=np.array([[r]]),
        init_mean=np.zeros(1), init_cov=np.eye(1),
        jacobians=jac,
    )


def scalar_builder(theta):
    """Family builder matching :func:`scalar_spec`'s parameterization."""
    return scalar_spec(f=theta[0], g=theta[1], q=theta[2], r=theta[3])


SCALAR_THETA = np.array([0.9, 1.0, 0.5, 0.2])


def twod_spec(a=0.8, g1=1.0, with_jacobians=True):
    """Two-state, one-output system; theta = (a, g1)."""
    jac = None
    if with_jacobians:
        dF = np.zeros((2, 2, 2))
        dF[0, 0, 0] = 1.0
        dG = np.zeros((2, 1, 2))
        dG[1, 0, 0] = 1.0
        jac = ParamJacobians(dF=dF, dG=dG,
                             dQ=np.zeros((2, 2, 2)), dR=np.zeros((2, 1, 1)))
    return LinearGaussianSpec(
        F=np.array([[a, 0.2], [0.0, 0.5]]),
        G=np.array([[g1, 1.0]]),
        Q=np.array([[0.5, 0.1], [0.1, 0.3]]),
        R=np.array([[0.4]]),
        init_mean=np.array([0.0, 0.0]),
        init_cov=np.array([[1.0, 0.0], [0.0, 1.0]]),
        jacobians=jac,
    )


def twod_builder(theta):
    return twod_spec(a=theta[0], g1=theta[1])


TWOD_THETA = np.array([0.8, 1.0])


@pytest.fixture
def rng():
    return np.random.default_rng(20260822)
