"""Small shared numerics and RNG helpers."""

from __future__ import annotations

import hashlib

import numpy as np
from numpy.random import Generator

from .errors import SingularInnovationError

LOG_2PI = float(np.log(2.0 * np.pi))

#: Name recorded in run metadata so outputs document their bit stream.
GENERATOR_NAME = "numpy.random.Generator(PCG64)"


def as_generator(seed: int | Generator) -> Generator:
    """Return ``seed`` itself if it already is a Generator, else seed a PCG64."""
    if isinstance(seed, Generator):
        return seed
    return np.random.default_rng(int(seed))


def derive_seed(*parts) -> int:
    """Derive a 63-bit seed from a tuple of ints/strings via SHA-256.

    Stable across platforms and processes, which keeps replicate/method/
    iteration streams reproducible no matter how work is scheduled.
    """
    tag = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def chol_lower(a: np.ndarray, jitter: float = 1e-9, time_index: int = -1) -> np.ndarray:
    """Lower Cholesky factor with a single jitter retry.

    On failure adds ``jitter * I`` once and retries; a second failure raises
    :class:`SingularInnovationError` tagged with ``time_index``.
    """
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    bumped = a + jitter * np.eye(a.shape[0])
    try:
        return np.linalg.cholesky(bumped)
    except np.linalg.LinAlgError:
        raise SingularInnovationError(time_index) from None


def solve_lower(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve L x = b for lower-triangular L (small systems).

    Uses plain ``np.linalg.solve``; for the 1x1 and 2x2 blocks this package
    works with, the cost difference against a dedicated triangular solve is
    noise, and this avoids a scipy import in the hot path.
    """
    if L.shape[0] == 1:
        return b / L[0, 0]
    return np.linalg.solve(L, b)


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray,
               time_index: int = -1) -> float:
    """Log-density of N(mean, cov) at x, via Cholesky."""
    L = chol_lower(cov, time_index=time_index)
    z = solve_lower(L, x - mean)
    return float(-0.5 * (x.size * LOG_2PI + z @ z) - np.log(np.diag(L)).sum())


def ensure_psd(P: np.ndarray, floor: float = -1e-8, time_index: int = -1) -> np.ndarray:
    """Symmetrize and check a covariance, flooring tiny negative eigenvalues.

    Raises :class:`FilterDivergedError` if any eigenvalue is below ``floor``
    or the matrix is non-finite.
    """
    from .errors import FilterDivergedError

    P = symmetrize(P)
    if not np.all(np.isfinite(P)):
        raise FilterDivergedError(time_index, "non-finite covariance")
    if P.shape[0] == 1:
        v = P[0, 0]
        if v < floor:
            raise FilterDivergedError(time_index, f"covariance eigenvalue {v:.3e}")
        if v < 0.0:
            P = np.array([[0.0]])
        return P
    w = np.linalg.eigvalsh(P)
    if w[0] < floor:
        raise FilterDivergedError(time_index, f"covariance eigenvalue {w[0]:.3e}")
    if w[0] < 0.0:
        w2, V = np.linalg.eigh(P)
        P = (V * np.maximum(w2, 0.0)) @ V.T
        P = symmetrize(P)
    return P
