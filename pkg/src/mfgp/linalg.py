"""Dense covariance algebra.

Matrices are plain ``numpy.ndarray`` objects (float64, C order).  The
functions here operate on concrete values and implement the deterministic
jitter ladder; code that runs under ``jax`` tracing uses
:func:`jitter_cholesky`, which adds a fixed, non-differentiated jitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite

SYMMETRY_RTOL = 1e-10


@dataclass(frozen=True)
class JitterPolicy:
    """Escalating diagonal jitter: ``start * mean(diag(a)) * factor**i``."""

    start: float = 1e-8
    factor: float = 10.0
    max_retries: int = 6

    def ladder(self, a: np.ndarray) -> list[float]:
        scale = float(np.mean(np.diag(a)))
        if not np.isfinite(scale) or scale <= 0.0:
            scale = 1.0
        return [self.start * scale * self.factor**i for i in range(self.max_retries)]


DEFAULT_POLICY = JitterPolicy()


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def n(self) -> int:
        return self.lower.shape[0]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite 2-D float64 array."""
    out = np.asarray(a, dtype=np.float64)
    if out.ndim == 1:
        out = out[:, None]
    if out.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite entries")
    return out


def symmetrize(a: np.ndarray, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got {a.shape}")
    scale = max(float(np.max(np.abs(a))), np.finfo(float).tiny) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > rtol * scale:
        raise DimensionMismatch("matrix is not symmetric within tolerance")
    return 0.5 * (a + a.T)


def cholesky(a, policy: JitterPolicy = DEFAULT_POLICY) -> CholeskyFactor:
    a = symmetrize(a)
    try:
        return CholeskyFactor(np.linalg.cholesky(a), 0.0)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(a.shape[0])
    for jitter in policy.ladder(a):
        try:
            lower = np.linalg.cholesky(a + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        return CholeskyFactor(lower, jitter)
    raise NotPositiveDefinite(
        f"factorization failed after {policy.max_retries} jitter retries"
    )


def tri_solve(factor: CholeskyFactor, b, side: str = "lower") -> np.ndarray:
    """Solve ``L x = b`` (side='lower') or ``L^T x = b`` (side='lower-transpose')."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != factor.n:
        raise DimensionMismatch(f"factor is {factor.n}x{factor.n}, rhs has {b.shape[0]} rows")
    if side == "lower":
        return solve_triangular(factor.lower, b, lower=True)
    if side == "lower-transpose":
        return solve_triangular(factor.lower, b, lower=True, trans="T")
    raise ValueError(f"unknown side {side!r}")


def cho_solve(factor: CholeskyFactor, b) -> np.ndarray:
    """``A^{-1} b`` via two triangular solves."""
    return tri_solve(factor, tri_solve(factor, b, "lower"), "lower-transpose")


def log_det(factor: CholeskyFactor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(factor.lower))))


def jitter_cholesky(a, jitter: float):
    """Traceable Cholesky of ``a + jitter*I``; jitter is a constant."""
    return jnp.linalg.cholesky(a + jitter * jnp.eye(a.shape[-1], dtype=a.dtype))
