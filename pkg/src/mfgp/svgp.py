"""Whitened sparse variational GP layer.

The variational distribution lives on ``v = L^-1 u`` with ``L = chol(K_zz)``,
so ``q(v) = N(mu, S)`` with ``S = Lq Lq^T`` per output column and the prior on
``v`` is standard normal.  The lower-triangular factors ``Lq`` are stored
packed row-wise with a log-diagonal so every unconstrained vector is valid.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np

from .errors import DimensionMismatch, NegativeVariance
from .linalg import jitter_cholesky

NEG_VAR_TOL = 1e-10
DEFAULT_JITTER = 1e-6


@lru_cache(maxsize=None)
def _tril(m: int):
    rows, cols = np.tril_indices(m)
    return rows, cols, rows == cols


def packed_size(m: int) -> int:
    return m * (m + 1) // 2


def unpack_q_sqrt(packed, m: int):
    """``(D_out, M(M+1)/2)`` unconstrained -> ``(D_out, M, M)`` lower factors."""
    rows, cols, diag = _tril(m)
    packed = jnp.atleast_2d(packed)
    vals = jnp.where(diag, jnp.exp(packed), packed)
    out = jnp.zeros((packed.shape[0], m, m), dtype=packed.dtype)
    return out.at[:, rows, cols].set(vals)


def pack_q_sqrt(factors) -> np.ndarray:
    """Inverse of :func:`unpack_q_sqrt`; diagonals must be positive."""
    factors = np.asarray(factors, dtype=np.float64)
    if factors.ndim == 2:
        factors = factors[None]
    m = factors.shape[-1]
    rows, cols, diag = _tril(m)
    vals = factors[:, rows, cols]
    if np.any(vals[:, diag] <= 0):
        raise ValueError("variational factor needs a strictly positive diagonal")
    return np.where(diag, np.log(np.where(diag, vals, 1.0)), vals)


@dataclass(frozen=True)
class SvgpLayer:
    """Structure of one layer; parameters are passed separately as a dict.

    Parameter dict keys: ``kernel`` (kernel params), ``q_mu`` (M x D_out),
    ``q_sqrt`` (D_out x M(M+1)/2 packed) and ``z`` (M x input dim).
    """

    kernel: object
    num_inducing: int
    d_out: int = 1
    jitter: float = DEFAULT_JITTER

    @property
    def input_dim(self) -> int:
        return self.kernel.input_dim

    def init_params(self, z, q_mu=None, q_sqrt_scale: float = 1e-5, kernel_params=None) -> dict:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.num_inducing, self.input_dim):
            raise DimensionMismatch(
                f"inducing inputs must be {(self.num_inducing, self.input_dim)}, got {z.shape}")
        m = self.num_inducing
        if q_mu is None:
            q_mu = np.zeros((m, self.d_out))
        q_mu = np.asarray(q_mu, dtype=np.float64).reshape(m, self.d_out)
        eye = np.broadcast_to(q_sqrt_scale * np.eye(m), (self.d_out, m, m))
        return {
            "kernel": kernel_params if kernel_params is not None else self.kernel.init_params(),
            "q_mu": q_mu,
            "q_sqrt": pack_q_sqrt(eye),
            "z": z,
        }


def _projection(layer: SvgpLayer, p, x):
    z = p["z"]
    if x.shape[-1] != z.shape[-1]:
        raise DimensionMismatch(f"layer expects {z.shape[-1]}-D inputs, got {x.shape[-1]}")
    kzz = layer.kernel.K(p["kernel"], z)
    L = jitter_cholesky(kzz, layer.jitter)
    kzx = layer.kernel.K(p["kernel"], z, x)
    A = jax.scipy.linalg.solve_triangular(L, kzx, lower=True)
    return A


def layer_posterior(layer: SvgpLayer, p, x, full_cov: bool = False):
    """Marginal posterior of the layer outputs at ``x``.

    Returns ``(mean, var)`` with shapes ``(N, D_out)`` and ``(N, D_out)``, or
    with ``full_cov`` a covariance of shape ``(D_out, N, N)``.  Variances are
    latent (no likelihood noise) and may carry tiny negative round-off.
    """
    x = jnp.asarray(x, dtype=jnp.float64)
    A = _projection(layer, p, x)
    m = layer.num_inducing
    Lq = unpack_q_sqrt(p["q_sqrt"], m)  # (D, M, M)
    mean = A.T @ p["q_mu"]
    LqA = jnp.einsum("dmk,mn->dkn", Lq, A)  # Lq^T A per column
    if full_cov:
        base = layer.kernel.K(p["kernel"], x) - A.T @ A
        return mean, base[None] + jnp.einsum("dkn,dkp->dnp", LqA, LqA)
    base = layer.kernel.K_diag(p["kernel"], x) - jnp.sum(A * A, axis=0)
    var = base[:, None] + jnp.sum(LqA * LqA, axis=1).T
    return mean, var


def kl_term(layer: SvgpLayer, p):
    """KL(q(v) || N(0, I)) summed over output columns."""
    m = layer.num_inducing
    Lq = unpack_q_sqrt(p["q_sqrt"], m)
    mu = p["q_mu"]
    rows, cols, diag = _tril(m)
    log_diag = jnp.atleast_2d(p["q_sqrt"])[:, diag]
    trace = jnp.sum(Lq * Lq)
    return 0.5 * (jnp.sum(mu * mu) + trace - m * Lq.shape[0]) - jnp.sum(log_diag)


def reparameterize(mean, var, eps):
    """Traceable ``mean + eps * sqrt(var)`` with negative round-off clamped to 0."""
    return mean + eps * jnp.sqrt(jnp.maximum(var, 0.0))


def sample(layer: SvgpLayer, p, x, eps) -> np.ndarray:
    """One reparameterized draw per input with externally supplied ``eps``."""
    mean, var = layer_posterior(layer, p, x)
    mean, var = np.asarray(mean), np.asarray(var)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mean.shape:
        raise DimensionMismatch(f"eps has shape {eps.shape}, expected {mean.shape}")
    if np.any(var < -NEG_VAR_TOL):
        raise NegativeVariance(f"layer variance {var.min():.3e} below tolerance")
    return mean + eps * np.sqrt(np.maximum(var, 0.0))
