"""Covariance functions and Gram-matrix assembly.

Kernels are small frozen dataclasses describing structure; their
hyperparameters live in plain dicts of unconstrained values (log-variances,
log-lengthscales) so they can be packed into a flat parameter vector.  All
evaluation code is jax-traceable.

Pairwise terms are built by broadcasting differences/products rather than
matrix products, which keeps ``K(a, b) == K(b, a).T`` bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import jax.numpy as jnp
import numpy as np

from .errors import DimensionMismatch

DEFAULT_LOG_NOISE = float(np.log(1e-2))


def _take(x, dims):
    return x if dims is None else x[..., dims[0]:dims[1]]


@dataclass(frozen=True)
class RBF:
    """Exponentiated quadratic with ARD lengthscales.

    ``dims`` optionally restricts the kernel to columns ``dims[0]:dims[1]``.
    """

    input_dim: int
    ard: bool = True
    dims: tuple[int, int] | None = None

    def init_params(self, log_variance: float = 0.0, log_lengthscale: float = 0.0) -> dict:
        n = self.input_dim if self.ard else 1
        return {
            "log_variance": np.array(log_variance),
            "log_lengthscales": np.full(n, log_lengthscale),
        }

    def _scaled(self, p, x):
        x = _take(x, self.dims)
        if x.shape[-1] != self.input_dim:
            raise DimensionMismatch(f"RBF expects {self.input_dim} dims, got {x.shape[-1]}")
        return x / jnp.exp(p["log_lengthscales"])

    def K(self, p, a, b=None):
        sa = self._scaled(p, a)
        sb = sa if b is None else self._scaled(p, b)
        d2 = jnp.sum((sa[:, None, :] - sb[None, :, :]) ** 2, axis=-1)
        return jnp.exp(p["log_variance"]) * jnp.exp(-0.5 * d2)

    def K_diag(self, p, a):
        return jnp.full(a.shape[0], jnp.exp(p["log_variance"]))


@dataclass(frozen=True)
class Linear:
    input_dim: int
    dims: tuple[int, int] | None = None

    def init_params(self, log_variance: float = 0.0) -> dict:
        return {"log_variance": np.array(log_variance)}

    def _cols(self, x):
        x = _take(x, self.dims)
        if x.shape[-1] != self.input_dim:
            raise DimensionMismatch(f"Linear expects {self.input_dim} dims, got {x.shape[-1]}")
        return x

    def K(self, p, a, b=None):
        xa = self._cols(a)
        xb = xa if b is None else self._cols(b)
        return jnp.exp(p["log_variance"]) * jnp.sum(xa[:, None, :] * xb[None, :, :], axis=-1)

    def K_diag(self, p, a):
        xa = self._cols(a)
        return jnp.exp(p["log_variance"]) * jnp.sum(xa * xa, axis=-1)


@dataclass(frozen=True)
class White:
    def init_params(self, log_noise: float = DEFAULT_LOG_NOISE) -> dict:
        return {"log_noise": np.array(log_noise)}

    def K(self, p, a, b=None):
        if b is not None:
            return jnp.zeros((a.shape[0], b.shape[0]))
        return jnp.exp(p["log_noise"]) * jnp.eye(a.shape[0])

    def K_diag(self, p, a):
        return jnp.full(a.shape[0], jnp.exp(p["log_noise"]))


@dataclass(frozen=True)
class MfComposite:
    """Multi-fidelity kernel over augmented points ``[x, f_prev]``.

    ``k_rho(x, x') * [s_lin * f.f' + k_prev(f, f')] + k_delta(x, x')``; the
    linear term is dropped when ``use_linear`` is False.
    """

    d_in: int
    d_out: int = 1
    use_linear: bool = True
    ard: bool = True

    @property
    def input_dim(self) -> int:
        return self.d_in + self.d_out

    @property
    def parts(self) -> dict:
        x_dims, f_dims = (0, self.d_in), (self.d_in, self.d_in + self.d_out)
        parts = {
            "rho": RBF(self.d_in, self.ard, x_dims),
            "prev": RBF(self.d_out, self.ard, f_dims),
            "delta": RBF(self.d_in, self.ard, x_dims),
        }
        if self.use_linear:
            parts["linear"] = Linear(self.d_out, f_dims)
        return parts

    def init_params(self) -> dict:
        return {name: k.init_params() for name, k in self.parts.items()}

    def _check(self, x):
        if x.shape[-1] != self.input_dim:
            raise DimensionMismatch(
                f"composite kernel expects {self.input_dim} dims, got {x.shape[-1]}"
            )

    def K(self, p, a, b=None):
        self._check(a)
        if b is not None:
            self._check(b)
        parts = self.parts
        inner = parts["prev"].K(p["prev"], a, b)
        if self.use_linear:
            inner = inner + parts["linear"].K(p["linear"], a, b)
        return parts["rho"].K(p["rho"], a, b) * inner + parts["delta"].K(p["delta"], a, b)

    def K_diag(self, p, a):
        self._check(a)
        parts = self.parts
        inner = parts["prev"].K_diag(p["prev"], a)
        if self.use_linear:
            inner = inner + parts["linear"].K_diag(p["linear"], a)
        return parts["rho"].K_diag(p["rho"], a) * inner + parts["delta"].K_diag(p["delta"], a)


def gram(kernel, params, a, b=None, log_noise=None):
    """Pairwise kernel matrix; adds ``exp(log_noise) * I`` on ``gram(a, a)``."""
    a = jnp.atleast_2d(jnp.asarray(a, dtype=jnp.float64))
    if b is not None:
        b = jnp.atleast_2d(jnp.asarray(b, dtype=jnp.float64))
        if a.shape[1] != b.shape[1]:
            raise DimensionMismatch(f"point sets have {a.shape[1]} and {b.shape[1]} dims")
    K = kernel.K(params, a, b)
    if b is None and log_noise is not None:
        K = K + jnp.exp(log_noise) * jnp.eye(a.shape[0])
    return K


# Scalar forms, mostly for tests and documentation.

def _pair(xi, xj):
    xi = jnp.atleast_1d(jnp.asarray(xi, dtype=jnp.float64))
    xj = jnp.atleast_1d(jnp.asarray(xj, dtype=jnp.float64))
    if xi.shape != xj.shape:
        raise DimensionMismatch(f"points have shapes {xi.shape} and {xj.shape}")
    return xi[None, :], xj[None, :]


def rbf(xi, xj, params: Mapping) -> float:
    a, b = _pair(xi, xj)
    n_ls = np.size(params["log_lengthscales"])
    if n_ls not in (1, a.shape[1]):
        raise DimensionMismatch(f"{n_ls} lengthscales for {a.shape[1]}-D points")
    return float(RBF(a.shape[1], ard=n_ls > 1).K(params, a, b)[0, 0])


def linear(xi, xj, variance: float) -> float:
    a, b = _pair(xi, xj)
    return float(variance * jnp.sum(a * b))


def mf_composite(zi, zj, kernel: MfComposite, params: Mapping) -> float:
    a, b = _pair(zi, zj)
    return float(kernel.K(params, a, b)[0, 0])


def flatten(prefix: str, nested: Mapping) -> dict:
    """``{'a': {'b': v}}`` -> ``{'prefix.a.b': v}``."""
    out = {}
    for k, v in nested.items():
        name = f"{prefix}.{k}" if prefix else k
        if isinstance(v, Mapping):
            out.update(flatten(name, v))
        else:
            out[name] = v
    return out


def unflatten(prefix: str, flat: Mapping) -> dict:
    """Inverse of :func:`flatten` for the keys under ``prefix``."""
    out: dict = {}
    start = f"{prefix}." if prefix else ""
    for key, v in flat.items():
        if not key.startswith(start):
            continue
        parts = key[len(start):].split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = v
    return out
