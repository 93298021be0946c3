"""Exact Gaussian-process regression trained by Adam on the marginal likelihood."""

from __future__ import annotations

import logging

import jax
import jax.numpy as jnp
import numpy as np

from . import linalg
from .diff import ParamLayout, ParamVector
from .errors import DimensionMismatch
from .kernels import DEFAULT_LOG_NOISE, RBF, flatten, unflatten
from .optimizer import AdamState, FreezeMask, run_adam

logger = logging.getLogger(__name__)

LOG_NOISE_FLOOR = float(np.log(1e-8))
LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_nlml(K, y):
    """Negative log density of ``y`` under ``N(0, K)`` (traceable)."""
    L = jnp.linalg.cholesky(K)
    alpha = jax.scipy.linalg.solve_triangular(L, y, lower=True)
    return 0.5 * jnp.sum(alpha**2) + jnp.sum(jnp.log(jnp.diag(L))) + 0.5 * y.shape[0] * LOG_2PI


class ExactGP:
    """Zero-mean GP with a Gaussian likelihood.

    Parameters are held in a :class:`ParamVector` with segments
    ``kernel.<name>`` and ``log_noise``.  The Cholesky factor of
    ``K + noise*I`` is cached and rebuilt whenever the parameters change.
    """

    def __init__(self, x, y, kernel=None, kernel_params=None,
                 log_noise: float = DEFAULT_LOG_NOISE, jitter: float = 0.0):
        self.x = linalg.as_matrix(x, "x")
        self.y = np.asarray(y, dtype=np.float64).reshape(-1)
        if self.y.shape[0] != self.x.shape[0]:
            raise DimensionMismatch(f"{self.x.shape[0]} inputs but {self.y.shape[0]} targets")
        if self.y.shape[0] < 1:
            raise ValueError("need at least one training point")
        self.kernel = kernel if kernel is not None else RBF(self.x.shape[1])
        kp = kernel_params if kernel_params is not None else self.kernel.init_params()
        values = flatten("kernel", kp)
        values["log_noise"] = np.array(log_noise)
        self.params = ParamVector.from_dict(values)
        self.jitter = jitter
        self._cache_key = None
        self._factor = None
        self._alpha = None

    @property
    def layout(self) -> ParamLayout:
        return self.params.layout

    def unpack(self, theta):
        flat = self.layout.unpack(theta)
        return unflatten("kernel", flat), jnp.maximum(flat["log_noise"], LOG_NOISE_FLOOR)

    def objective(self):
        x, y, kernel, jitter = jnp.asarray(self.x), jnp.asarray(self.y), self.kernel, self.jitter

        def nlml(theta):
            kp, log_noise = self.unpack(theta)
            K = kernel.K(kp, x) + (jnp.exp(log_noise) + jitter) * jnp.eye(x.shape[0])
            return gaussian_nlml(K, y)

        return nlml

    def nlml(self, theta=None) -> float:
        theta = self.params.values if theta is None else theta
        return float(self.objective()(jnp.asarray(theta)))

    def fit(self, steps: int = 1500, lr: float = 0.01, frozen=()) -> "ExactGP":
        mask = FreezeMask.freezing(self.layout, frozen)
        obj = self.objective()
        run = run_adam(lambda th, _key: obj(th), self.params.values, steps,
                       AdamState.zeros(self.layout.size, lr=lr),
                       active=mask.active(self.layout))
        if run.diverged:
            logger.warning("exact GP fit hit a non-finite objective; keeping last finite state")
        values = run.x.copy()
        seg = self.layout["log_noise"]
        values[seg.offset] = max(values[seg.offset], LOG_NOISE_FLOOR)
        self.params = ParamVector(values, self.layout)
        self.trace = run.values
        return self

    def set_params(self, values) -> None:
        self.params = ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    @property
    def noise_variance(self) -> float:
        return float(np.exp(max(self.params.segment("log_noise").item(), LOG_NOISE_FLOOR)))

    def _factorize(self):
        key = self.params.values.tobytes()
        if key != self._cache_key:
            kp, _ = self.unpack(self.params.values)
            K = np.array(self.kernel.K(kp, self.x))
            K[np.diag_indices_from(K)] += self.noise_variance + self.jitter
            self._factor = linalg.cholesky(K)
            self._alpha = linalg.cho_solve(self._factor, self.y)
            self._cache_key = key
        return self._factor, self._alpha

    @property
    def cached_factor(self) -> linalg.CholeskyFactor:
        return self._factorize()[0]

    def predict(self, x_star, include_noise: bool = False, full_cov: bool = False):
        """Posterior mean and (latent) variance at ``x_star``."""
        x_star = linalg.as_matrix(x_star, "x_star")
        if x_star.shape[1] != self.x.shape[1]:
            raise DimensionMismatch(f"model has {self.x.shape[1]} input dims, got {x_star.shape[1]}")
        factor, alpha = self._factorize()
        kp, _ = self.unpack(self.params.values)
        Ks = np.asarray(self.kernel.K(kp, self.x, x_star))
        mean = Ks.T @ alpha
        V = linalg.tri_solve(factor, Ks, "lower")
        if full_cov:
            cov = np.array(self.kernel.K(kp, x_star)) - V.T @ V
            if include_noise:
                cov[np.diag_indices_from(cov)] += self.noise_variance
            return mean, cov
        var = np.asarray(self.kernel.K_diag(kp, x_star)) - np.sum(V * V, axis=0)
        var = np.maximum(var, 0.0)
        if include_noise:
            var = var + self.noise_variance
        return mean, var
