"""AR1 (joint linear autoregressive GP) and NARGP (sequential composite GPs).

Both models scale inputs to the unit cube and divide targets by the
high-fidelity standard deviation before fitting; predictions are returned in
the original units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import jax.numpy as jnp
import numpy as np

from . import linalg
from .data import MultiFidelityDataset, Scaling
from .densities import gaussian_log_density, mixture_log_density
from .diff import ParamVector
from .errors import DimensionMismatch, UnknownFidelity, UnsupportedFidelityCount
from .gp_exact import LOG_NOISE_FLOOR, ExactGP, gaussian_nlml
from .kernels import DEFAULT_LOG_NOISE, RBF, MfComposite
from .optimizer import AdamState, run_adam

logger = logging.getLogger(__name__)


def _check_level(level: int, levels: int) -> None:
    if not 1 <= level <= levels:
        raise UnknownFidelity(f"fidelity {level} not in 1..{levels}")


class AR1:
    """Kennedy-O'Hagan model ``f_t = rho_t f_{t-1} + delta_t`` as one joint GP.

    Unrolling the recursion gives ``f_t = sum_j P(j->t) delta_j`` with
    ``P(j->t) = prod_{i=j+1..t} rho_i``, hence
    ``cov(f_s(x), f_t(x')) = sum_j P(j->s) P(j->t) k_j(x, x')``.
    """

    def __init__(self, data: MultiFidelityDataset, ard: bool = True,
                 log_noise: float = DEFAULT_LOG_NOISE, rho_init: float = 1.0,
                 scaling: Scaling | None = None):
        if data.levels < 2:
            raise UnsupportedFidelityCount("AR1 needs at least two fidelity levels")
        if data.d_out != 1:
            raise DimensionMismatch("AR1 supports scalar outputs only")
        self.levels = data.levels
        self.scaling = scaling if scaling is not None else Scaling.fit(data)
        scaled = self.scaling.apply(data)
        x, y, fid = scaled.stacked()
        self.x, self.y, self.fid = x, y[:, 0], fid
        self.kernels = [RBF(data.d_in, ard) for _ in range(self.levels)]
        values = {}
        for t, k in enumerate(self.kernels, start=1):
            for name, v in k.init_params().items():
                values[f"level{t}.{name}"] = v
        values["rho"] = np.full(self.levels - 1, rho_init)
        values["log_noise"] = np.full(self.levels, log_noise)
        self.params = ParamVector.from_dict(values)
        self._cache_key = None

    @property
    def layout(self):
        return self.params.layout

    def _unpack(self, theta):
        flat = self.layout.unpack(theta)
        kps = [{"log_variance": flat[f"level{t}.log_variance"],
                "log_lengthscales": flat[f"level{t}.log_lengthscales"]}
               for t in range(1, self.levels + 1)]
        return kps, flat["rho"], jnp.maximum(flat["log_noise"], LOG_NOISE_FLOOR)

    def _propagation(self, rho):
        """``P[j, s]`` for 0-based levels; zero where ``j > s``."""
        T = self.levels
        rows = []
        for j in range(T):
            row, prod = [], 1.0
            for s in range(T):
                if s < j:
                    row.append(jnp.zeros(()))
                else:
                    if s > j:
                        prod = prod * rho[s - 1]
                    row.append(jnp.asarray(prod, dtype=jnp.float64))
            rows.append(jnp.stack(row))
        return jnp.stack(rows)

    def build_cov(self, theta, x_a, lev_a, x_b=None, lev_b=None, noise: bool = True):
        """Joint prior covariance between points tagged with 1-based levels."""
        kps, rho, log_noise = self._unpack(theta)
        lev_a = np.asarray(lev_a, dtype=int)
        if np.any((lev_a < 1) | (lev_a > self.levels)):
            raise UnknownFidelity("point tagged with an unknown fidelity")
        same = x_b is None
        if same:
            x_b, lev_b = x_a, lev_a
        lev_b = np.asarray(lev_b, dtype=int)
        if np.any((lev_b < 1) | (lev_b > self.levels)):
            raise UnknownFidelity("point tagged with an unknown fidelity")
        P = self._propagation(rho)
        K = 0.0
        for j, (kern, kp) in enumerate(zip(self.kernels, kps)):
            pa, pb = P[j][lev_a - 1], P[j][lev_b - 1]
            K = K + (pa[:, None] * pb[None, :]) * kern.K(kp, x_a, None if same else x_b)
        if same and noise:
            K = K + jnp.diag(jnp.exp(log_noise)[lev_a - 1])
        return K

    def objective(self):
        x, y, fid = jnp.asarray(self.x), jnp.asarray(self.y), self.fid

        def nlml(theta):
            return gaussian_nlml(self.build_cov(theta, x, fid), y)

        return nlml

    def nlml(self, theta=None) -> float:
        theta = self.params.values if theta is None else theta
        return float(self.objective()(jnp.asarray(theta)))

    def fit(self, steps: int = 1500, lr: float = 0.01) -> "AR1":
        obj = self.objective()
        run = run_adam(lambda th, _key: obj(th), self.params.values, steps,
                       AdamState.zeros(self.layout.size, lr=lr))
        if run.diverged:
            logger.warning("AR1 fit hit a non-finite objective; keeping last finite state")
        self.params = ParamVector(run.x, self.layout)
        self.trace = run.values
        return self

    def set_params(self, values) -> None:
        self.params = ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    @property
    def rho(self) -> np.ndarray:
        return self.params.segment("rho").copy()

    def _factorize(self):
        key = self.params.values.tobytes()
        if key != self._cache_key:
            K = np.asarray(self.build_cov(self.params.values, self.x, self.fid))
            self._factor = linalg.cholesky(K)
            self._alpha = linalg.cho_solve(self._factor, self.y)
            self._cache_key = key
        return self._factor, self._alpha

    def noise_variance(self, level: int) -> float:
        _, _, log_noise = self._unpack(self.params.values)
        return float(np.exp(log_noise[level - 1])) * self.scaling.y_scale**2

    def predict(self, x_star, level: int | None = None):
        """Posterior mean and latent variance of ``f_level`` in original units."""
        level = self.levels if level is None else level
        _check_level(level, self.levels)
        xs = self.scaling.x(linalg.as_matrix(x_star, "x_star"))
        lev = np.full(xs.shape[0], level)
        factor, alpha = self._factorize()
        Ks = np.asarray(self.build_cov(self.params.values, self.x, self.fid, xs, lev))
        mean = Ks.T @ alpha
        V = linalg.tri_solve(factor, Ks, "lower")
        prior = np.diag(np.asarray(self.build_cov(self.params.values, xs, lev, noise=False)))
        var = np.maximum(prior - np.sum(V * V, axis=0), 0.0)
        c = self.scaling.y_scale
        return mean * c, var * c**2

    def log_density(self, x_star, y_star, level: int | None = None):
        level = self.levels if level is None else level
        mean, var = self.predict(x_star, level)
        y = np.asarray(y_star, dtype=np.float64).reshape(-1)
        return gaussian_log_density(y, mean, var + self.noise_variance(level))


@dataclass
class NargpPrediction:
    mean: np.ndarray
    var: np.ndarray
    samples: np.ndarray  # draws of f_level, shape (s, N)
    component_means: np.ndarray
    component_vars: np.ndarray


class NARGP:
    """Nonlinear autoregressive GP: one exact GP per level, trained in sequence.

    Level ``t >= 2`` regresses on ``[x, mean_{t-1}(x)]`` with a composite
    kernel; lower levels are frozen once fitted.
    """

    def __init__(self, data: MultiFidelityDataset, ard: bool = True,
                 log_noise: float = DEFAULT_LOG_NOISE, samples: int = 1000,
                 scaling: Scaling | None = None):
        if data.d_out != 1:
            raise DimensionMismatch("NARGP supports scalar outputs only")
        self.levels = data.levels
        self.samples = samples
        self.ard = ard
        self.log_noise = log_noise
        self.scaling = scaling if scaling is not None else Scaling.fit(data)
        self.data = self.scaling.apply(data)
        self.models: list[ExactGP] = []

    def _mean_chain(self, x, upto: int) -> np.ndarray:
        """Plug-in posterior mean of level ``upto`` at scaled inputs ``x``."""
        mean, _ = self.models[0].predict(x)
        for t in range(1, upto):
            mean, _ = self.models[t].predict(np.hstack([x, mean[:, None]]))
        return mean

    def _level_gp(self, t: int) -> ExactGP:
        """Untrained GP for level ``t``; levels below ``t`` must already exist."""
        d_in = self.data.d_in
        x, y = self.data.xs[t - 1], self.data.ys[t - 1][:, 0]
        if t == 1:
            return ExactGP(x, y, RBF(d_in, self.ard), log_noise=self.log_noise)
        prev = self._mean_chain(x, t - 1)
        return ExactGP(np.hstack([x, prev[:, None]]), y,
                       MfComposite(d_in, 1, use_linear=False, ard=self.ard),
                       log_noise=self.log_noise)

    def fit(self, steps_frozen: int = 1000, steps_joint: int = 1000, lr: float = 0.01) -> "NARGP":
        self.models = []
        self.traces = []
        for t in range(1, self.levels + 1):
            gp = self._level_gp(t)
            gp.fit(steps_frozen, lr, frozen=("log_noise",))
            first = gp.trace
            gp.fit(steps_joint, lr)
            self.traces.append((first, gp.trace))
            self.models.append(gp)
        return self

    def level_params(self) -> list[np.ndarray]:
        return [gp.params.values.copy() for gp in self.models]

    def load_params(self, values: Sequence[np.ndarray]) -> "NARGP":
        """Rebuild the fitted chain from stored per-level parameter vectors."""
        if len(values) != self.levels:
            raise DimensionMismatch(f"expected {self.levels} parameter vectors, got {len(values)}")
        self.models = []
        for t, v in enumerate(values, start=1):
            gp = self._level_gp(t)
            gp.set_params(v)
            self.models.append(gp)
        return self

    def noise_variance(self, level: int) -> float:
        return self.models[level - 1].noise_variance * self.scaling.y_scale**2

    def predict(self, x_star, level: int | None = None, s: int | None = None,
                seed: int = 0, eps=None) -> NargpPrediction:
        """Monte-Carlo propagation of ``s`` samples through levels ``1..level``.

        ``eps`` (shape ``(s, N, level)``) overrides the seeded standard-normal
        draws; column ``t-1`` perturbs level ``t``.
        """
        level = self.levels if level is None else level
        _check_level(level, self.levels)
        s = self.samples if s is None else s
        x = self.scaling.x(linalg.as_matrix(x_star, "x_star"))
        n = x.shape[0]
        c = self.scaling.y_scale
        if eps is None:
            eps = np.random.default_rng(seed).standard_normal((s, n, level))
        eps = np.asarray(eps, dtype=np.float64)
        m1, v1 = self.models[0].predict(x)
        if level == 1:
            draws = m1 + np.sqrt(v1) * eps[:, :, 0]
            return NargpPrediction(m1 * c, v1 * c**2, draws * c, m1[None] * c, v1[None] * c**2)
        f = m1 + np.sqrt(v1) * eps[:, :, 0]
        for t in range(2, level + 1):
            aug = np.hstack([np.tile(x, (s, 1)), f.reshape(-1, 1)])
            m, v = self.models[t - 1].predict(aug)
            m, v = m.reshape(s, n), v.reshape(s, n)
            f = m + np.sqrt(v) * eps[:, :, t - 1]
        mean = m.mean(axis=0)
        var = v.mean(axis=0) + m.var(axis=0)
        return NargpPrediction(mean * c, var * c**2, f * c, m * c, v * c**2)

    def log_density(self, x_star, y_star, level: int | None = None,
                    s: int | None = None, seed: int = 0):
        level = self.levels if level is None else level
        pred = self.predict(x_star, level, s, seed)
        y = np.asarray(y_star, dtype=np.float64).reshape(-1)
        return mixture_log_density(y, pred.component_means,
                                   pred.component_vars + self.noise_variance(level))
