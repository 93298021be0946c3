"""Multi-fidelity deep GP: one sparse variational layer per fidelity.

Layer ``l`` models fidelity ``l``.  Layer 1 sees ``x``; layer ``l >= 2`` sees
``[x, f_{l-1}(x)]`` through a composite kernel.  Observations at fidelity
``t`` are explained by layer ``t`` after sampling through layers ``1..t-1``.

All internal quantities are in scaled units (inputs in the unit cube, outputs
divided by one shared constant); public predictions are in original units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from . import linalg
from .data import MultiFidelityDataset, Scaling
from .densities import LOG_2PI, mixture_log_density
from .diff import ParamLayout, ParamVector
from .errors import ConfigError, DimensionMismatch, UnknownFidelity
from .kernels import DEFAULT_LOG_NOISE, RBF, MfComposite, flatten, unflatten
from .optimizer import AdamState, run_adam
from .svgp import SvgpLayer, kl_term, layer_posterior, reparameterize

logger = logging.getLogger(__name__)

DEFAULT_INDUCING = 50
PREDICT_CHUNK_POINTS = 100_000  # sample paths x test points per compiled call


@dataclass(frozen=True)
class MfdgpConfig:
    num_inducing: int | tuple[int, ...] | None = None  # None: min(N, 50) per layer
    samples_train: int = 5
    samples_predict: int = 100
    jitter: float = 1e-6
    ard: bool = True
    use_linear: bool = True
    log_noise: float = DEFAULT_LOG_NOISE
    q_sqrt_scale: float = 1e-2
    seed: int = 0

    def inducing_for(self, level: int) -> int | None:
        m = self.num_inducing
        if m is None or isinstance(m, int):
            return m
        return int(m[level - 1])


@dataclass(frozen=True)
class TrainingSchedule:
    phase1_steps: int = 5000
    phase2_steps: int = 15000
    lr1: float = 0.003
    lr2: float = 0.001
    trace_every: int = 100

    def __post_init__(self):
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ConfigError("phase step counts must be non-negative")
        if self.lr1 <= 0 or self.lr2 <= 0:
            raise ConfigError("learning rates must be positive")


@dataclass(frozen=True)
class MiniBatchSpec:
    """Per-fidelity batch sizes; ``None`` means the full level."""

    sizes: tuple[int | None, ...] | None = None

    @classmethod
    def full(cls) -> "MiniBatchSpec":
        return cls(None)

    @classmethod
    def subsample_lower(cls, levels: int, batch: int) -> "MiniBatchSpec":
        """All high-fidelity points every step, ``batch`` points from each lower level."""
        return cls(tuple([batch] * (levels - 1) + [None]))

    def resolve(self, counts: Sequence[int]) -> tuple[int, ...]:
        if self.sizes is None:
            return tuple(counts)
        if len(self.sizes) != len(counts):
            raise ConfigError(f"batch spec lists {len(self.sizes)} levels, data has {len(counts)}")
        out = []
        for b, n in zip(self.sizes, counts):
            b = n if b is None else int(b)
            if b < 1:
                raise ConfigError("batch sizes must be positive")
            out.append(min(b, n))
        return tuple(out)


@dataclass
class TrainResult:
    trace: list[dict]  # rows: step, phase, lr, objective (ELBO estimate)
    history: np.ndarray  # per-step ELBO estimates
    diverged: bool = False


def _regularized_whitened_targets(layer, kp, z, targets, noise, jitter):
    """Whitened mean whose layer mean at ``z`` is ``K (K + noise I)^-1 targets``."""
    K = np.array(layer.kernel.K(kp, z))
    L = np.linalg.cholesky(K + jitter * np.eye(K.shape[0]))
    reg = linalg.cholesky(K + (noise + jitter) * np.eye(K.shape[0]))
    return L.T @ linalg.cho_solve(reg, targets)


class MFDGP:
    def __init__(self, data: MultiFidelityDataset, config: MfdgpConfig | None = None,
                 scaling: Scaling | None = None):
        self.config = config or MfdgpConfig()
        self.scaling = scaling if scaling is not None else Scaling.fit(data)
        self.raw_data = data
        self.data = self.scaling.apply(data)
        self.levels = data.levels
        self.d_in, self.d_out = data.d_in, data.d_out
        self._build()

    @classmethod
    def build(cls, data: MultiFidelityDataset, config: MfdgpConfig | None = None) -> "MFDGP":
        return cls(data, config)

    # ------------------------------------------------------------------ setup
    def _build(self) -> None:
        cfg, data = self.config, self.data
        rng = np.random.default_rng(cfg.seed)
        self.layers: list[SvgpLayer] = []
        self.fixed_z: dict[int, np.ndarray] = {}
        values: dict[str, np.ndarray] = {}
        noise = float(np.exp(cfg.log_noise))
        for l in range(1, self.levels + 1):
            src = 1 if l == 1 else l - 1
            n_src = data.n(src)
            m = cfg.inducing_for(l)
            if m is None:
                m = min(n_src, DEFAULT_INDUCING)
            elif m > n_src:
                logger.warning("layer %d: %d inducing points requested, %d available; clamping",
                               l, m, n_src)
                m = n_src
            if m < 1:
                raise ConfigError(f"layer {l} needs at least one inducing point")
            idx = np.sort(rng.choice(n_src, size=m, replace=False)) if m < n_src else np.arange(n_src)
            if l == 1:
                kernel = RBF(self.d_in, cfg.ard)
                z = data.xs[0][idx]
                targets = data.ys[0][idx]
            else:
                kernel = MfComposite(self.d_in, self.d_out, cfg.use_linear, cfg.ard)
                z = np.hstack([data.xs[src - 1][idx], data.ys[src - 1][idx]])
                targets = self._targets_at(l, data.xs[src - 1][idx], data.ys[src - 1][idx])
            layer = SvgpLayer(kernel, m, self.d_out, cfg.jitter)
            p = layer.init_params(z, q_sqrt_scale=cfg.q_sqrt_scale)
            if l < self.levels:
                p["q_mu"] = _regularized_whitened_targets(layer, p["kernel"], z, targets,
                                                          noise, cfg.jitter)
            self.layers.append(layer)
            if l == 1:
                values["layer1.z"] = p["z"]
            else:
                self.fixed_z[l] = p["z"]
            values[f"layer{l}.q_mu"] = p["q_mu"]
            values[f"layer{l}.q_sqrt"] = p["q_sqrt"]
            values.update(flatten(f"layer{l}.kernel", p["kernel"]))
        for t in range(1, self.levels + 1):
            values[f"noise.level{t}"] = np.array(cfg.log_noise)
        self.params = ParamVector.from_dict(values)

    def _targets_at(self, level, x_src, y_src):
        """Level-``level`` targets at previous-level inputs: exact matches or the fallback ``y_src``."""
        x_l, y_l = self.data.xs[level - 1], self.data.ys[level - 1]
        out = np.array(y_src, dtype=np.float64)
        for i, x in enumerate(x_src):
            hit = np.flatnonzero(np.all(x_l == x, axis=1))
            if hit.size:
                out[i] = y_l[hit[0]]
        return out

    @property
    def layout(self) -> ParamLayout:
        return self.params.layout

    def phase1_frozen(self) -> list[str]:
        """Noise everywhere, variational covariances everywhere, lower-layer means."""
        names = [f"noise.level{t}" for t in range(1, self.levels + 1)]
        names += [f"layer{l}.q_sqrt" for l in range(1, self.levels + 1)]
        names += [f"layer{l}.q_mu" for l in range(1, self.levels)]
        return names

    def unpack(self, theta):
        """Per-layer parameter dicts and per-level log-noises from a flat vector."""
        flat = self.layout.unpack(theta)
        layers = []
        for l in range(1, self.levels + 1):
            layers.append({
                "kernel": unflatten(f"layer{l}.kernel", flat),
                "q_mu": flat[f"layer{l}.q_mu"],
                "q_sqrt": flat[f"layer{l}.q_sqrt"],
                "z": flat["layer1.z"] if l == 1 else jnp.asarray(self.fixed_z[l]),
            })
        noises = [flat[f"noise.level{t}"] for t in range(1, self.levels + 1)]
        return layers, noises

    # -------------------------------------------------------------- objective
    def _propagate(self, layers, noises, x, eps, upto):
        """Sample ``f_upto`` at inputs ``x`` (``(S, N, D_in)``) with ``eps`` ``(S, N, upto, D)``."""
        S, N = eps.shape[0], eps.shape[1]
        flat_x = x.reshape(S * N, -1)
        inp = flat_x
        f = None
        for l in range(1, upto + 1):
            mean, var = layer_posterior(self.layers[l - 1], layers[l - 1], inp)
            var = var + jnp.exp(noises[l - 1])
            f = reparameterize(mean, var, eps[:, :, l - 1, :].reshape(S * N, -1))
            inp = jnp.hstack([flat_x, f])
        return inp

    def _expected_loglik(self, layers, noises, t, x, y, eps):
        """Per-point ``E_q[log p(y | f_t)]`` averaged over the samples in ``eps``."""
        S = eps.shape[0]
        if t == 1:
            inp = x
            y_rep = y
        else:
            xs = jnp.broadcast_to(x, (S,) + x.shape)
            inp = self._propagate(layers, noises, xs, eps, t - 1)
            y_rep = jnp.tile(y, (S, 1))
        mean, var = layer_posterior(self.layers[t - 1], layers[t - 1], inp)
        log_s2 = noises[t - 1]
        ell = -0.5 * (LOG_2PI + log_s2) - 0.5 * ((y_rep - mean) ** 2 + var) / jnp.exp(log_s2)
        ell = jnp.sum(ell, axis=-1)
        if t == 1:
            return ell
        return jnp.mean(ell.reshape(S, -1), axis=0)

    def kl(self, theta=None):
        theta = self.params.values if theta is None else theta
        layers, _ = self.unpack(theta)
        return sum(kl_term(layer, p) for layer, p in zip(self.layers, layers))

    def _elbo(self, theta, batch, eps):
        layers, noises = self.unpack(theta)
        fit = 0.0
        for t in range(1, self.levels + 1):
            x, y, scale = batch[t - 1]
            fit = fit + scale * jnp.sum(self._expected_loglik(layers, noises, t, x, y, eps[t - 1]))
        kl = sum(kl_term(layer, p) for layer, p in zip(self.layers, layers))
        return fit - kl

    def full_batch(self):
        return [(jnp.asarray(x), jnp.asarray(y), 1.0) for x, y in zip(self.data.xs, self.data.ys)]

    def draw_eps(self, key, sizes: Sequence[int], samples: int | None = None):
        """Standard-normal bundle: level ``t`` gets shape ``(S, B_t, t-1, D_out)``."""
        S = self.config.samples_train if samples is None else samples
        keys = jax.random.split(key, self.levels)
        return [jax.random.normal(keys[t], (S, sizes[t], t, self.d_out))
                for t in range(self.levels)]

    def elbo(self, theta=None, batch=None, eps=None, key=None):
        """Lower bound estimate (to be maximized).

        ``batch`` is a list of ``(x, y, N_t / B_t)`` in scaled units (full data
        when omitted); ``eps`` is the standard-normal bundle of
        :meth:`draw_eps`, drawn from ``key`` (default seed 0) when omitted.
        """
        theta = jnp.asarray(self.params.values if theta is None else theta)
        batch = self.full_batch() if batch is None else batch
        if eps is None:
            key = jax.random.PRNGKey(0) if key is None else key
            eps = self.draw_eps(key, [b[0].shape[0] for b in batch])
        return self._elbo(theta, batch, eps)

    def stochastic_loss(self, batch_spec: MiniBatchSpec | None = None):
        """``loss(theta, key)``: negative ELBO on a fresh mini-batch and fresh noise."""
        sizes = (batch_spec or MiniBatchSpec.full()).resolve(self.data.counts)
        xs = [jnp.asarray(x) for x in self.data.xs]
        ys = [jnp.asarray(y) for y in self.data.ys]
        counts = self.data.counts

        def loss(theta, key):
            k_batch, k_eps = jax.random.split(key)
            bkeys = jax.random.split(k_batch, self.levels)
            batch = []
            for t in range(self.levels):
                if sizes[t] == counts[t]:
                    batch.append((xs[t], ys[t], 1.0))
                else:
                    # top-k of iid uniform keys: a uniform subset, far cheaper than a permutation
                    keys = jax.random.uniform(bkeys[t], (counts[t],), dtype=jnp.float32)
                    idx = jax.lax.top_k(keys, sizes[t])[1]
                    batch.append((xs[t][idx], ys[t][idx], counts[t] / sizes[t]))
            eps = self.draw_eps(k_eps, sizes)
            return -self._elbo(theta, batch, eps)

        return loss

    # --------------------------------------------------------------- training
    def train(self, schedule: TrainingSchedule | None = None,
              batch_spec: MiniBatchSpec | None = None, seed: int | None = None) -> TrainResult:
        schedule = schedule or TrainingSchedule()
        seed = self.config.seed if seed is None else seed
        key = jax.random.PRNGKey(seed)
        loss = self.stochastic_loss(batch_spec)
        n = self.layout.size
        x = self.params.values
        state = AdamState.zeros(n, lr=schedule.lr1)
        phases = [(1, schedule.phase1_steps, schedule.lr1,
                   self.layout.mask(lambda s: s not in set(self.phase1_frozen()))),
                  (2, schedule.phase2_steps, schedule.lr2, np.ones(n, bool))]
        history, trace, diverged, offset = [], [], False, 0
        for phase, steps, lr, active in phases:
            if steps == 0:
                continue
            state = replace(state, lr=lr)
            run = run_adam(loss, x, steps, state, active=active, key=key)
            x, state = run.x, run.state
            elbo = -run.values
            history.append(elbo)
            for i in range(0, elbo.size, schedule.trace_every):
                trace.append({"step": offset + i, "phase": phase, "lr": lr,
                              "objective": float(elbo[i])})
            offset += elbo.size
            if run.diverged:
                logger.warning("MF-DGP training hit a non-finite ELBO; keeping last finite state")
                diverged = True
                break
        self.params = ParamVector(np.asarray(x), self.layout)
        hist = np.concatenate(history) if history else np.empty(0)
        return TrainResult(trace, hist, diverged)

    # ------------------------------------------------------------- prediction
    def noise_variance(self, level: int) -> float:
        """Observation noise variance at ``level`` in original units."""
        _check_level(level, self.levels)
        return float(np.exp(self.params.segment(f"noise.level{level}"))) * self.scaling.y_scale**2

    def _components(self, x_star, level, s, seed, eps):
        """Mixture components ``(m, v)`` of shape ``(s, N, D)`` in scaled units, plus draws."""
        level = self.levels if level is None else level
        _check_level(level, self.levels)
        x = self.scaling.x(linalg.as_matrix(x_star, "x_star"))
        if x.shape[1] != self.d_in:
            raise DimensionMismatch(f"model has {self.d_in} input dims, got {x.shape[1]}")
        layers, noises = self.unpack(jnp.asarray(self.params.values))
        N = x.shape[0]
        if level == 1:
            m, v = layer_posterior(self.layers[0], layers[0], jnp.asarray(x))
            m, v = np.asarray(m)[None], np.asarray(v)[None]
            e = np.zeros_like(m) if eps is None else np.asarray(eps)[..., 0, :]
            return m, np.maximum(v, 0.0), m + e * np.sqrt(np.maximum(v, 0.0))
        s = self.config.samples_predict if s is None else s
        if eps is None:
            eps = jax.random.normal(jax.random.PRNGKey(seed), (s, N, level, self.d_out))
        eps = jnp.asarray(eps, dtype=jnp.float64)
        if eps.shape != (s, N, level, self.d_out):
            raise DimensionMismatch(f"eps must have shape {(s, N, level, self.d_out)}")
        fn = jax.jit(self._final_layer, static_argnums=(3,))
        # chunk the sample axis so memory stays bounded for large s * N
        chunk = max(1, PREDICT_CHUNK_POINTS // N)
        parts = [fn(layers, noises, jnp.asarray(x), level, eps[i:i + chunk])
                 for i in range(0, s, chunk)]
        m, v, f = (np.concatenate([np.asarray(part[k]) for part in parts]) for k in range(3))
        return m, np.maximum(v, 0.0), f

    def _final_layer(self, layers, noises, x, level, eps):
        s, N = eps.shape[0], eps.shape[1]
        xs = jnp.broadcast_to(x, (s,) + x.shape)
        inp = self._propagate(layers, noises, xs, eps, level - 1)
        m, v = layer_posterior(self.layers[level - 1], layers[level - 1], inp)
        f = reparameterize(m, v, eps[:, :, level - 1, :].reshape(s * N, -1))
        shape = (s, N, self.d_out)
        return m.reshape(shape), v.reshape(shape), f.reshape(shape)

    def predict(self, x_star, level: int | None = None, s: int | None = None,
                seed: int = 0, eps=None):
        """``(samples, mean, var)`` in original units.

        ``samples`` has shape ``(s, N, D_out)``; the moments are those of the
        equal-weight Gaussian mixture (mean of component variances plus the
        variance of component means).  Level 1 is analytic.
        """
        m, v, f = self._components(x_star, level, s, seed, eps)
        c = self.scaling.y_scale
        mean = m.mean(axis=0)
        var = v.mean(axis=0) + m.var(axis=0)
        return f * c, mean * c, var * c**2

    def log_density(self, x_star, y_star, level: int | None = None, s: int | None = None,
                    seed: int = 0, eps=None) -> np.ndarray:
        """Per-point mixture log density of ``y_star`` (original units), observation noise included."""
        level = self.levels if level is None else level
        m, v, _ = self._components(x_star, level, s, seed, eps)
        c = self.scaling.y_scale
        y = np.asarray(y_star, dtype=np.float64).reshape(m.shape[1], self.d_out)
        var = (v + float(np.exp(self.params.segment(f"noise.level{level}")))) * c**2
        return mixture_log_density(y, m * c, var).sum(axis=-1)

    def predict_cov(self, x_star, level: int | None = None, s: int | None = None, seed: int = 0):
        """Mean and full covariance (first output) of the moment-matched mixture, original units."""
        level = self.levels if level is None else level
        _check_level(level, self.levels)
        x = jnp.asarray(self.scaling.x(linalg.as_matrix(x_star, "x_star")))
        layers, noises = self.unpack(jnp.asarray(self.params.values))
        N = x.shape[0]
        c = self.scaling.y_scale
        if level == 1:
            m, cov = layer_posterior(self.layers[0], layers[0], x, full_cov=True)
            return np.asarray(m[:, 0]) * c, np.asarray(cov[0]) * c**2
        s = self.config.samples_predict if s is None else s
        eps = jax.random.normal(jax.random.PRNGKey(seed), (s, N, level, self.d_out))

        @jax.jit
        def one(e):
            inp = self._propagate(layers, noises, x[None], e[None], level - 1)
            m, cov = layer_posterior(self.layers[level - 1], layers[level - 1], inp, full_cov=True)
            return m[:, 0], cov[0]

        means = np.empty((s, N))
        cov_sum = np.zeros((N, N))
        for i in range(s):
            m, cov = one(eps[i])
            means[i] = np.asarray(m)
            cov_sum += np.asarray(cov)
        centered = means - means.mean(axis=0)
        cov = cov_sum / s + centered.T @ centered / s
        cov = 0.5 * (cov + cov.T)
        return means.mean(axis=0) * c, cov * c**2


def _check_level(level: int, levels: int) -> None:
    if not isinstance(level, (int, np.integer)) or not 1 <= level <= levels:
        raise UnknownFidelity(f"fidelity {level} not in 1..{levels}")
