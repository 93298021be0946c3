"""Adam with per-segment freeze masks.

Frozen coordinates receive no update and their moment estimates are not
advanced.  Bias correction uses a per-coordinate step counter so that a
segment released after a frozen phase starts with properly corrected moments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterable

import jax
import jax.numpy as jnp
import numpy as np

from .diff import ParamLayout, ParamVector
from .errors import NonFiniteGradient


@dataclass(frozen=True)
class FreezeMask:
    """Segment name -> frozen flag; must cover every segment of a layout."""

    frozen: dict[str, bool]

    @classmethod
    def none(cls, layout: ParamLayout) -> "FreezeMask":
        return cls({name: False for name in layout.names})

    @classmethod
    def freezing(cls, layout: ParamLayout, names: Iterable[str]) -> "FreezeMask":
        names = set(names)
        unknown = names - set(layout.names)
        if unknown:
            raise KeyError(f"unknown segments: {sorted(unknown)}")
        return cls({name: name in names for name in layout.names})

    def active(self, layout: ParamLayout) -> np.ndarray:
        """Boolean vector, True for coordinates that may move."""
        if set(self.frozen) != set(layout.names):
            raise ValueError("freeze mask does not cover the parameter layout exactly")
        return layout.mask(lambda name: not self.frozen[name])


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: np.ndarray  # per-coordinate update counts
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), **hyper)


def adam_update(x, m, v, t, grad, active, lr, beta1, beta2, epsilon):
    """One masked Adam update; works on numpy or traced jax arrays."""
    t_new = jnp.where(active, t + 1.0, t)
    m_new = jnp.where(active, beta1 * m + (1.0 - beta1) * grad, m)
    v_new = jnp.where(active, beta2 * v + (1.0 - beta2) * grad * grad, v)
    t_safe = jnp.maximum(t_new, 1.0)
    m_hat = m_new / (1.0 - beta1**t_safe)
    v_hat = v_new / (1.0 - beta2**t_safe)
    x_new = jnp.where(active, x - lr * m_hat / (jnp.sqrt(v_hat) + epsilon), x)
    return x_new, m_new, v_new, t_new


def adam_step(
    state: AdamState, params: ParamVector, grad, mask: FreezeMask | None = None
) -> tuple[ParamVector, AdamState]:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ValueError("gradient length does not match parameters")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient contains NaN or Inf")
    active = (mask or FreezeMask.none(params.layout)).active(params.layout)
    x, m, v, t = adam_update(
        params.values, state.m, state.v, state.t, grad, active,
        state.lr, state.beta1, state.beta2, state.epsilon,
    )
    x, m, v, t = (np.asarray(a, dtype=np.float64) for a in (x, m, v, t))
    # frozen coordinates must stay bit-identical
    x = np.where(active, x, params.values)
    new_state = replace(state, m=m, v=v, t=t, step_count=state.step_count + 1)
    return ParamVector(x, params.layout), new_state


@dataclass
class AdamRun:
    x: np.ndarray
    state: AdamState
    values: np.ndarray  # objective value before each completed step
    diverged: bool


def run_adam(
    loss: Callable,
    x0,
    steps: int,
    state: AdamState,
    active=None,
    key=None,
    chunk: int = 100,
) -> AdamRun:
    """Minimize ``loss(x, key)`` with jit-compiled Adam.

    ``key`` seeds a per-step stream (``fold_in(key, step)``) for stochastic
    objectives; deterministic losses may ignore it.  A step whose value or
    gradient is non-finite is discarded and the run stops after the current
    chunk, returning the last iterate whose objective was finite.
    """
    x = jnp.asarray(x0, dtype=jnp.float64)
    active = jnp.ones(x.shape, bool) if active is None else jnp.asarray(active, bool)
    key = jax.random.PRNGKey(0) if key is None else key
    lr, b1, b2, eps = state.lr, state.beta1, state.beta2, state.epsilon
    vg = jax.value_and_grad(loss)

    def one(carry, _):
        x, x_prev, m, v, t, n, bad = carry
        val, g = vg(x, jax.random.fold_in(key, n))
        ok = jnp.isfinite(val) & jnp.all(jnp.isfinite(g)) & ~bad
        g = jnp.where(ok, g, 0.0)
        x2, m2, v2, t2 = adam_update(x, m, v, t, g, active & ok, lr, b1, b2, eps)
        # on failure fall back to the last point whose objective was finite
        x2 = jnp.where(ok, x2, jnp.where(bad, x, x_prev))
        return (x2, jnp.where(ok, x, x_prev), m2, v2, t2, n + 1, bad | ~ok), val

    @jax.jit
    def run_chunk(carry):
        return jax.lax.scan(one, carry, None, length=chunk)

    @jax.jit
    def run_tail(carry, _length=steps % chunk):
        return jax.lax.scan(one, carry, None, length=_length)

    carry = (x, x, jnp.asarray(state.m), jnp.asarray(state.v), jnp.asarray(state.t),
             jnp.asarray(state.step_count), jnp.asarray(False))
    values, done = [], 0
    while done < steps:
        if steps - done >= chunk:
            carry, vals = run_chunk(carry)
            done += chunk
        else:
            carry, vals = run_tail(carry)
            done = steps
        values.append(np.asarray(vals))
        if bool(carry[6]):
            break
    x, _, m, v, t, n, bad = carry
    vals = np.concatenate(values) if values else np.empty(0)
    if bool(bad):
        # drop the entries from the failed step onwards
        first_bad = np.flatnonzero(~np.isfinite(vals))
        vals = vals[: first_bad[0]] if first_bad.size else vals
    new_state = replace(state, m=np.asarray(m), v=np.asarray(v), t=np.asarray(t),
                        step_count=int(n))
    return AdamRun(np.asarray(x), new_state, vals, bool(bad))
