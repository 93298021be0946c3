"""Flat parameter vectors, gradients, and finite-difference verification.

Gradients come from reverse-mode differentiation (``jax``).  Objectives are
functions of a flat float64 vector; stochastic objectives must close over an
externally drawn noise realization so the function being differentiated is
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import jax
import jax.numpy as jnp
import numpy as np

from .errors import NonFiniteObjective


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=int))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class ParamLayout:
    """Ordered, contiguous named segments of a flat vector."""

    segments: tuple[Segment, ...]

    @classmethod
    def from_shapes(cls, shapes: Mapping[str, tuple[int, ...]]) -> "ParamLayout":
        segs, offset = [], 0
        for name, shape in shapes.items():
            seg = Segment(name, offset, tuple(int(s) for s in shape))
            segs.append(seg)
            offset = seg.stop
        return cls(tuple(segs))

    @property
    def size(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def __getitem__(self, name: str) -> Segment:
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(s.name == name for s in self.segments)

    def unpack(self, flat) -> dict:
        """Split a flat vector (numpy or traced jax) into named arrays."""
        return {s.name: flat[s.offset:s.stop].reshape(s.shape) for s in self.segments}

    def pack(self, values: Mapping[str, object]) -> np.ndarray:
        out = np.empty(self.size)
        for s in self.segments:
            v = np.asarray(values[s.name], dtype=np.float64)
            if v.size != s.size:
                raise ValueError(f"segment {s.name}: expected {s.size} values, got {v.size}")
            out[s.offset:s.stop] = v.ravel()
        return out

    def mask(self, selected: Callable[[str], bool]) -> np.ndarray:
        """Boolean per-coordinate vector, True where ``selected(segment name)``."""
        m = np.zeros(self.size, dtype=bool)
        for s in self.segments:
            if selected(s.name):
                m[s.offset:s.stop] = True
        return m


@dataclass
class ParamVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ValueError("parameter vector length does not match its layout")

    @classmethod
    def from_dict(cls, values: Mapping[str, object]) -> "ParamVector":
        layout = ParamLayout.from_shapes({k: np.shape(v) for k, v in values.items()})
        return cls(layout.pack(values), layout)

    def segment(self, name: str) -> np.ndarray:
        s = self.layout[name]
        return self.values[s.offset:s.stop].reshape(s.shape)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: np.array(v) for k, v in self.layout.unpack(self.values).items()}

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


@dataclass
class GradResult:
    value: float
    gradient: np.ndarray


def _flat(at) -> np.ndarray:
    if isinstance(at, ParamVector):
        return at.values
    return np.atleast_1d(np.asarray(at, dtype=np.float64))


def gradient(objective: Callable, at) -> GradResult:
    """Value and exact gradient of a jax-traceable scalar objective."""
    x = _flat(at)
    value, grad = jax.value_and_grad(lambda v: jnp.reshape(objective(v), ()))(jnp.asarray(x))
    value, grad = float(value), np.asarray(grad, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteObjective("objective or gradient is not finite")
    return GradResult(value, grad)


def _compiled(objective: Callable, x0: np.ndarray) -> Callable:
    jitted = jax.jit(objective)
    try:
        jitted(x0)
    except TypeError:  # not traceable; evaluate eagerly
        return objective
    return jitted


def finite_difference(objective: Callable, at, step: float = 1e-5) -> np.ndarray:
    x0 = _flat(at).copy()
    objective = _compiled(objective, x0)
    grad = np.empty_like(x0)
    for i in range(x0.size):
        x = x0.copy()
        x[i] = x0[i] + step
        fp = float(objective(x))
        x[i] = x0[i] - step
        fm = float(objective(x))
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    passed: bool
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} (coordinate {self.worst_index})"


def check_grad(objective: Callable, at, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare :func:`gradient` to central differences; never raises on mismatch."""
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = gradient(objective, at).gradient
    numeric = finite_difference(objective, at, step)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-8)
    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel[worst]) if rel.size else 0.0
    return GradCheckReport(max_rel, worst, bool(max_rel <= tol), analytic, numeric)
