"""Multi-fidelity datasets and the input/output scaling shared by all models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InsufficientData


@dataclass(frozen=True)
class MultiFidelityDataset:
    """Inputs ``xs[t]`` (N_t x D_in) and targets ``ys[t]`` (N_t x D_out), low to high."""

    xs: tuple[np.ndarray, ...]
    ys: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.xs) == 0 or len(self.xs) != len(self.ys):
            raise InsufficientData("dataset needs at least one fidelity level")
        xs, ys = [], []
        for t, (x, y) in enumerate(zip(self.xs, self.ys), start=1):
            x = np.asarray(x, dtype=np.float64)
            y = np.asarray(y, dtype=np.float64)
            x = x[:, None] if x.ndim == 1 else x
            y = y[:, None] if y.ndim == 1 else y
            if x.shape[0] == 0:
                raise InsufficientData(f"fidelity {t} has no observations")
            if x.shape[0] != y.shape[0]:
                raise DimensionMismatch(f"fidelity {t}: {x.shape[0]} inputs, {y.shape[0]} targets")
            xs.append(x)
            ys.append(y)
        if len({x.shape[1] for x in xs}) != 1 or len({y.shape[1] for y in ys}) != 1:
            raise DimensionMismatch("all fidelities must share input and output dimensions")
        object.__setattr__(self, "xs", tuple(xs))
        object.__setattr__(self, "ys", tuple(ys))

    @property
    def levels(self) -> int:
        return len(self.xs)

    @property
    def d_in(self) -> int:
        return self.xs[0].shape[1]

    @property
    def d_out(self) -> int:
        return self.ys[0].shape[1]

    def n(self, level: int) -> int:
        return self.xs[level - 1].shape[0]

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(x.shape[0] for x in self.xs)

    def stacked(self):
        """All rows as ``(x, y, fidelity)`` with 1-based fidelity labels."""
        fid = np.concatenate([np.full(x.shape[0], t) for t, x in enumerate(self.xs, start=1)])
        return np.vstack(self.xs), np.vstack(self.ys), fid

    @classmethod
    def from_stacked(cls, x, y, fidelity) -> "MultiFidelityDataset":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        fidelity = np.asarray(fidelity, dtype=int)
        T = int(fidelity.max())
        return cls(tuple(x[fidelity == t] for t in range(1, T + 1)),
                   tuple(y[fidelity == t] for t in range(1, T + 1)))


@dataclass(frozen=True)
class Scaling:
    """Min-max input scaling and one shared output scale.

    Outputs are divided (not centered) by the standard deviation of the
    highest-fidelity training targets so every level keeps its original
    relationship to the others.
    """

    x_lo: np.ndarray
    x_hi: np.ndarray
    y_scale: float

    @classmethod
    def fit(cls, data: MultiFidelityDataset) -> "Scaling":
        x_all = np.vstack(data.xs)
        lo, hi = x_all.min(axis=0), x_all.max(axis=0)
        hi = np.where(hi > lo, hi, lo + 1.0)
        scale = float(np.std(data.ys[-1]))
        if not np.isfinite(scale) or scale <= 1e-12:
            scale = float(np.std(np.vstack(data.ys)))
        if not np.isfinite(scale) or scale <= 1e-12:
            scale = 1.0
        return cls(lo, hi, scale)

    @classmethod
    def identity(cls, d_in: int) -> "Scaling":
        return cls(np.zeros(d_in), np.ones(d_in), 1.0)

    def x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        x = x[:, None] if x.ndim == 1 else x
        return (x - self.x_lo) / (self.x_hi - self.x_lo)

    def y(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) / self.y_scale

    def apply(self, data: MultiFidelityDataset) -> MultiFidelityDataset:
        return MultiFidelityDataset(tuple(self.x(x) for x in data.xs),
                                    tuple(self.y(y) for y in data.ys))

    def to_dict(self) -> dict:
        return {"x_lo": self.x_lo.tolist(), "x_hi": self.x_hi.tolist(), "y_scale": self.y_scale}

    @classmethod
    def from_dict(cls, d) -> "Scaling":
        return cls(np.asarray(d["x_lo"], float), np.asarray(d["x_hi"], float), float(d["y_scale"]))
