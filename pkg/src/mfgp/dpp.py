"""k-DPP sampling over a finite candidate set.

Exact sampling: pick ``k`` eigenvectors of the L-ensemble with probabilities
given by elementary symmetric polynomials of the eigenvalues, then draw items
from the resulting projection DPP one at a time.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import linalg
from .errors import InfeasibleCardinality, NotPositiveDefinite, TooLarge

BRUTE_FORCE_MAX = 15
RECONSTRUCTION_TOL = 1e-8
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class LEnsemble:
    l: np.ndarray
    candidates: np.ndarray | None = None

    def __post_init__(self):
        l = linalg.symmetrize(linalg.as_matrix(self.l, "L"))
        object.__setattr__(self, "l", l)

    @property
    def n(self) -> int:
        return self.l.shape[0]


def build_l(mean, cov, candidates=None) -> LEnsemble:
    """``L_ij = mean_i * cov_ij * mean_j``."""
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    cov = linalg.as_matrix(cov, "covariance")
    if cov.shape != (mean.size, mean.size):
        raise ValueError(f"covariance is {cov.shape}, mean has {mean.size} entries")
    if not np.all(np.isfinite(mean)):
        raise ValueError("mean must be finite")
    l = mean[:, None] * cov * mean[None, :]
    if np.any(mean != 0):
        # PSD check; zero rows from zero weights are tolerated by the jitter ladder
        linalg.cholesky(l)
    return LEnsemble(l, candidates)


def _eigen(l: np.ndarray):
    lam, vec = np.linalg.eigh(l)
    norm = np.linalg.norm(l)
    if norm > 0:
        err = np.linalg.norm((vec * lam) @ vec.T - l) / norm
        if err > RECONSTRUCTION_TOL:
            raise NotPositiveDefinite(f"eigendecomposition reconstruction error {err:.2e}")
    if lam.size and lam.min() < -1e-8 * max(lam.max(), 1.0):
        raise NotPositiveDefinite(f"L has a negative eigenvalue {lam.min():.3e}")
    cutoff = RANK_RTOL * max(lam.max(initial=0.0), 0.0)
    lam = np.where(lam > cutoff, lam, 0.0)
    return lam, vec


def _elementary_symmetric(lam: np.ndarray, k: int):
    """Column-rescaled table ``E[l, n]`` for ``e_l(lam_1..lam_n)``.

    Column ``n`` is divided by ``scale[n]`` relative to column ``n-1`` so large
    candidate sets neither overflow nor underflow.
    """
    N = lam.size
    E = np.zeros((k + 1, N + 1))
    E[0, :] = 1.0
    scale = np.ones(N + 1)
    for n in range(1, N + 1):
        col = E[:, n - 1].copy()
        col[1:] += lam[n - 1] * E[:-1, n - 1]
        s = col.max()
        E[:, n] = col / s
        scale[n] = s
    return E, scale


class KdppSampler:
    """Reusable exact k-DPP sampler (eigendecomposition and table cached)."""

    def __init__(self, ensemble: LEnsemble, k: int):
        if not 1 <= k <= ensemble.n:
            raise InfeasibleCardinality(f"k={k} outside 1..{ensemble.n}")
        self.k = k
        self.lam, self.vec = _eigen(ensemble.l)
        rank = int(np.count_nonzero(self.lam))
        if k > rank:
            raise InfeasibleCardinality(f"k={k} exceeds the rank {rank} of L")
        self.E, self.scale = _elementary_symmetric(self.lam, k)

    def _select_eigenvectors(self, rng) -> np.ndarray:
        E, scale, lam = self.E, self.scale, self.lam
        chosen, remaining = [], self.k
        for n in range(lam.size, 0, -1):
            if remaining == 0:
                break
            if n == remaining:  # every remaining eigenvector is forced
                chosen.extend(range(n - 1, -1, -1))
                break
            p = lam[n - 1] * E[remaining - 1, n - 1] / (E[remaining, n] * scale[n])
            if rng.uniform() < p:
                chosen.append(n - 1)
                remaining -= 1
        return np.array(sorted(chosen))

    def sample(self, rng) -> np.ndarray:
        V = self.vec[:, self._select_eigenvectors(rng)]
        K = V @ V.T  # projection kernel of rank k
        items = []
        for _ in range(self.k):
            p = np.clip(np.diag(K), 0.0, None)
            p[items] = 0.0
            i = int(rng.choice(p.size, p=p / p.sum()))
            items.append(i)
            col = K[:, i].copy()
            K = K - np.outer(col, col) / col[i]
        return np.array(sorted(items))


def sample_kdpp(ensemble: LEnsemble, k: int, seed: int = 0) -> np.ndarray:
    """Sorted indices of an exact k-DPP draw, deterministic per ``seed``."""
    return KdppSampler(ensemble, k).sample(np.random.default_rng(seed))


def subset_probabilities(ensemble: LEnsemble, k: int) -> dict[tuple[int, ...], float]:
    """``P(S) = det(L_S) / sum_|T|=k det(L_T)`` by enumeration."""
    n = ensemble.n
    if n > BRUTE_FORCE_MAX:
        raise TooLarge(f"enumeration limited to N <= {BRUTE_FORCE_MAX}, got {n}")
    if not 1 <= k <= n:
        raise InfeasibleCardinality(f"k={k} outside 1..{n}")
    dets = {}
    for s in combinations(range(n), k):
        idx = np.array(s)
        dets[s] = max(float(np.linalg.det(ensemble.l[np.ix_(idx, idx)])), 0.0)
    total = sum(dets.values())
    if total <= 0:
        raise InfeasibleCardinality(f"every size-{k} subset has zero determinant")
    return {s: d / total for s, d in dets.items()}


def inclusion_probs_bruteforce(ensemble: LEnsemble, k: int) -> np.ndarray:
    probs = np.zeros(ensemble.n)
    for s, p in subset_probabilities(ensemble, k).items():
        probs[list(s)] += p
    return probs
