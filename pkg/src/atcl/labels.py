"""Complementary-label synthesis and the uniform transition matrix.

Class indices are 0-based throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np


@dataclass(frozen=True)
class TransitionMatrix:
    K: int
    q: np.ndarray
    q_inv: np.ndarray


def uniform_transition(K: int) -> TransitionMatrix:
    """Zero diagonal, ``1/(K-1)`` elsewhere, with its closed-form inverse.

    ``Q = (J - I)/(K-1)`` so ``Q^-1 = J - (K-1) I``: row ``c`` of the inverse
    applied to a loss vector gives ``sum_j l_j - (K-1) l_c``.
    """
    if K <= 2:
        raise ValueError(f"uniform complementary labels need K > 2, got {K}")
    ones = np.ones((K, K))
    eye = np.eye(K)
    return TransitionMatrix(K, (ones - eye) / (K - 1), ones - (K - 1) * eye)


def complementary_class_prob(tm: TransitionMatrix, eta: np.ndarray) -> np.ndarray:
    """``eta_bar_i = sum_{j != i} Q_ji eta_j`` for one or many rows of ``eta``."""
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape[-1] != tm.K:
        raise ValueError(f"eta has {eta.shape[-1]} classes, transition matrix has {tm.K}")
    q = tm.q * (1 - np.eye(tm.K))
    return eta @ q


def sample_scl(y: int, K: int, rng: np.random.Generator) -> frozenset:
    if K <= 2:
        raise ValueError(f"K must exceed 2, got {K}")
    if not 0 <= y < K:
        raise ValueError(f"label {y} outside [0, {K})")
    c = int(rng.integers(K - 1))
    return frozenset({c + (c >= y)})


def mcl_size_probs(K: int) -> np.ndarray:
    """``p(s) = C(K-1, s) / (2^(K-1) - 1)`` for ``s = 1..K-1`` (index ``s-1``)."""
    w = np.array([comb(K - 1, s) for s in range(1, K)], dtype=np.float64)
    return w / w.sum()


def sample_mcl(y: int, K: int, rng: np.random.Generator, size: int | None = None) -> frozenset:
    """Draw a complementary set; ``size`` pins |set| instead of sampling it."""
    if K <= 2:
        raise ValueError(f"K must exceed 2, got {K}")
    if not 0 <= y < K:
        raise ValueError(f"label {y} outside [0, {K})")
    if size is None:
        size = int(rng.choice(np.arange(1, K), p=mcl_size_probs(K)))
    elif not 1 <= size <= K - 1:
        raise ValueError(f"complementary set size must be in [1, {K - 1}], got {size}")
    candidates = np.array([j for j in range(K) if j != y])
    return frozenset(int(j) for j in rng.choice(candidates, size=size, replace=False))


@dataclass(frozen=True)
class ComplementaryExample:
    x: np.ndarray
    y: int  # evaluation only
    cl_set: frozenset

    def __post_init__(self):
        if not self.cl_set:
            raise ValueError("complementary set must be nonempty")
        if self.y in self.cl_set:
            raise ValueError(f"ordinary label {self.y} inside complementary set {set(self.cl_set)}")


@dataclass
class ComplementaryDataset:
    """Array-backed complementary training set.

    Training code reads only ``x`` and ``cl_mask``; ``y`` is kept for
    evaluation (pseudo-label accuracy, relabel accuracy) and nothing else.
    """

    x: np.ndarray
    cl_mask: np.ndarray  # [n, K] bool
    y: np.ndarray
    mode: str = "scl"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n, K = self.cl_mask.shape
        if self.x.shape[0] != n or self.y.shape[0] != n:
            raise ValueError("x, y and cl_mask disagree on the number of examples")
        if n and (self.cl_mask.sum(axis=1) < 1).any():
            raise ValueError("every example needs at least one complementary label")
        if n and self.cl_mask[np.arange(n), self.y].any():
            raise ValueError("an ordinary label appears in its own complementary set")

    @property
    def K(self) -> int:
        return self.cl_mask.shape[1]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i: int) -> ComplementaryExample:
        return ComplementaryExample(
            self.x[i], int(self.y[i]), frozenset(int(j) for j in np.flatnonzero(self.cl_mask[i]))
        )

    def cl_sets(self) -> list:
        return [frozenset(int(j) for j in np.flatnonzero(row)) for row in self.cl_mask]

    def subset(self, idx: np.ndarray) -> "ComplementaryDataset":
        return ComplementaryDataset(self.x[idx], self.cl_mask[idx], self.y[idx], self.mode, dict(self.meta))


def cl_mask_from_sets(cl_sets: list, K: int) -> np.ndarray:
    mask = np.zeros((len(cl_sets), K), dtype=bool)
    for i, s in enumerate(cl_sets):
        mask[i, list(s)] = True
    return mask


def make_complementary_dataset(
    x: np.ndarray,
    y: np.ndarray,
    K: int,
    mode: str = "scl",
    seed: int = 0,
    mcl_size: int | None = None,
) -> ComplementaryDataset:
    """Attach a fresh complementary set to every ``(x, y)`` pair.

    ``mode="mcl"`` draws set sizes from :func:`mcl_size_probs` unless
    ``mcl_size`` fixes the size for every example.
    """
    from atcl.rng import stream

    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if mode not in ("scl", "mcl"):
        raise ValueError(f"mode must be 'scl' or 'mcl', got {mode!r}")
    rng = stream(seed, "complementary", mode)
    if mode == "scl":
        sets = [sample_scl(int(t), K, rng) for t in y]
    else:
        sets = [sample_mcl(int(t), K, rng, mcl_size) for t in y]
    mask = cl_mask_from_sets(sets, K)
    if x.ndim == 1 and x.shape[0] == 0:
        x = x.reshape(0, 0)
    return ComplementaryDataset(x, mask, y, mode, {"seed": seed, "mcl_size": mcl_size})
