"""Ordinary, complementary and pseudo-label-corrected losses.

Every loss maps a ``[n, K]`` logits tensor to a differentiable scalar (the
batch mean).  Probabilities are clamped to ``[1e-12, 1 - 1e-12]`` before
any logarithm, and every ``log`` argument is clamped the same way.
Complementary sets arrive as a boolean ``[n, K]`` mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from atcl.labels import TransitionMatrix, uniform_transition
from atcl.tensor import ContractError, Tensor, clip, exp, log, pick, relu, softmax

P_MIN = 1e-12
P_MAX = 1.0 - 1e-12

SCL_ONLY = {"forward", "free", "nn", "scl_nl", "scl_exp", "ure_ce",
            "pla_log", "pla_exp", "pla_scl_nl", "pla_scl_exp"}
COMPLEMENTARY = {"forward", "free", "nn", "scl_nl", "scl_exp", "exp", "log", "ure_ce"}
PLA = {"pla_log", "pla_exp", "pla_scl_nl", "pla_scl_exp", "pla_mcl_log"}
KINDS = ("ce",) + tuple(sorted(COMPLEMENTARY)) + tuple(sorted(PLA))
PLA_BASE = {"pla_log": "log", "pla_exp": "exp", "pla_scl_nl": "scl_nl",
            "pla_scl_exp": "scl_exp", "pla_mcl_log": "log"}


@dataclass(frozen=True)
class LossSpec:
    kind: str
    gamma: float | None = None
    transition: TransitionMatrix | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if (self.gamma is not None) != (self.kind in PLA):
            raise ValueError(f"gamma is required for PLA kinds and only for them (kind={self.kind})")
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")

    @property
    def needs_pseudo_labels(self) -> bool:
        return self.kind in PLA

    @property
    def needs_ordinary_labels(self) -> bool:
        return self.kind == "ce"


def probs(logits: Tensor) -> Tensor:
    return clip(softmax(logits), P_MIN, P_MAX)


def _safe_log(t: Tensor) -> Tensor:
    return log(clip(t, P_MIN, P_MAX))


def _mask(cl_mask, n: int, K: int) -> np.ndarray:
    cl_mask = np.asarray(cl_mask, dtype=bool)
    if cl_mask.shape != (n, K):
        raise ContractError(f"complementary mask shape {cl_mask.shape} != logits shape {(n, K)}")
    return cl_mask


def _single(cl_mask: np.ndarray, kind: str) -> np.ndarray:
    counts = cl_mask.sum(axis=1)
    if (counts != 1).any():
        raise ContractError(f"{kind} needs exactly one complementary label per sample")
    return np.argmax(cl_mask, axis=1)


def _labels(labels, n: int, K: int, what: str) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,) or (n and (labels.min() < 0 or labels.max() >= K)):
        raise ContractError(f"{what} must be {n} class indices in [0, {K})")
    return labels


def ordinary_ce(logits: Tensor, y) -> Tensor:
    n, K = logits.shape
    y = _labels(y, n, K, "ordinary labels")
    return (-log(pick(probs(logits), y))).mean()


def ure_backward_ce(logits: Tensor, cl_mask, tm: TransitionMatrix | None = None) -> Tensor:
    """Backward-corrected cross entropy ``e_c^T Q^-1 l`` via the matrix itself."""
    n, K = logits.shape
    cbar = _single(_mask(cl_mask, n, K), "ure_ce")
    tm = tm or uniform_transition(K)
    neg_log = -log(probs(logits))  # [n, K] per-class CE
    rows = Tensor(tm.q_inv[cbar].astype(logits.dtype))
    return (neg_log * rows).sum(axis=1).mean()


def _forward(p: Tensor, cl: np.ndarray, cbar: np.ndarray, tm: TransitionMatrix) -> Tensor:
    weight = tm.q[:, cbar].T * ~cl  # row i: T_{j, cbar_i} for j != cbar_i
    return -_safe_log((p * Tensor(weight.astype(p.dtype))).sum(axis=1))


def _free(p: Tensor, cbar: np.ndarray, K: int) -> Tensor:
    logp = log(p)
    return (K - 1) * pick(logp, cbar) - logp.sum(axis=1)


def _nn(p: Tensor, cbar: np.ndarray, K: int) -> Tensor:
    # class-partial risks R_k = (1/n)[sum_i l_k(x_i) - (K-1) sum_{i: cbar_i=k} l_k(x_i)]
    n = p.shape[0]
    neg_log = -log(p)
    coef = np.ones((n, K))
    coef[np.arange(n), cbar] -= K - 1
    partial = (neg_log * Tensor(coef.astype(p.dtype))).sum(axis=0) * (1.0 / n)
    return relu(partial).sum()


def _unlabeled_mass(p: Tensor, cl: np.ndarray) -> Tensor:
    return (p * Tensor((~cl).astype(p.dtype))).sum(axis=1)


def per_sample_losses(spec: LossSpec, logits: Tensor, cl_mask=None, pseudo=None, y=None) -> Tensor:
    """Per-sample loss vector ``[n]``.

    For ``nn`` this is the single-sample estimator (the clamp applied to a
    batch of one); the training loss of ``nn`` is the batch-level clamp in
    :func:`loss`, which does not decompose over samples.
    """
    n, K = logits.shape
    kind = spec.kind
    if kind == "ce":
        y = _labels(y, n, K, "ordinary labels")
        return -log(pick(probs(logits), y))
    cl = _mask(cl_mask, n, K)
    p = probs(logits)
    cbar = _single(cl, kind) if kind in SCL_ONLY else None
    size = cl.sum(axis=1)
    if (size < 1).any() or (size > K - 1).any():
        raise ContractError("complementary set sizes must lie in [1, K-1]")
    weight = Tensor(((K - 1) / size).astype(p.dtype))

    if kind == "nn":
        coef = np.ones((n, K))
        coef[np.arange(n), cbar] -= K - 1
        return relu(-log(p) * Tensor(coef.astype(p.dtype))).sum(axis=1)
    if kind == "ure_ce":
        tm = spec.transition or uniform_transition(K)
        rows = Tensor(tm.q_inv[cbar].astype(p.dtype))
        return (-log(p) * rows).sum(axis=1)
    if kind == "forward":
        return _forward(p, cl, cbar, spec.transition or uniform_transition(K))
    if kind == "free":
        return _free(p, cbar, K)
    if kind == "scl_nl":
        return -_safe_log(1.0 - pick(p, cbar))
    if kind == "scl_exp":
        return exp(pick(p, cbar))
    if kind == "exp":
        return weight * exp(-_unlabeled_mass(p, cl))
    if kind == "log":
        return -(weight * _safe_log(_unlabeled_mass(p, cl)))

    # pseudo-label attack kinds
    pseudo = _labels(pseudo, n, K, "pseudo labels")
    if cl[np.arange(n), pseudo].any():
        raise ContractError("a pseudo label falls inside its complementary set")
    g = spec.gamma
    p_hat = pick(p, pseudo)
    if kind == "pla_log":
        return -((K - 1) * _safe_log(g * _unlabeled_mass(p, cl) + (1 - g) * p_hat))
    if kind == "pla_mcl_log":
        return -(weight * _safe_log(g * _unlabeled_mass(p, cl) + (1 - g) * p_hat))
    if kind == "pla_exp":
        return (K - 1) * exp(-(g * _unlabeled_mass(p, cl)) - (1 - g) * p_hat)
    if kind == "pla_scl_nl":
        return -_safe_log(g * (1.0 - pick(p, cbar)) + (1 - g) * p_hat)
    if kind == "pla_scl_exp":
        return exp(g * pick(p, cbar) - (1 - g) * p_hat)
    raise ContractError(f"unhandled loss kind {kind}")


def loss(spec: LossSpec, logits: Tensor, cl_mask=None, pseudo=None, y=None) -> Tensor:
    """Batch-mean loss of ``spec`` (``nn`` uses its batch-level clamp)."""
    if spec.kind == "nn":
        n, K = logits.shape
        cl = _mask(cl_mask, n, K)
        return _nn(probs(logits), _single(cl, "nn"), K)
    if spec.kind == "ure_ce":
        return ure_backward_ce(logits, cl_mask, spec.transition)
    return per_sample_losses(spec, logits, cl_mask, pseudo, y).mean()


def complementary_loss(spec: LossSpec, logits: Tensor, cl_mask) -> Tensor:
    if spec.kind not in COMPLEMENTARY:
        raise ContractError(f"{spec.kind} is not a complementary loss")
    return loss(spec, logits, cl_mask)


def pla_loss(spec: LossSpec, logits: Tensor, cl_mask, pseudo) -> Tensor:
    if spec.kind not in PLA:
        raise ContractError(f"{spec.kind} is not a pseudo-label attack loss")
    return loss(spec, logits, cl_mask, pseudo=pseudo)
