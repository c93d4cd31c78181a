"""Training and attack-quality measurements.

Covers the gradient-direction covariance trace over a mini-batch, layer
gradient norms, resemblance of complementary-loss attacks to the
ordinary-label attack, robust accuracy and pseudo-label accuracy.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from atcl.attack import AttackBudget, AttackObjective, oracle_attack, pgd
from atcl.losses import PLA, LossSpec
from atcl.nn import MlpModel
from atcl.schedule import PredictionCache
from atcl.tensor import ContractError

log = logging.getLogger(__name__)

METRICS = (
    "grad_trace_first",
    "grad_norm_first",
    "grad_norm_last",
    "cosine",
    "l1",
    "pred_gap",
    "natural_acc",
    "robust_acc",
    "pl_acc",
)


@dataclass
class DiagnosticRecord:
    epoch: int
    metric: str
    value: float
    loss_kind: str = ""
    breakdown: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unregistered metric {self.metric!r}")


def grad_direction_cov_trace(grads, normalize: bool = True) -> float:
    """Trace of the population covariance of per-sample gradient directions.

    With ``normalize`` each gradient is scaled to unit L2 norm first (zero
    vectors are dropped), so the result equals ``1 - ||mean direction||^2``.
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 2:
        raise ContractError("need a [batch >= 2, P] array of per-sample gradients")
    if normalize:
        norms = np.linalg.norm(g, axis=1)
        keep = norms > 0
        if not keep.any():
            log.warning("all per-sample gradients are zero; trace reported as 0")
            return 0.0
        g = g[keep] / norms[keep, None]
    centered = g - g.mean(axis=0)
    return float((centered**2).sum() / g.shape[0])


def first_layer_cov_trace(x: np.ndarray, dz: np.ndarray, normalize: bool = True) -> float:
    """Same quantity for the first affine layer without materialising gradients.

    The first-layer gradient of sample ``i`` (weight and bias) is the outer
    product ``[x_i, 1] (x) dz_i``, where ``dz_i`` is the loss gradient at that
    sample's first pre-activation.  Inner products of such vectors factor
    into products of inner products, so the trace needs only two Gram
    matrices.
    """
    a = np.concatenate([np.asarray(x, np.float64), np.ones((x.shape[0], 1))], axis=1)
    b = np.asarray(dz, dtype=np.float64)
    if a.shape[0] < 2:
        raise ContractError("need at least two samples")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    sq = (na * nb) ** 2
    if normalize:
        keep = nb > 0
        if not keep.any():
            log.warning("all per-sample gradients are zero; trace reported as 0")
            return 0.0
        a = a[keep] / na[keep, None]
        b = b[keep] / nb[keep, None]
        sq = np.ones(a.shape[0])
    n = a.shape[0]
    mean_sq = ((a @ a.T) * (b @ b.T)).sum() / n**2
    return float(sq.mean() - mean_sq)


def layer_grad_norm(model: MlpModel, which: str = "first") -> float:
    i = {"first": 0, "last": len(model.weights) - 1}[which]
    w, b = model.weights[i], model.biases[i]
    if w.grad is None or b.grad is None:
        raise ContractError(f"layer {i} has no gradients")
    return float(np.sqrt((w.grad.astype(np.float64) ** 2).sum() + (b.grad.astype(np.float64) ** 2).sum()))


def sign_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; rows with a zero vector score 0."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    dots = (a * b).sum(axis=1)
    return np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)


def _true_class_prob(model: MlpModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return model.predict_proba(x)[np.arange(len(y)), y]


def attack_quality(
    model: MlpModel,
    x: np.ndarray,
    cl_mask: np.ndarray,
    y: np.ndarray,
    budget: AttackBudget,
    kinds,
    gamma: float = 0.5,
    pseudo: np.ndarray | None = None,
    all_steps: bool = False,
) -> dict:
    """Compare attacks driven by each loss against the ordinary-label attack.

    For each kind this reports the mean cosine between sign-gradient vectors
    (first PGD step, or averaged over steps with ``all_steps``), the mean L1
    distance between the adversarial inputs, and the drop of the model's
    probability on the true class.  PLA kinds use ``gamma`` and, when no
    pseudo labels are given, the model's own arg-max outside the
    complementary set.
    """
    if y is None:
        raise ContractError("attack_quality needs ordinary labels")
    y = np.asarray(y)
    oracle_signs: list = []
    x_oracle = oracle_attack(model, x, y, budget, signs=oracle_signs)
    clean = _true_class_prob(model, x, y)
    if pseudo is None:
        probs = np.where(cl_mask, -np.inf, model.predict_proba(x))
        pseudo = np.argmax(probs, axis=1)
    out = {}
    for kind in kinds:
        spec = kind if isinstance(kind, LossSpec) else LossSpec(kind, gamma if kind in PLA else None)
        if spec.kind == "ce":
            objective = AttackObjective(spec, y=y)
        else:
            objective = AttackObjective(spec, cl_mask=cl_mask, pseudo=pseudo if spec.kind in PLA else None)
        signs: list = []
        x_adv = pgd(model, x, objective, budget, signs=signs)
        if signs:
            steps = range(len(signs)) if all_steps else range(1)
            cosine = float(np.mean([sign_cosine(signs[t], oracle_signs[t]).mean() for t in steps]))
        else:
            cosine = 1.0
        l1 = float(np.abs(x_adv - x_oracle).reshape(len(x), -1).sum(axis=1).mean())
        gap = float((clean - _true_class_prob(model, x_adv, y)).mean())
        out[spec.kind] = {"cosine": cosine, "l1": l1, "pred_gap": gap}
    return out


def robust_eval(model: MlpModel, x: np.ndarray, y: np.ndarray, budget: AttackBudget,
                batch_size: int = 500, rng=None) -> dict:
    if len(x) == 0:
        raise ContractError("robust_eval needs a nonempty test set")
    y = np.asarray(y)
    nat = rob = 0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start : start + batch_size], y[start : start + batch_size]
        nat += int((model.predict(xb) == yb).sum())
        xa = oracle_attack(model, xb, yb, budget, rng)
        rob += int((model.predict(xa) == yb).sum())
    return {"natural_acc": nat / len(x), "robust_acc": rob / len(x)}


def pseudo_label_accuracy(cache: PredictionCache, y: np.ndarray) -> float:
    y = np.asarray(y)
    return float((cache.pseudo_labels(np.arange(len(cache))) == y).mean())


def write_records_csv(path, records: list):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "metric", "loss_kind", "value"])
        for r in records:
            w.writerow([r.epoch, r.metric, r.loss_kind, repr(float(r.value))])
