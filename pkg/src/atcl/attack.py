"""L-infinity PGD over any differentiable loss from ``atcl.losses``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from atcl.losses import LossSpec, loss
from atcl.nn import MlpModel
from atcl.tensor import ContractError, Tensor


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float
    alpha: float
    steps: int
    init: str = "natural"  # natural | random
    value_range: tuple | None = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        # a zero ball (the warm-up start) may carry a zero step size
        if self.steps > 0 and self.epsilon > 0 and not self.alpha > 0:
            raise ValueError(f"alpha must be > 0 when steps > 0 and epsilon > 0, got {self.alpha}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.init not in ("natural", "random"):
            raise ValueError(f"init must be 'natural' or 'random', got {self.init!r}")
        if self.value_range is not None and self.value_range[0] > self.value_range[1]:
            raise ValueError(f"empty value range {self.value_range}")


@dataclass
class AttackObjective:
    """A loss plus the per-sample label payload that loss consumes."""

    spec: LossSpec
    cl_mask: np.ndarray | None = None
    pseudo: np.ndarray | None = None
    y: np.ndarray | None = None

    def __post_init__(self):
        if self.spec.needs_ordinary_labels:
            if self.y is None:
                raise ContractError(f"{self.spec.kind} objective needs ordinary labels")
        elif self.cl_mask is None:
            raise ContractError(f"{self.spec.kind} objective needs complementary labels")
        if self.spec.needs_pseudo_labels and self.pseudo is None:
            raise ContractError(f"{self.spec.kind} objective needs pseudo labels")

    def __call__(self, logits: Tensor) -> Tensor:
        return loss(self.spec, logits, self.cl_mask, self.pseudo, self.y)


def project_ball(x0: np.ndarray, x: np.ndarray, epsilon: float, value_range=None) -> np.ndarray:
    """Clamp ``x`` into ``[x0 - eps, x0 + eps]`` coordinate-wise, then into ``value_range``."""
    if x0.shape != x.shape:
        raise ContractError(f"shape mismatch {x0.shape} vs {x.shape}")
    out = np.clip(x, x0 - epsilon, x0 + epsilon)
    if value_range is not None:
        out = np.clip(out, value_range[0], value_range[1])
    return out


def input_gradient(model: MlpModel, x: np.ndarray, objective: AttackObjective) -> np.ndarray:
    """Gradient of the objective w.r.t. the input; parameters stay untouched."""
    xt = Tensor(x, requires_grad=True)
    objective(model.forward(xt)).backward()
    return xt.grad


def pgd(
    model: MlpModel,
    x: np.ndarray,
    objective: AttackObjective,
    budget: AttackBudget,
    rng: np.random.Generator | None = None,
    signs: list | None = None,
) -> np.ndarray:
    """``x_{t+1} = proj(x_t + alpha * sign(grad))`` for ``budget.steps`` steps.

    When ``signs`` is a list, the sign vector of every step is appended to it.
    """
    x = np.asarray(x)
    if budget.epsilon == 0 or budget.steps == 0:
        return x.copy()
    frozen = model.frozen()
    if budget.init == "random":
        if rng is None:
            raise ContractError("random init needs an rng stream")
        noise = rng.uniform(-budget.epsilon, budget.epsilon, size=x.shape).astype(x.dtype)
        xa = project_ball(x, x + noise, budget.epsilon, budget.value_range)
    else:
        xa = x.copy()
    for _ in range(budget.steps):
        step = np.sign(input_gradient(frozen, xa, objective))
        if signs is not None:
            signs.append(step)
        xa = project_ball(x, xa + budget.alpha * step, budget.epsilon, budget.value_range).astype(x.dtype)
    return xa


def oracle_attack(model, x, y, budget: AttackBudget, rng=None, signs=None) -> np.ndarray:
    return pgd(model, x, AttackObjective(LossSpec("ce"), y=np.asarray(y)), budget, rng, signs)
