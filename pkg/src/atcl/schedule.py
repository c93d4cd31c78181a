"""Warm-up and pseudo-label schedules, plus the cached prediction table."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from atcl.attack import AttackBudget


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str  # warmup_cos | pla_linear
    a_max: float
    duration_Es: int
    offset_Ei: int = 0

    def __post_init__(self):
        if self.kind not in ("warmup_cos", "pla_linear"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.a_max < 0:
            raise ValueError(f"a_max must be >= 0, got {self.a_max}")
        if self.duration_Es < 1:
            raise ValueError(f"duration_Es must be >= 1, got {self.duration_Es}")
        if self.offset_Ei < 0:
            raise ValueError(f"offset_Ei must be >= 0, got {self.offset_Ei}")


def progress(spec: ScheduleSpec, epoch: int) -> float:
    """Fraction of the ramp completed at ``epoch``, in ``[0, 1]``."""
    e = max(epoch - spec.offset_Ei, 0)
    return min(e / spec.duration_Es, 1.0)


def schedule_value(spec: ScheduleSpec, epoch: int) -> float:
    t = progress(spec, epoch)
    if spec.kind == "warmup_cos":
        return spec.a_max / 2 * (1 - math.cos(t * math.pi))
    return spec.a_max * (1 - t)


WARMUP_VARIANTS = ("eps_alpha", "eps_k", "k_only")


def budget_at_epoch(base: AttackBudget, spec: ScheduleSpec, variant: str, epoch: int) -> AttackBudget:
    """Scale ``base`` by the warm-up schedule.

    ``eps_alpha`` scales epsilon and step size together, ``eps_k`` scales
    epsilon and the step count (ceiling), ``k_only`` keeps the ball fixed and
    scales the step count (nearest integer, at least one once the ramp starts).
    """
    if not base.epsilon > 0:
        raise ValueError("warm-up needs a positive base epsilon")
    if variant not in WARMUP_VARIANTS:
        raise ValueError(f"unknown warm-up variant {variant!r}")
    value = schedule_value(spec, epoch)
    frac = value / spec.a_max if spec.a_max > 0 else 0.0
    if variant == "eps_alpha":
        return replace(base, epsilon=value, alpha=frac * base.alpha)
    if variant == "eps_k":
        # the 1e-9 guard keeps 0.5 * 40 from ceiling to 21 through rounding noise
        steps = math.ceil(frac * base.steps - 1e-9) if frac > 0 else 0
        return replace(base, epsilon=value, steps=steps)
    steps = int(round(frac * base.steps))
    if frac > 0:
        steps = max(steps, 1)
    return replace(base, steps=steps)


class PredictionCache:
    """Exponential moving average of softmax outputs, complementary entries zeroed."""

    def __init__(self, cl_mask: np.ndarray, beta: float = 0.9, dtype=np.float64):
        if not 0 <= beta < 1:
            raise ValueError(f"beta must be in [0, 1), got {beta}")
        cl_mask = np.asarray(cl_mask, dtype=bool)
        self.beta = beta
        self.frozen = False
        self.skipped_updates = 0
        self.cl_mask = cl_mask
        keep = (~cl_mask).astype(dtype)
        self.table = keep / keep.sum(axis=1, keepdims=True)

    def __len__(self):
        return self.table.shape[0]

    def ema_update(self, idx: np.ndarray, p_theta: np.ndarray):
        if self.frozen:
            self.skipped_updates += 1
            return
        rows = self.beta * self.table[idx] + (1 - self.beta) * p_theta
        rows[self.cl_mask[idx]] = 0
        self.table[idx] = rows

    def pseudo_labels(self, idx: np.ndarray) -> np.ndarray:
        """Arg-max over non-complementary classes; ties go to the lowest index."""
        rows = np.where(self.cl_mask[idx], -np.inf, self.table[idx])
        return np.argmax(rows, axis=1)

    def maybe_freeze(self, eps_e: float, eps_max: float, ratio: float = 0.5):
        if eps_e > eps_max * ratio:
            self.frozen = True


def pseudo_label(cache: PredictionCache, i: int) -> int:
    return int(cache.pseudo_labels(np.array([i]))[0])
