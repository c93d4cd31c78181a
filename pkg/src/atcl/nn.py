"""MLP classifier and first-order optimizers on top of ``atcl.tensor``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from atcl.tensor import ContractError, Tensor, linear, relu


class DimensionError(ContractError):
    def __init__(self, layer: int, expected: int, got: int):
        super().__init__(f"layer {layer}: expected input width {expected}, got {got}")
        self.layer = layer


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


class MlpModel:
    """Affine layers with ReLU in between; the last layer emits logits."""

    def __init__(self, weights: list, biases: list):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i in range(1, len(weights)):
            if weights[i - 1].shape[1] != weights[i].shape[0]:
                raise DimensionError(i, weights[i - 1].shape[1], weights[i].shape[0])
        for i, (w, b) in enumerate(zip(weights, biases)):
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match {w.shape}")
        self.weights = [w if isinstance(w, Tensor) else Tensor(w, requires_grad=True) for w in weights]
        self.biases = [b if isinstance(b, Tensor) else Tensor(b, requires_grad=True) for b in biases]

    @classmethod
    def init(cls, dims: list, rng: np.random.Generator, dtype=np.float32) -> "MlpModel":
        """Fan-in scaled uniform init in ``[-sqrt(1/fan_in), sqrt(1/fan_in)]``."""
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(1.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
            biases.append(rng.uniform(-bound, bound, size=(fan_out,)).astype(dtype))
        return cls(weights, biases)

    @property
    def dims(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def named_parameters(self) -> list:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.extend(((f"layer{i}.weight", w), (f"layer{i}.bias", b)))
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def frozen(self) -> "MlpModel":
        """A view sharing parameter storage but excluded from differentiation."""
        return MlpModel([Tensor(w.data) for w in self.weights], [Tensor(b.data) for b in self.biases])

    def copy(self) -> "MlpModel":
        return MlpModel(
            [Tensor(w.data.copy(), requires_grad=True) for w in self.weights],
            [Tensor(b.data.copy(), requires_grad=True) for b in self.biases],
        )

    def forward_trace(self, x) -> tuple:
        """Logits plus the list of pre-activation tensors, one per layer."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 2:
            raise ContractError(f"expected a [batch, d] input, got shape {x.shape}")
        h = x
        pre = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if h.shape[1] != w.shape[0]:
                raise DimensionError(i, w.shape[0], h.shape[1])
            z = linear(h, w, b)
            pre.append(z)
            h = relu(z) if i < last else z
        return h, pre

    def forward(self, x) -> Tensor:
        return self.forward_trace(x)[0]

    __call__ = forward

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        logits = self.frozen().forward(x).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.frozen().forward(x).data, axis=1)

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])


def _param_grads(model: MlpModel) -> list:
    grads = []
    for name, p in model.named_parameters():
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient")
        grads.append(p.grad)
    return grads


def init_velocity(model: MlpModel) -> list:
    return [np.zeros_like(p.data) for p in model.parameters()]


def sgd_step(model: MlpModel, cfg: SgdConfig, velocity: list, lr: float | None = None):
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""
    lr = cfg.learning_rate if lr is None else lr
    grads = _param_grads(model)
    for p, g, v in zip(model.parameters(), grads, velocity):
        g = g + cfg.weight_decay * p.data if cfg.weight_decay else g
        v *= cfg.momentum
        v += g
        p.data -= (lr * v).astype(p.data.dtype, copy=False)
    model.zero_grad()


class AdamState:
    def __init__(self, model: MlpModel):
        self.m = init_velocity(model)
        self.v = init_velocity(model)
        self.t = 0


def adam_step(model: MlpModel, cfg: AdamConfig, state: AdamState, lr: float | None = None):
    lr = cfg.learning_rate if lr is None else lr
    grads = _param_grads(model)
    state.t += 1
    c1 = 1 - cfg.beta1 ** state.t
    c2 = 1 - cfg.beta2 ** state.t
    for p, g, m, v in zip(model.parameters(), grads, state.m, state.v):
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.data.dtype, copy=False)
    model.zero_grad()


def per_sample_grads(model: MlpModel, x: np.ndarray, loss_fn) -> list:
    """Flattened parameter gradient of ``loss_fn`` on each sample alone.

    ``loss_fn(logits, index)`` receives the logits of a one-row batch and
    the integer array ``[i]`` so it can look up that sample's labels.
    """
    x = np.asarray(x)
    if x.shape[0] < 1:
        raise ContractError("per_sample_grads needs at least one sample")
    out = []
    for i in range(x.shape[0]):
        model.zero_grad()
        loss = loss_fn(model.forward(x[i : i + 1]), np.array([i]))
        loss.backward()
        out.append(np.concatenate([p.grad.ravel() for p in model.parameters()]))
    model.zero_grad()
    return out
