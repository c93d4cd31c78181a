import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from atcl.attack import AttackBudget
from atcl.diagnostics import (DiagnosticRecord, attack_quality, first_layer_cov_trace, grad_direction_cov_trace,
                              layer_grad_norm, pseudo_label_accuracy, robust_eval, sign_cosine, write_records_csv)
from atcl.labels import cl_mask_from_sets
from atcl.losses import LossSpec, loss, per_sample_losses
from atcl.nn import MlpModel, per_sample_grads
from atcl.schedule import PredictionCache
from atcl.tensor import ContractError, Tensor


def brute_trace(g, normalize=True):
    g = np.asarray(g, dtype=np.float64)
    if normalize:
        n = np.linalg.norm(g, axis=1)
        g = g[n > 0] / n[n > 0, None]
    return float(np.trace(np.cov(g.T, bias=True).reshape(g.shape[1], g.shape[1])))


def test_trace_examples():
    assert grad_direction_cov_trace(np.ones((4, 3))) == pytest.approx(0.0, abs=1e-15)
    assert grad_direction_cov_trace([[1.0], [-1.0]]) == pytest.approx(1.0)
    with pytest.raises(ContractError):
        grad_direction_cov_trace([[1.0, 2.0]])


def test_all_zero_gradients_report_zero(caplog):
    assert grad_direction_cov_trace(np.zeros((3, 2))) == 0.0
    assert "zero" in caplog.text


@given(hnp.arrays(np.float64, (6, 4), elements=st.floats(-5, 5)), st.booleans())
def test_trace_matches_brute_force(g, normalize):
    if normalize and not (np.linalg.norm(g, axis=1) > 0).any():
        return
    got = grad_direction_cov_trace(g, normalize)
    if normalize and (np.linalg.norm(g, axis=1) > 0).sum() < 2:
        assert got == pytest.approx(0.0, abs=1e-9)
        return
    assert got == pytest.approx(brute_trace(g, normalize), abs=1e-9)
    if normalize:
        assert -1e-12 <= got <= 1 + 1e-12


@given(st.integers(0, 2**31), st.booleans())
def test_factorised_first_layer_trace(seed, normalize):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 3))
    dz = rng.normal(size=(5, 4))
    dz[rng.integers(5)] = 0.0
    full = np.stack([np.concatenate([np.outer(xi, di).ravel(), di]) for xi, di in zip(x, dz)])
    assert first_layer_cov_trace(x, dz, normalize) == pytest.approx(grad_direction_cov_trace(full, normalize), abs=1e-9)


def test_first_layer_trace_agrees_with_per_sample_backprop():
    rng = np.random.default_rng(8)
    model = MlpModel.init([4, 6, 3], rng, np.float64)
    x = rng.uniform(size=(7, 4))
    mask = cl_mask_from_sets([{int(c)} for c in rng.integers(0, 3, 7)], 3)
    spec = LossSpec("ure_ce")
    grads = per_sample_grads(model, x, lambda lg, i: loss(spec, lg, mask[i]))
    n_first = model.weights[0].data.size + model.biases[0].data.size
    first = np.stack(grads)[:, :n_first]
    frozen = model.frozen()
    _, pre = frozen.forward_trace(Tensor(x, requires_grad=True))
    per_sample_losses(spec, pre[-1], mask).sum().backward()
    assert first_layer_cov_trace(x, pre[0].grad) == pytest.approx(grad_direction_cov_trace(first), abs=1e-9)


def test_layer_grad_norm_examples():
    m = MlpModel([np.zeros((1, 1))], [np.zeros(1)])
    m.weights[0].grad = np.array([[3.0]])
    m.biases[0].grad = np.array([4.0])
    assert layer_grad_norm(m, "first") == 5.0 and layer_grad_norm(m, "last") == 5.0
    m.weights[0].grad[:] = 0
    m.biases[0].grad[:] = 0
    assert layer_grad_norm(m) == 0.0


def test_layer_grad_norm_homogeneity():
    rng = np.random.default_rng(0)
    m = MlpModel.init([3, 4, 2], rng, np.float64)
    x, y = rng.uniform(size=(5, 3)), np.array([0, 1, 1, 0, 1])
    loss(LossSpec("ce"), m.forward(x), y=y).backward()
    base = layer_grad_norm(m, "last")
    m.zero_grad()
    (loss(LossSpec("ce"), m.forward(x), y=y) * -3.0).backward()
    assert layer_grad_norm(m, "last") == pytest.approx(3 * base, rel=1e-12)


def test_sign_cosine_examples():
    assert sign_cosine(np.array([[1.0, 1.0]]), np.array([[1.0, -1.0]]))[0] == 0.0
    assert sign_cosine(np.array([[1.0, -1.0]]), np.array([[1.0, -1.0]]))[0] == pytest.approx(1.0)
    assert sign_cosine(np.zeros((1, 2)), np.ones((1, 2)))[0] == 0.0


def _toy(seed=0, n=12, K=4):
    rng = np.random.default_rng(seed)
    model = MlpModel.init([5, 8, K], rng, np.float64)
    x = rng.uniform(size=(n, 5))
    y = rng.integers(0, K, n)
    mask = cl_mask_from_sets([{int((t + 1) % K)} for t in y], K)
    return model, x, y, mask


def test_attack_quality_self_comparison():
    model, x, y, mask = _toy()
    q = attack_quality(model, x, mask, y, AttackBudget(0.2, 0.05, 5), ["ce", "log", "pla_log"])
    assert q["ce"]["cosine"] == pytest.approx(1.0) and q["ce"]["l1"] == 0.0
    for v in q.values():
        assert -1 <= v["cosine"] <= 1 and v["l1"] >= 0


def test_attack_quality_zero_budget():
    model, x, y, mask = _toy(1)
    q = attack_quality(model, x, mask, y, AttackBudget(0.0, 0.05, 5), ["ce", "log", "ure_ce"])
    assert all(v["pred_gap"] == 0.0 and v["l1"] == 0.0 for v in q.values())
    with pytest.raises(ContractError):
        attack_quality(model, x, mask, None, AttackBudget(0.1, 0.05, 5), ["ce"])


def test_robust_eval_examples():
    m = MlpModel([np.zeros((2, 3))], [np.array([0.0, 5.0, 0.0])])  # always predicts class 1
    x = np.random.default_rng(0).uniform(size=(10, 2))
    res = robust_eval(m, x, np.ones(10, dtype=int), AttackBudget(0.0, 0.01, 10))
    assert res == {"natural_acc": 1.0, "robust_acc": 1.0}
    model, x, y, _ = _toy(2)
    res = robust_eval(model, x, y, AttackBudget(0.0, 0.01, 20), batch_size=5)
    assert res["robust_acc"] == res["natural_acc"]
    with pytest.raises(ContractError):
        robust_eval(model, x[:0], y[:0], AttackBudget(0.1, 0.01, 1))


def test_pseudo_label_accuracy_examples():
    K = 10
    y = np.arange(20) % K
    cbar = (y + 1 + np.arange(20) % 3) % K
    mask = cl_mask_from_sets([{int(c)} for c in cbar], K)
    cache = PredictionCache(mask)
    # fresh cache: the lowest-index class outside each complementary set
    expected = np.mean([min(j for j in range(K) if j != c) == t for t, c in zip(y, cbar)])
    assert pseudo_label_accuracy(cache, y) == pytest.approx(expected)
    cache.table = np.eye(K)[y]
    assert pseudo_label_accuracy(cache, y) == 1.0
    wrong = [min(j for j in range(K) if j not in (t, c)) for t, c in zip(y, cbar)]
    cache.table = np.eye(K)[wrong]
    assert pseudo_label_accuracy(cache, y) == 0.0


def test_record_registry_and_csv(tmp_path):
    with pytest.raises(ValueError):
        DiagnosticRecord(0, "bogus", 1.0)
    path = tmp_path / "d.csv"
    write_records_csv(path, [DiagnosticRecord(3, "cosine", 0.5, "log")])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["epoch", "metric", "loss_kind", "value"]
    assert rows[1] == ["3", "cosine", "log", "0.5"]
