import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from atcl.labels import cl_mask_from_sets
from atcl.losses import (COMPLEMENTARY, KINDS, PLA, SCL_ONLY, LossSpec, complementary_loss, loss,
                         ordinary_ce, per_sample_losses, pla_loss, ure_backward_ce)
from atcl.nn import MlpModel
from atcl.tensor import ContractError, Tensor

from conftest import fd_grad, rel_err

K10 = 10


def uniform_logits(n=1, K=K10):
    return Tensor(np.zeros((n, K)))


def scl_mask(cbar, K):
    return cl_mask_from_sets([{c} for c in cbar], K)


def test_kind_catalogue():
    assert len(KINDS) == 14
    assert set(KINDS) == {"ce", "forward", "free", "nn", "scl_nl", "scl_exp", "exp", "log", "ure_ce",
                          "pla_log", "pla_exp", "pla_scl_nl", "pla_scl_exp", "pla_mcl_log"}


def test_ordinary_ce_examples():
    assert ordinary_ce(uniform_logits(), [3]).item() == pytest.approx(math.log(10), abs=1e-12)
    assert ordinary_ce(Tensor([[math.log(2), 0.0]]), [1]).item() == pytest.approx(-math.log(1 / 3), abs=1e-12)
    assert ordinary_ce(Tensor([[math.log(2), 0.0]]), [0]).item() == pytest.approx(0.405465, abs=1e-6)
    assert ordinary_ce(Tensor([[60.0, 0.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-11)
    with pytest.raises(ContractError):
        ordinary_ce(uniform_logits(), [10])


def test_ure_examples():
    assert ure_backward_ce(uniform_logits(K=3), scl_mask([1], 3)).item() == pytest.approx(math.log(3), abs=1e-12)
    logits = Tensor(np.log([[0.7, 0.2, 0.1]]))
    l2 = ure_backward_ce(logits, scl_mask([1], 3)).item()
    l3 = ure_backward_ce(logits, scl_mask([2], 3)).item()
    assert l2 == pytest.approx(1.049822, abs=1e-6)
    assert l3 == pytest.approx(-0.336472, abs=1e-6)
    assert (l2 + l3) / 2 == pytest.approx(-math.log(0.7), abs=1e-12)


@pytest.mark.parametrize("K", [3, 5, 10])
def test_ure_unbiased_over_all_complementary_labels(K):
    rng = np.random.default_rng(K)
    logits = rng.normal(scale=3, size=(200, K))
    y = rng.integers(0, K, size=200)
    total = np.zeros(200)
    for shift in range(1, K):
        cbar = (y + shift) % K
        total += per_sample_losses(LossSpec("ure_ce"), Tensor(logits), scl_mask(cbar, K)).data
    ce = per_sample_losses(LossSpec("ce"), Tensor(logits), y=y).data
    np.testing.assert_allclose(total / (K - 1), ce, atol=1e-12)


UNIFORM_K10 = {
    "log": -9 * math.log(0.9),
    "free": -math.log(0.1),
    "ure_ce": -math.log(0.1),
    "scl_nl": -math.log(0.9),
    "scl_exp": math.exp(0.1),
    "exp": 9 * math.exp(-0.9),
    "forward": -math.log(0.1),
}


@pytest.mark.parametrize("kind", sorted(UNIFORM_K10))
def test_uniform_prediction_closed_forms(kind):
    got = complementary_loss(LossSpec(kind), uniform_logits(), scl_mask([4], K10)).item()
    assert got == pytest.approx(UNIFORM_K10[kind], abs=1e-9)


def test_nn_at_uniform_prediction():
    # batch of one: class partials are ln 10 (nine classes) and -8 ln 10 (the complementary one)
    got = loss(LossSpec("nn"), uniform_logits(), scl_mask([4], K10)).item()
    assert got == pytest.approx(9 * math.log(10), abs=1e-9)


def test_nn_clamps_class_partials_over_the_batch():
    rng = np.random.default_rng(0)
    K, n = 4, 6
    logits = rng.normal(size=(n, K))
    cbar = rng.integers(0, K, size=n)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    partial = np.zeros(K)
    for k in range(K):
        partial[k] = (-np.log(p[:, k])).sum() - (K - 1) * (-np.log(p[cbar == k, k])).sum()
    expected = np.maximum(partial / n, 0).sum()
    assert loss(LossSpec("nn"), Tensor(logits), scl_mask(cbar, K)).item() == pytest.approx(expected, abs=1e-12)


def test_log_with_full_complement_is_ce():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(20, 7))
    y = rng.integers(0, 7, size=20)
    mask = np.ones((20, 7), dtype=bool)
    mask[np.arange(20), y] = False
    for kind in ("log", "pla_mcl_log"):
        spec = LossSpec(kind, 1.0 if kind in PLA else None)
        got = per_sample_losses(spec, Tensor(logits), mask, pseudo=y).data
        np.testing.assert_allclose(got, per_sample_losses(LossSpec("ce"), Tensor(logits), y=y).data, atol=1e-12)


def test_scl_only_kinds_reject_multiple_labels():
    mask = cl_mask_from_sets([{1, 2}], 4)
    for kind in sorted(SCL_ONLY - PLA):
        with pytest.raises(ContractError):
            loss(LossSpec(kind), uniform_logits(K=4), mask)
    for kind in ("exp", "log"):
        assert np.isfinite(loss(LossSpec(kind), uniform_logits(K=4), mask).item())


def test_pla_examples_at_uniform_prediction():
    mask = scl_mask([4], K10)
    pla = lambda g: pla_loss(LossSpec("pla_log", g), uniform_logits(), mask, [0]).item()  # noqa: E731
    assert pla(0.5) == pytest.approx(-9 * math.log(0.5), abs=1e-9)
    assert pla(0.0) == pytest.approx(-9 * math.log(0.1), abs=1e-9)
    assert pla(1.0) == pytest.approx(UNIFORM_K10["log"], abs=1e-12)


def test_pla_pseudo_label_inside_complementary_set():
    with pytest.raises(ContractError):
        pla_loss(LossSpec("pla_log", 0.5), uniform_logits(), scl_mask([4], K10), [4])


@pytest.mark.parametrize("kw", [dict(kind="log", gamma=0.5), dict(kind="pla_log"),
                                dict(kind="pla_log", gamma=1.5), dict(kind="bogus")])
def test_loss_spec_validation(kw):
    with pytest.raises(ValueError):
        LossSpec(**kw)


def _payload(rng, n, K, kind):
    y = rng.integers(0, K, size=n)
    if kind in SCL_ONLY or kind == "ce":
        cbar = (y + rng.integers(1, K, size=n)) % K
        mask = scl_mask(cbar, K)
    else:
        mask = np.zeros((n, K), dtype=bool)
        for i in range(n):
            others = [j for j in range(K) if j != y[i]]
            size = rng.integers(1, K)
            mask[i, rng.choice(others, size=size, replace=False)] = True
    pseudo = np.array([rng.choice(np.flatnonzero(~row)) for row in mask])
    return mask, pseudo, y


@given(st.sampled_from([k for k in KINDS if k.startswith("pla")]),
       st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_pla_reduces_to_base_at_gamma_one(kind, g, seed):
    from atcl.losses import PLA_BASE

    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(scale=2, size=(5, 6)))
    mask, pseudo, _ = _payload(rng, 5, 6, kind)
    got = per_sample_losses(LossSpec(kind, 1.0), logits, mask, pseudo).data
    base = per_sample_losses(LossSpec(PLA_BASE[kind]), logits, mask).data
    if kind == "pla_log":
        np.testing.assert_array_equal(got, base)
    else:
        np.testing.assert_allclose(got, base, atol=1e-12)
    assert np.all(np.isfinite(per_sample_losses(LossSpec(kind, g), logits, mask, pseudo).data))


def test_pla_gamma_zero_is_pseudo_label_ce_scaled():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(8, 5))
    mask, pseudo, _ = _payload(rng, 8, 5, "pla_log")
    got = per_sample_losses(LossSpec("pla_log", 0.0), Tensor(logits), mask, pseudo).data
    ce = per_sample_losses(LossSpec("ce"), Tensor(logits), y=pseudo).data
    np.testing.assert_allclose(got, 4 * ce, atol=1e-12)


@pytest.mark.parametrize("kind", sorted(PLA))
def test_gamma_derivative_matches_difference_quotient(kind):
    rng = np.random.default_rng(5)
    logits = Tensor(rng.normal(size=(6, 5)))
    mask, pseudo, _ = _payload(rng, 6, 5, kind)
    f = lambda g: loss(LossSpec(kind, g), logits, mask, pseudo).item()  # noqa: E731
    g0, h = 0.4, 1e-5
    d_fd = (f(g0 + h) - f(g0 - h)) / (2 * h)
    d_fine = (f(g0 + h / 10) - f(g0 - h / 10)) / (2 * h / 10)
    assert d_fd == pytest.approx(d_fine, rel=1e-4, abs=1e-6)
    assert abs(f(g0 + 1e-9) - f(g0)) < 1e-6  # continuity


@given(hnp.arrays(np.float64, 5, elements=st.floats(0.01, 1.0)), hnp.arrays(np.float64, 5, elements=st.floats(0.01, 1.0)))
def test_log_and_scl_nl_decrease_with_unlabelled_mass(a, b):
    mask = scl_mask([0], 5)
    la, lb = np.log(a / a.sum())[None], np.log(b / b.sum())[None]
    sa, sb = 1 - a[0] / a.sum(), 1 - b[0] / b.sum()
    if abs(sa - sb) < 1e-9:
        return
    for kind in ("log", "scl_nl"):
        va = loss(LossSpec(kind), Tensor(la), mask).item()
        vb = loss(LossSpec(kind), Tensor(lb), mask).item()
        assert (va < vb) == (sa > sb)


# finite-difference gradient checks ---------------------------------------


def _off_kinks(model, rng, shape, margin=1e-3):
    """Inputs whose hidden pre-activations stay clear of the ReLU kink.

    Central differences straddling a kink do not estimate the derivative.
    """
    while True:
        x = rng.uniform(size=shape)
        h, ok = x, True
        for W, b in zip(model.weights[:-1], model.biases[:-1]):
            pre = h @ W.data + b.data
            ok = ok and np.abs(pre).min() > margin
            h = np.maximum(pre, 0)
        if ok:
            return x


def _spec(kind, rng):
    return LossSpec(kind, float(rng.uniform(0.05, 0.95)) if kind in PLA else None)


@pytest.mark.parametrize("kind", KINDS)
def test_logit_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    K, n = 5, 3
    worst = 0.0
    for _ in range(100):
        spec = _spec(kind, rng)
        mask, pseudo, y = _payload(rng, n, K, kind)
        x = rng.normal(scale=1.5, size=(n, K))
        t = Tensor(x.copy(), requires_grad=True)
        loss(spec, t, mask, pseudo, y).backward()
        g_fd = fd_grad(lambda a: loss(spec, Tensor(a), mask, pseudo, y).item(), x.copy())
        worst = max(worst, rel_err(t.grad, g_fd))
    assert worst <= 1e-4


@pytest.mark.parametrize("kind", KINDS)
def test_parameter_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()) + 1)
    K, n, d = 4, 3, 3
    worst = 0.0
    for _ in range(100):
        model = MlpModel.init([d, 5, K], rng, np.float64)
        spec = _spec(kind, rng)
        mask, pseudo, y = _payload(rng, n, K, kind)
        x = _off_kinks(model, rng, (n, d))
        model.zero_grad()
        loss(spec, model.forward(x), mask, pseudo, y).backward()
        auto = np.concatenate([p.grad.ravel() for p in model.parameters()])
        flat = model.flat_parameters().copy()

        def f(v):
            off = 0
            for p in model.parameters():
                p.data[...] = v[off : off + p.data.size].reshape(p.data.shape)
                off += p.data.size
            return loss(spec, model.frozen().forward(x), mask, pseudo, y).item()

        g_fd = fd_grad(f, flat.copy())
        f(flat)
        worst = max(worst, rel_err(auto, g_fd))
    assert worst <= 1e-4
