import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atcl.attack import AttackBudget
from atcl.labels import cl_mask_from_sets
from atcl.schedule import PredictionCache, ScheduleSpec, budget_at_epoch, pseudo_label, schedule_value

WARM = ScheduleSpec("warmup_cos", 0.3, 50)
DECAY = ScheduleSpec("pla_linear", 1.0, 50)
BASE = AttackBudget(0.3, 0.01, 40)


def test_warmup_values():
    assert schedule_value(WARM, 0) == 0.0
    assert schedule_value(WARM, 25) == pytest.approx(0.15, abs=1e-12)
    for e in (50, 51, 200):
        assert schedule_value(WARM, e) == pytest.approx(0.3, abs=1e-12)


def test_pla_linear_values():
    assert schedule_value(DECAY, 0) == 1.0
    assert schedule_value(DECAY, 10) == pytest.approx(0.8, abs=1e-12)
    assert schedule_value(DECAY, 50) == 0.0 and schedule_value(DECAY, 99) == 0.0


def test_offset_delays_the_ramp():
    spec = ScheduleSpec("warmup_cos", 0.3, 50, offset_Ei=10)
    assert [schedule_value(spec, e) for e in range(11)] == [0.0] * 11
    assert schedule_value(spec, 35) == pytest.approx(0.15, abs=1e-12)
    assert schedule_value(ScheduleSpec("pla_linear", 1.0, 50, 10), 5) == 1.0


@given(st.floats(0, 2), st.integers(1, 80), st.integers(0, 20), st.integers(0, 150))
def test_monotone_in_epoch(a, es, ei, e):
    up = ScheduleSpec("warmup_cos", a, es, ei)
    down = ScheduleSpec("pla_linear", a, es, ei)
    assert schedule_value(up, e) <= schedule_value(up, e + 1) + 1e-15
    assert schedule_value(down, e) >= schedule_value(down, e + 1) - 1e-15
    assert 0 <= schedule_value(up, e) <= a + 1e-15


def test_schedule_spec_validation():
    with pytest.raises(ValueError):
        ScheduleSpec("warmup_cos", 0.3, 0)
    with pytest.raises(ValueError):
        ScheduleSpec("warmup_cos", -1.0, 10)
    with pytest.raises(ValueError):
        ScheduleSpec("step", 0.3, 10)


def test_budget_variants_at_midpoint():
    b = budget_at_epoch(BASE, WARM, "eps_alpha", 25)
    assert (b.epsilon, b.alpha, b.steps) == pytest.approx((0.15, 0.005, 40))
    b = budget_at_epoch(BASE, WARM, "eps_k", 25)
    assert b.epsilon == pytest.approx(0.15) and b.alpha == 0.01 and b.steps == 20
    b = budget_at_epoch(BASE, WARM, "k_only", 25)
    assert (b.epsilon, b.alpha, b.steps) == (0.3, 0.01, 20)


def test_budget_at_ramp_start_is_natural():
    b = budget_at_epoch(BASE, WARM, "eps_alpha", 0)
    assert b.epsilon == 0.0
    assert budget_at_epoch(BASE, WARM, "k_only", 0).steps == 0
    assert budget_at_epoch(BASE, WARM, "k_only", 1).steps >= 1
    with pytest.raises(ValueError):
        budget_at_epoch(AttackBudget(0.0, 0.01, 1), WARM, "eps_alpha", 3)


def test_cache_initialisation():
    c = PredictionCache(cl_mask_from_sets([{0}, {1, 2}], 4))
    np.testing.assert_allclose(c.table, [[0, 1 / 3, 1 / 3, 1 / 3], [0.5, 0, 0, 0.5]])


def test_ema_update_example():
    c = PredictionCache(cl_mask_from_sets([{0}], 3), beta=0.9)
    c.ema_update(np.array([0]), np.array([[0.2, 0.3, 0.5]]))
    np.testing.assert_allclose(c.table, [[0.0, 0.48, 0.50]], atol=1e-15)
    assert pseudo_label(c, 0) == 2


def test_ema_limits_and_fixed_point():
    mask = cl_mask_from_sets([{1}], 3)
    c = PredictionCache(mask, beta=0.0)
    c.ema_update(np.array([0]), np.array([[0.2, 0.3, 0.5]]))
    np.testing.assert_array_equal(c.table, [[0.2, 0.0, 0.5]])
    c = PredictionCache(mask, beta=0.9)
    row = c.table.copy()
    c.ema_update(np.array([0]), row)
    np.testing.assert_allclose(c.table, row, atol=1e-15)


def test_fresh_cache_tie_goes_to_lowest_index():
    c = PredictionCache(cl_mask_from_sets([{1}], 3))
    assert pseudo_label(c, 0) == 0


def test_freeze_is_strict_and_latches():
    c = PredictionCache(cl_mask_from_sets([{0}], 3))
    c.maybe_freeze(0.15, 0.3)
    assert not c.frozen
    c.maybe_freeze(0.151, 0.3)
    assert c.frozen
    c.maybe_freeze(0.0, 0.3)
    assert c.frozen
    before = c.table.copy()
    c.ema_update(np.array([0]), np.array([[1.0, 0.0, 0.0]]))
    assert np.array_equal(before, c.table) and c.skipped_updates == 1


@given(st.integers(0, 2**31), st.integers(3, 8), st.floats(0, 0.99))
def test_cache_never_scores_complementary_labels(seed, K, beta):
    rng = np.random.default_rng(seed)
    n = 6
    sets = [set(rng.choice(K, size=rng.integers(1, K), replace=False).tolist()) for _ in range(n)]
    mask = cl_mask_from_sets(sets, K)
    c = PredictionCache(mask, beta)
    for _ in range(3):
        idx = rng.choice(n, size=3, replace=False)
        c.ema_update(idx, rng.dirichlet(np.ones(K), size=3))
    assert np.all(c.table[mask] == 0)
    assert np.all((c.table >= 0) & (c.table <= 1))
    labels = c.pseudo_labels(np.arange(n))
    assert not mask[np.arange(n), labels].any()
