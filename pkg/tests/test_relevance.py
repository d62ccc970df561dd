import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from relmap.errors import ConfigError, DimensionError, InputError
from relmap.network import MaskedNetwork
from relmap.relevance import (
    FrozenIndicator,
    RelevanceMap,
    binarize,
    init_map,
    memory_footprint,
    prune,
    pseudo_round,
    pseudo_round_grad,
    sparsity,
    update_frozen,
)

unit = st.floats(0.0, 1.0, allow_nan=False)
betas = st.floats(80.0, 400.0)


def test_pseudo_round_formula_values():
    assert pseudo_round(0.5, 80) == 0.5
    assert pseudo_round(0.5, 3.7) == 0.5
    assert pseudo_round(1.0, 100) == pytest.approx(1 / (1 + math.exp(-50)), abs=1e-21)
    assert pseudo_round(0.4, 100) == pytest.approx(1 / (1 + math.exp(10)), rel=1e-12)
    assert pseudo_round(0.4, 100) == pytest.approx(4.54e-5, rel=1e-3)


@given(unit, unit, st.floats(1.0, 120.0))
def test_pseudo_round_monotone(a, b, beta):
    lo, hi = min(a, b), max(a, b)
    assert pseudo_round(lo, beta) <= pseudo_round(hi, beta)
    # strict only where float64 can still resolve the step; near 1 the gate saturates
    if hi - lo >= 1e-9 and 1.0 - pseudo_round(hi, beta) > 1e-6:
        assert pseudo_round(lo, beta) < pseudo_round(hi, beta)


@given(st.floats(0.3, 0.7), st.floats(1.0, 100.0))
def test_pseudo_round_derivative_finite_differences(x, beta):
    h = 1e-6
    fd = (pseudo_round(x + h, beta) - pseudo_round(x - h, beta)) / (2 * h)
    # central differences of values near 1 carry round-off of order eps / h
    assert pseudo_round_grad(x, beta) == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_init_map_clipped_and_deterministic():
    m = init_map((100_000,), 7)
    assert m.raw.min() >= 0.0 and m.raw.max() <= 1.0
    assert m.beta == 80.0 and not m.pruned
    np.testing.assert_array_equal(m.raw, init_map((100_000,), 7).raw)


def test_init_map_tail_mass_matches_normal_cdf():
    m = init_map((100_000,), 3, mean=0.3, sd=0.2)
    expected = 1.0 - norm.cdf(0.5, loc=0.3, scale=0.2)  # clipping at 1 keeps the mass above 0.5
    assert abs(np.mean(m.raw > 0.5) - expected) <= 0.02


def test_prune_examples():
    out = prune(RelevanceMap(np.array([0.04, 0.5, 0.96])), 0.05)
    np.testing.assert_array_equal(out.raw, [0.0, 0.5, 0.96])
    assert out.pruned
    untouched = np.array([0.2, 0.7])
    np.testing.assert_array_equal(prune(RelevanceMap(untouched), 0.05).raw, untouched)
    np.testing.assert_array_equal(prune(RelevanceMap(np.array([0.01, 0.011])), 0.01).raw, [0.0, 0.011])


@pytest.mark.parametrize("mu", [0.0, 1.0, -0.1, 1.5])
def test_prune_rejects_bad_mu(mu):
    with pytest.raises(ConfigError):
        prune(RelevanceMap(np.array([0.5])), mu)


@given(st.lists(unit, min_size=1, max_size=50), st.floats(0.01, 0.2))
def test_prune_idempotent_and_keeps_large_entries(values, mu):
    m = RelevanceMap(np.array(values))
    once = prune(m, mu)
    np.testing.assert_array_equal(prune(once, mu).raw, once.raw)
    assert np.all((once.raw == 0.0) | (once.raw > mu))
    big = m.raw > mu
    np.testing.assert_array_equal(once.raw[big], m.raw[big])


@given(st.lists(unit, min_size=1, max_size=50), betas)
def test_binarize_after_prune_is_strictly_binary(values, beta):
    b = binarize(prune(RelevanceMap(np.array(values), beta=beta), 0.05))
    assert b.dtype == bool


def test_binarize_examples():
    assert binarize(RelevanceMap(np.array([0.5])))[0]
    assert binarize(RelevanceMap(np.array([0.96]), beta=100))[0]
    assert not binarize(RelevanceMap(np.array([0.04]), beta=100))[0]


def test_update_frozen_examples():
    k = np.array([1, 0, 1, 1, 0], dtype=bool)
    f = update_frozen(FrozenIndicator.empty(5), k)
    assert f.count == 3
    assert update_frozen(f, k).count == 3
    other = np.array([0, 1, 0, 0, 0], dtype=bool)
    assert update_frozen(f, other).count == 4
    with pytest.raises(DimensionError):
        update_frozen(f, np.ones(4, dtype=bool))


@given(st.lists(st.lists(st.booleans(), min_size=6, max_size=6), min_size=1, max_size=8))
def test_frozen_count_never_decreases(masks):
    f = FrozenIndicator.empty(6)
    last = 0
    for m in masks:
        f = update_frozen(f, np.array(m))
        assert f.count >= last
        last = f.count


def test_sparsity_examples():
    assert sparsity([np.zeros(10, dtype=bool)], 10) == 1.0
    assert sparsity([np.ones(10, dtype=bool)], 10) == 0.0
    a = np.zeros(10, dtype=bool)
    a[0:4] = True
    b = np.zeros(10, dtype=bool)
    b[2:6] = True
    assert sparsity([a, b], 10) == pytest.approx(4 / 10)
    with pytest.raises(InputError):
        sparsity([], 10)


def brute_sparsity(masks, n):
    unused = 0
    for pos in range(n):
        if all(not m[pos] for m in masks):
            unused += 1
    return unused / n


@given(st.integers(0, 2**32 - 1))
def test_sparsity_equals_brute_force(seed):
    r = np.random.default_rng(seed)
    n, t = int(r.integers(1, 40)), int(r.integers(1, 6))
    masks = [r.random(n) < r.random() for _ in range(t)]
    assert sparsity(masks, n) == brute_sparsity(masks, n)


def test_memory_footprint_arithmetic():
    one = memory_footprint([np.ones(1000, dtype=bool)], 1000)
    assert one.weight_bytes == 8000 and one.mask_bytes == 125
    masks = [np.ones(1000, dtype=bool)] * 4
    assert memory_footprint(masks, 1000).mask_bytes == 4 * 125
    half = np.zeros(1000, dtype=bool)
    half[:600] = True
    assert memory_footprint([half], 1000).removable_weights == 400


def test_mlp_mask_is_about_12_kilobytes():
    net = MaskedNetwork()
    assert net.weight_count == 784 * 100 + 100 * 100 + 100 * 100 + 100 * 10
    fp = memory_footprint([np.ones(net.weight_count, dtype=bool)], net.weight_count)
    assert fp.per_task_mask_bytes == 12_425
    assert round(fp.per_task_mask_bytes / 1000) == 12
