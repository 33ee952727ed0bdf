import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bifactor_alm.alm import AllStartsFailed, AlmConfig, multi_start_fit
from bifactor_alm.model import SampleCov, bifactor_constraint_pairs
from bifactor_alm.selection import (
    _argmin_smallest,
    bic_bifactor,
    bic_efa,
    echelon_mask,
    efa_fit,
    select_g,
    select_g_efa,
)
from bifactor_alm.simlab import generate_bifactor_truth, sample_covariance


# printed worked values are truncated, so compare at their printed precision
def test_bic_bifactor_example():
    value = bic_bifactor(100.0, 3, 500)
    assert value == pytest.approx(100 + 3 * math.log(500), rel=1e-15)
    assert value == pytest.approx(118.6434, abs=1e-3)


def test_bic_efa_example():
    value = bic_efa(50.0, 4, 15, 500)
    assert value == pytest.approx(50 + 54 * math.log(500), rel=1e-15)
    assert value == pytest.approx(385.58, abs=1e-2)


def test_single_group_has_no_penalty():
    assert bic_bifactor(42.0, 1, 1000) == 42.0


@given(
    st.floats(0, 1e6),
    st.integers(1, 30),
    st.integers(2, 10**6),
)
def test_bic_bifactor_arithmetic(loss, G, N):
    expected = loss + sum(range(G)) * math.log(N)
    assert bic_bifactor(loss, G, N) == pytest.approx(expected, rel=1e-12, abs=1e-9)
    assert bic_bifactor(loss, G + 1, N) > bic_bifactor(loss, G, N)


@given(st.floats(0, 1e6), st.integers(1, 10), st.integers(11, 60), st.integers(2, 10**6))
def test_bic_efa_arithmetic(loss, K, J, N):
    n_free = J * K - K * (K - 1) // 2
    assert bic_efa(loss, K, J, N) == pytest.approx(loss + n_free * math.log(N), rel=1e-12, abs=1e-9)
    assert bic_efa(loss, K + 1, J, N) > bic_efa(loss, K, J, N)


def test_bic_preconditions():
    with pytest.raises(ValueError):
        bic_bifactor(1.0, 2, 1)
    with pytest.raises(ValueError):
        bic_efa(1.0, 0, 10, 100)


def test_ties_go_to_smaller_g():
    assert _argmin_smallest([2, 3, 4], [10.0, 10.0, 11.0]) == 2
    assert _argmin_smallest([2, 3, 4], [np.nan, 9.0, 9.0]) == 3
    with pytest.raises(AllStartsFailed):
        _argmin_smallest([2, 3], [np.nan, np.nan])


def test_echelon_mask_pattern():
    # K = 4, G = 3: zeros at (2,3), (2,4), (3,4) in 1-based indices
    free = echelon_mask(6, 4)
    zeros = {(int(i) + 1, int(j) + 1) for i, j in zip(*np.nonzero(~free))}
    assert zeros == {(2, 3), (2, 4), (3, 4)}
    assert echelon_mask(5, 1).all()
    with pytest.raises(ValueError):
        echelon_mask(4, 4)


def test_efa_noiseless_loss_is_zero():
    rng = np.random.default_rng(0)
    J, K = 10, 3
    free = echelon_mask(J, K)
    L = np.where(free, rng.uniform(0.4, 1.2, (J, K)) * rng.choice([-1, 1], (J, K)), 0.0)
    S = L @ L.T + np.diag(rng.uniform(0.5, 1.0, J))
    fit = efa_fit(SampleCov(S, 500), K, AlmConfig(n_starts=10, seed=0))
    assert fit.loss < 1e-6


def test_efa_one_factor_has_no_zeros():
    assert echelon_mask(7, 1).sum() == 7


@pytest.fixture(scope="module")
def small_data():
    truth = generate_bifactor_truth(8, 2, rng_seed=11)
    return sample_covariance(truth, 1500, rng_seed=12)


def test_select_g_order_invariant(small_data):
    cfg = AlmConfig(n_starts=4, seed=3, n_jobs=1)
    a = select_g(small_data, [3, 1, 2], cfg)
    b = select_g(small_data, [1, 2, 3], cfg)
    assert a.candidates == b.candidates == [1, 2, 3]
    assert a.chosen == b.chosen
    np.testing.assert_array_equal(a.bics, b.bics)
    assert a.chosen == int(np.argmin(a.bics)) + 1


def test_select_g_single_candidate(small_data):
    cfg = AlmConfig(n_starts=2, seed=0, n_jobs=1)
    res = select_g(small_data, [2], cfg)
    assert res.chosen == 2 and res.failed == []
    assert select_g_efa(small_data, [2], cfg).chosen == 2


def test_select_g_records_failures(small_data):
    cfg = AlmConfig(n_starts=1, seed=0, T_max=1, max_restarts=0, delta1=1e-12, delta2=1e-12, n_jobs=1)
    with pytest.raises(AllStartsFailed):
        select_g(small_data, [2, 3], cfg)


def test_nesting_of_bifactor_in_efa():
    truth = generate_bifactor_truth(15, 3, rng_seed=21)
    data = sample_covariance(truth, 2000, rng_seed=22)
    cfg = AlmConfig(n_starts=15, seed=1, n_jobs=1)
    bif = multi_start_fit(data, bifactor_constraint_pairs(3), cfg)
    efa = efa_fit(data, 4, cfg)
    assert efa.loss <= bif.loss + 1e-6
