from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bifactor_alm.model import (
    FactorParams,
    HierarchyTree,
    SampleCov,
    bifactor_constraint_pairs,
    build_phi,
    hierarchy_constraint_pairs,
    n_corr_params,
)
from bifactor_alm.objective import (
    AugLagCoefficients,
    PackedObjective,
    SigmaNotPD,
    augmented_gradient,
    augmented_objective,
    constraint_residuals,
    discrepancy,
    discrepancy_cov,
)


def random_problem(rng, J, G, oblique=True, N=300):
    A = rng.standard_normal((J, J + 3))
    S = A @ A.T / (J + 3) + 0.2 * np.eye(J)
    data = SampleCov(S, N)
    cs = replace(bifactor_constraint_pairs(G), oblique=oblique)
    gamma = rng.uniform(-1.5, 1.5, n_corr_params(G)) if oblique else None
    params = FactorParams(rng.standard_normal((J, G + 1)), gamma, rng.uniform(0.3, 1.5, J))
    coeffs = AugLagCoefficients(rng.standard_normal((J, len(cs))), float(rng.uniform(0.1, 10)))
    return data, cs, params, coeffs


def central_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_discrepancy_zero_at_sample_covariance():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((6, 10))
    data = SampleCov(A @ A.T, 100)
    assert discrepancy_cov(data.S, data) == pytest.approx(0.0, abs=1e-9)


def test_discrepancy_closed_form():
    # S = I, Sigma = s I gives N J (log s + 1/s - 1)
    data = SampleCov(np.eye(4), 50)
    for s in (0.5, 1.7, 3.0):
        expected = 50 * 4 * (np.log(s) + 1 / s - 1)
        assert discrepancy_cov(s * np.eye(4), data) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_discrepancy_nonnegative(seed):
    rng = np.random.default_rng(seed)
    data, _, params, _ = random_problem(rng, 6, 2)
    assert discrepancy(params, data) >= -1e-8


def test_indefinite_sigma_raises():
    data = SampleCov(np.eye(3), 10)
    with pytest.raises(SigmaNotPD):
        discrepancy_cov(np.diag([1.0, -1.0, 1.0]), data)


def test_residuals_and_penalty_value():
    L = np.array([[1.0, 2.0, 3.0, 0.0], [1.0, 0.0, -1.0, 4.0]])
    cs = bifactor_constraint_pairs(3)
    R = constraint_residuals(L, cs)
    np.testing.assert_array_equal(R, [[6.0, 0.0, 0.0], [0.0, 0.0, -4.0]])
    params = FactorParams(L, np.zeros(3), np.ones(2))
    data = SampleCov(np.eye(2) * 20, 10)
    beta = np.arange(6.0).reshape(2, 3)
    coeffs = AugLagCoefficients(beta, 0.5)
    expected = discrepancy(params, data) + np.sum(beta * R) + 0.5 * np.sum(R**2)
    assert augmented_objective(params, coeffs, cs, data) == pytest.approx(expected)


@pytest.mark.parametrize("oblique", [True, False])
@pytest.mark.parametrize("G", [1, 2, 4])
def test_gradient_blocks_match_finite_differences(G, oblique):
    rng = np.random.default_rng(100 * G + oblique)
    data, cs, params, coeffs = random_problem(rng, 7, G, oblique=oblique)
    gL, gG, gP = augmented_gradient(params, coeffs, cs, data)

    def f_lambda(v):
        p = params.copy()
        p.Lambda = v.reshape(params.Lambda.shape)
        return augmented_objective(p, coeffs, cs, data)

    fd = central_difference(f_lambda, params.Lambda.ravel())
    np.testing.assert_allclose(gL.ravel(), fd, rtol=1e-5, atol=1e-4)

    def f_psi(v):
        p = params.copy()
        p.psi = v
        return augmented_objective(p, coeffs, cs, data)

    np.testing.assert_allclose(gP, central_difference(f_psi, params.psi), rtol=1e-5, atol=1e-4)

    if oblique and params.gamma.size:
        def f_gamma(v):
            p = params.copy()
            p.gamma = v
            return augmented_objective(p, coeffs, cs, data)

        np.testing.assert_allclose(gG, central_difference(f_gamma, params.gamma), rtol=1e-5, atol=1e-4)


def test_backends_agree():
    rng = np.random.default_rng(5)
    for trial in range(40):
        G = int(rng.integers(1, 5))
        data, cs, params, coeffs = random_problem(rng, int(rng.integers(4, 12)), G, oblique=bool(trial % 2))
        free = rng.random((data.J, G + 1)) < 0.8
        comp = PackedObjective(data, cs, coeffs, free=free)
        ref = PackedObjective(data, cs, coeffs, free=free, backend="numpy")
        x = comp.pack(params)
        v1, g1 = comp(x)
        v2, g2 = ref(x)
        assert v1 == pytest.approx(v2, rel=1e-10)
        np.testing.assert_allclose(g1, g2, rtol=1e-8, atol=1e-8)


def test_packed_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    data, cs, params, coeffs = random_problem(rng, 6, 3)
    obj = PackedObjective(data, cs, coeffs)
    x = obj.pack(params)
    fd = central_difference(lambda v: obj(v)[0], x)
    np.testing.assert_allclose(obj(x)[1], fd, rtol=1e-5, atol=1e-4)


def test_pack_unpack_round_trip():
    rng = np.random.default_rng(2)
    data, cs, params, coeffs = random_problem(rng, 5, 3)
    obj = PackedObjective(data, cs, coeffs)
    back = obj.unpack(obj.pack(params))
    np.testing.assert_allclose(back.Lambda, params.Lambda)
    np.testing.assert_allclose(back.gamma, params.gamma)
    np.testing.assert_allclose(back.psi, params.psi)
    assert obj.size == 5 * 4 + 3 + 5


def test_non_finite_point_is_rejected():
    rng = np.random.default_rng(1)
    data, cs, params, coeffs = random_problem(rng, 5, 2)
    for backend in ("compiled", "numpy"):
        obj = PackedObjective(data, cs, coeffs, backend=backend)
        x = obj.pack(params)
        x[0] = np.nan
        assert obj(x)[0] == np.inf


def test_bounds_cover_log_psi_only():
    rng = np.random.default_rng(3)
    data, cs, params, coeffs = random_problem(rng, 5, 2)
    obj = PackedObjective(data, cs, coeffs)
    b = obj.bounds
    assert len(b) == obj.size
    assert all(lo is None for lo, _ in b[: obj.n_lambda + obj.n_gamma])
    assert all(lo < np.log(s) < hi for (lo, hi), s in zip(b[-5:], np.diag(data.S)))


def test_invariant_to_group_relabelling_and_sign():
    rng = np.random.default_rng(8)
    G = 3
    data, cs, params, _ = random_problem(rng, 8, G, oblique=False)
    base = discrepancy(params, data)
    perm = np.array([0, 3, 1, 2])
    signs = np.array([-1, 1, -1, 1])
    moved = FactorParams(params.Lambda[:, perm] * signs, None, params.psi)
    assert discrepancy(moved, data) == pytest.approx(base, rel=1e-12)


def test_oblique_relabelling_with_matching_phi():
    # permuting groups together with phi leaves Sigma unchanged
    rng = np.random.default_rng(9)
    G = 3
    data, cs, params, _ = random_problem(rng, 8, G)
    phi = build_phi(params.gamma, G)
    perm = np.array([0, 2, 3, 1])
    L2 = params.Lambda[:, perm]
    sigma = L2 @ phi[np.ix_(perm, perm)] @ L2.T + np.diag(params.psi)
    assert discrepancy_cov(sigma, data) == pytest.approx(discrepancy(params, data), rel=1e-12)


def test_hierarchy_penalty_uses_tree_pairs():
    tree = HierarchyTree((-1, 0, 1, 1))
    cs = hierarchy_constraint_pairs(tree)
    assert cs.pairs == ((2, 3),)
    L = np.array([[1.0, 1.0, 1.0, 0.0]])
    assert constraint_residuals(L, cs).ravel().tolist() == [0.0]
