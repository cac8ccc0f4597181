import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apcpinn import fields as F
from apcpinn import reduction as R
from apcpinn.datasets import equidistant
from apcpinn.errors import (AlignmentError, DegeneracyError, DegenerateMeasureError,
                            WhiteningError)
from oracles import direct_monomial_basis


def gp_snapshots(n_sensors, n=1000, seed=0, sigma=1.0, lc=0.5):
    xs = equidistant(n_sensors)
    return F.sample_gp(lambda x: 10 * np.sin(np.pi * x), F.KernelSpec(sigma, lc), xs, n, seed).trajectories


def skewed_xi(n, m, seed):
    rng = np.random.default_rng(seed)
    z = rng.gamma(2.0, size=(n, m)) + 0.3 * rng.normal(size=(n, m))
    pca = R.fit_pca(z, 1.0)
    return R.extract_xi(pca, z)


# -- PCA ----------------------------------------------------------------------


def test_perfectly_correlated_sensors_rank_one():
    rng = np.random.default_rng(0)
    a = rng.normal(size=200)
    pca = R.fit_pca(np.column_stack([a, 2 * a + 1]), 0.99)
    assert pca.m == 1


def test_thirteen_sensors_six_components():
    pca = R.fit_pca(gp_snapshots(13), 0.99)
    assert abs(pca.m - 6) <= 1


def test_constant_snapshots_degenerate():
    with pytest.raises(DegeneracyError):
        R.fit_pca(np.ones((10, 3)) * 2.5, 0.99)


def test_pca_invariants():
    pca = R.fit_pca(gp_snapshots(9, n=300), 0.95)
    phi = pca.eigenvectors
    assert np.max(np.abs(phi.T @ phi - np.eye(phi.shape[1]))) < 1e-10
    assert np.all(np.diff(pca.eigenvalues) <= 1e-15) and pca.eigenvalues.min() >= 0
    assert pca.eigenvalues[: pca.m].sum() >= 0.95 * pca.eigenvalues.sum()
    pivots = np.argmax(np.abs(phi), axis=0)
    assert np.all(phi[pivots, np.arange(phi.shape[1])] > 0)


def test_pca_sign_convention_deterministic():
    s = gp_snapshots(7, n=200)
    a, b = R.fit_pca(s, 0.99), R.fit_pca(s.copy(), 0.99)
    assert np.array_equal(a.eigenvectors, b.eigenvectors)


def test_xi_of_mean_is_zero():
    s = gp_snapshots(5, n=200)
    pca = R.fit_pca(s, 0.99)
    assert np.all(R.extract_xi(pca, pca.k0) == 0)


def test_whitening_identity():
    s = gp_snapshots(13)
    pca = R.fit_pca(s, 0.99)
    xi = R.extract_xi(pca, s)
    cov = xi.T @ xi / xi.shape[0]
    assert np.max(np.abs(xi.mean(axis=0))) < 1e-8
    assert np.max(np.abs(cov - np.eye(pca.m))) < 1e-6


def test_full_rank_round_trip():
    s = gp_snapshots(4, n=300, sigma=0.1, lc=1.0)
    pca = R.fit_pca(s, 1.0)
    assert pca.m == 4
    assert np.max(np.abs(pca.reconstruct(R.extract_xi(pca, s)) - s)) < 1e-8


def test_whitening_rejects_tiny_eigenvalue():
    rng = np.random.default_rng(0)
    a = rng.normal(size=100)
    pca = R.fit_pca(np.column_stack([a, a]), 1.0)
    pca.m = 2
    with pytest.raises(WhiteningError):
        R.extract_xi(pca, np.zeros(2))


def test_xi_wrong_length():
    pca = R.fit_pca(gp_snapshots(5, n=100), 0.9)
    with pytest.raises(AlignmentError):
        R.extract_xi(pca, np.zeros(4))


def test_eckart_young_reconstruction_error():
    s = gp_snapshots(9, n=500)
    pca = R.fit_pca(s, 0.9)
    err = np.linalg.norm(pca.reconstruct(R.extract_xi(pca, s)) - s)
    expected = np.sqrt(pca.eigenvalues[pca.m:].sum() * s.shape[0])
    assert abs(err - expected) < 1e-6 * max(1.0, expected)


# -- multi-indices --------------------------------------------------------------


def test_graded_lex_order():
    assert R.graded_lex_indices(2, 2) == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]


@pytest.mark.parametrize("m,r,size", [(6, 1, 7), (4, 2, 15), (4, 1, 5), (3, 3, 20)])
def test_basis_size(m, r, size):
    assert R.basis_size(m, r) == size == len(R.graded_lex_indices(m, r))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(0, 3))
def test_graded_lex_properties(m, r):
    idx = R.graded_lex_indices(m, r)
    assert idx[0] == (0,) * m
    orders = [sum(a) for a in idx]
    assert orders == sorted(orders)
    assert len(set(idx)) == len(idx)
    for lo, hi in zip(idx, idx[1:]):
        if sum(lo) == sum(hi):
            assert lo > hi


# -- aPC basis ------------------------------------------------------------------


@pytest.mark.parametrize("r,m", [(1, 6), (2, 6), (2, 4), (1, 1), (2, 2)])
def test_gram_identity(r, m):
    xi = skewed_xi(1000, m, seed=r * 10 + m)
    basis = R.build_apc_basis(xi, r)
    psi = direct_monomial_basis(xi[:200], basis.indices, basis.monomial_coeffs)
    assert np.allclose(psi, basis.evaluate(xi[:200]), rtol=0, atol=1e-9)
    full = basis.evaluate(xi)
    gram = full.T @ full / xi.shape[0]
    assert np.max(np.abs(gram - np.eye(len(basis)))) < 1e-8
    assert np.all(full[:, 0] == 1.0)


def test_recursive_and_monomial_evaluation_agree():
    xi = skewed_xi(500, 3, 1)
    basis = R.build_apc_basis(xi, 2)
    q = np.random.default_rng(2).normal(size=(100, 3))
    assert np.allclose(basis.evaluate(q), basis.evaluate_recursive(q), rtol=0, atol=1e-10)


def test_basis_needs_enough_samples():
    with pytest.raises(ValueError):
        R.build_apc_basis(np.random.default_rng(0).normal(size=(7, 6)), 1)


def test_degenerate_measure():
    rng = np.random.default_rng(0)
    a = rng.normal(size=100)
    with pytest.raises(DegenerateMeasureError):
        R.build_apc_basis(np.column_stack([a, a]), 1)
    binary = rng.choice([-1.0, 1.0], size=(200, 1))
    with pytest.raises(DegenerateMeasureError):
        R.build_apc_basis(binary, 2)


def test_basis_csv_round_trip(tmp_path):
    xi = skewed_xi(300, 3, 4)
    basis = R.build_apc_basis(xi, 2)
    path = tmp_path / "basis.csv"
    basis.to_csv(path)
    indices, coeffs = R.ApcBasis.read_csv(path)
    back = R.ApcBasis.from_table(indices, coeffs, xi)
    assert indices == basis.indices
    assert np.allclose(back.evaluate(xi), basis.evaluate(xi), rtol=0, atol=1e-12)


# -- projection -----------------------------------------------------------------


def test_projection_of_basis_function_is_unit_vector():
    xi = skewed_xi(600, 3, 5)
    basis = R.build_apc_basis(xi, 2)
    psi = basis.evaluate(xi)
    for beta in range(len(basis)):
        modes = R.project_modes(psi[:, beta], basis)
        assert np.max(np.abs(modes - np.eye(len(basis))[beta])) < 1e-8


def test_projection_of_constant():
    basis = R.build_apc_basis(skewed_xi(400, 2, 6), 2)
    modes = R.project_modes(np.full(400, 3.5), basis)
    assert modes[0] == pytest.approx(3.5, abs=1e-12)
    assert np.max(np.abs(modes[1:])) < 1e-8


def test_projection_length_mismatch():
    basis = R.build_apc_basis(skewed_xi(100, 2, 7), 1)
    with pytest.raises(AlignmentError):
        R.project_modes(np.zeros(99), basis)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 3), st.integers(1, 2))
def test_projection_round_trip_and_moments(seed, m, r):
    xi = skewed_xi(400, m, seed)
    basis = R.build_apc_basis(xi, r)
    psi = basis.evaluate(xi)
    coef = np.random.default_rng(seed).normal(size=len(basis))
    g = psi @ coef
    modes = R.project_modes(g, basis)
    assert np.max(np.abs(psi @ modes - g)) < 1e-8
    assert modes[0] == pytest.approx(g.mean(), abs=1e-10)
    assert (modes[1:] ** 2).sum() == pytest.approx(g.var(), abs=1e-6)


def test_mode_mean_for_any_function():
    xi = skewed_xi(500, 2, 9)
    basis = R.build_apc_basis(xi, 2)
    g = np.exp(xi[:, 0]) * np.sin(xi[:, 1])
    assert R.project_modes(g, basis)[0] == pytest.approx(g.mean(), abs=1e-12)


def test_projection_over_many_points():
    xi = skewed_xi(300, 2, 3)
    basis = R.build_apc_basis(xi, 1)
    values = np.column_stack([xi[:, 0], 2 * xi[:, 0] + 1])
    modes = R.project_modes(values, basis)
    assert modes.shape == (3, 2)
    assert np.allclose(modes[:, 1], 2 * modes[:, 0] + np.array([1, 0, 0]), atol=1e-10)
