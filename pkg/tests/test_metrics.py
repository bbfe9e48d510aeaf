import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmdp import metrics as M
from pmdp.autodiff import ContractError


def brute_mi(a, b):
    n = len(a)
    pa, pb, pab = Counter(a), Counter(b), Counter(zip(a, b))
    return sum(c / n * np.log((c / n) / (pa[x] / n * pb[y] / n)) for (x, y), c in pab.items())


# -- mutual information

def test_mi_of_copied_factor_is_its_entropy():
    f = np.repeat(np.arange(4), 25)
    assert M.discrete_mi(f, f) == pytest.approx(np.log(4), abs=1e-12)
    assert M.discrete_entropy(f) == pytest.approx(np.log(4), abs=1e-12)


def test_mi_of_product_table_is_zero():
    a, b = np.meshgrid(np.arange(3), np.arange(5), indexing="ij")
    assert M.discrete_mi(a.ravel(), b.ravel()) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(-2, 2)), min_size=1, max_size=60))
def test_mi_matches_brute_force_and_is_symmetric(rows):
    a = np.array([r[0] for r in rows])
    b = np.array([r[1] for r in rows])
    mi = M.discrete_mi(a, b)
    assert mi >= 0
    assert mi == pytest.approx(max(brute_mi(list(a), list(b)), 0.0), abs=1e-12)
    assert mi == pytest.approx(M.discrete_mi(b, a), abs=1e-12)


def test_mi_errors():
    with pytest.raises(ContractError):
        M.discrete_mi([], [])
    with pytest.raises(ContractError):
        M.discrete_mi([1, 2], [1])


def test_quantile_bins_equal_mass_and_ties():
    col = np.random.default_rng(0).normal(size=1000)
    counts = np.bincount(M.quantile_bins(col, 20))
    assert counts.tolist() == [50] * 20
    tied = M.quantile_bins(np.array([1.0, 1.0, 1.0, 2.0]), 2)
    assert tied[0] == tied[1] == tied[2]


# -- MIG

def uniform_factors(M_, levels, rng):
    return np.stack([rng.integers(0, v, size=M_) for v in levels], axis=1)


def grid_factors(levels, repeat):
    """Balanced full product design: empirical MI between factors is exactly 0."""
    g = np.stack(np.meshgrid(*[np.arange(v) for v in levels], indexing="ij"), axis=-1).reshape(-1, len(levels))
    return np.tile(g, (repeat, 1))


def test_mig_identity_latents():
    f = grid_factors([10, 10], 20)
    z = np.concatenate([f.astype(float), np.zeros((len(f), 1))], axis=1)
    assert M.mig(z, f) == pytest.approx(1.0, abs=1e-12)


def test_mig_duplicated_dim_gives_zero_gap():
    f = grid_factors([5, 5], 40)
    z = np.stack([f[:, 0], f[:, 0], f[:, 1]], axis=1).astype(float)
    per_factor = M.mi_matrix(np.stack([M.quantile_bins(z[:, j]) for j in range(3)], axis=1), f)
    assert per_factor[0, 0] == per_factor[1, 0]
    assert M.mig(z, f) == pytest.approx(0.5, abs=1e-12)


def test_mig_null_over_ten_seeds():
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        f = uniform_factors(10000, [10, 10], rng)
        assert M.mig(rng.normal(size=(10000, 4)), f) < 0.05


def test_mig_permutation_invariant():
    rng = np.random.default_rng(3)
    f = uniform_factors(2000, [4, 6], rng)
    z = np.column_stack([f[:, 0] + rng.normal(0, 0.5, 2000), rng.normal(size=2000), f[:, 1] + rng.normal(0, 1, 2000)])
    assert M.mig(z, f) == pytest.approx(M.mig(z[:, [2, 0, 1]], f), abs=1e-14)


def test_zero_entropy_factor_is_skipped(caplog):
    rng = np.random.default_rng(4)
    f = np.column_stack([rng.integers(0, 4, 500), np.zeros(500, dtype=int)])
    with caplog.at_level(logging.WARNING, logger="pmdp.metrics"):
        score = M.mig(f.astype(float), f)
    assert "zero entropy" in caplog.text
    assert score == pytest.approx(1.0)


def test_mig_bins_validation():
    with pytest.raises(ContractError):
        M.mig(np.zeros((4, 1)), np.zeros((4, 1), dtype=int), bins=1)


# -- PCA

def test_pca_line():
    t = np.linspace(-3, 3, 50)
    ax = M.pca_first_axis(np.outer(-t, [1.0, 1.0]) / np.sqrt(2))
    np.testing.assert_allclose(ax.vector, [1 / np.sqrt(2)] * 2, atol=1e-10)
    assert not ax.degenerate and not ax.near_isotropic


def test_pca_isotropic_flag_and_degenerate():
    ax = M.pca_first_axis(np.random.default_rng(5).normal(size=(20000, 2)))
    assert ax.near_isotropic
    assert np.linalg.norm(ax.vector) == pytest.approx(1.0)
    flat = M.pca_first_axis(np.ones((5, 3)))
    assert flat.degenerate and flat.vector.tolist() == [1.0, 0.0, 0.0]
    with pytest.raises(ContractError):
        M.pca_first_axis(np.ones((1, 3)))


def test_pca_variance_matches_dense_eigensolver():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(500, 3)) @ np.array([[3.0, 0.5, 0.0], [0.0, 1.0, 0.3], [0.2, 0.0, 0.5]])
    ax = M.pca_first_axis(X)
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / len(X)
    top = np.linalg.eigvalsh(C)[-1]
    assert np.var(Xc @ ax.vector) == pytest.approx(top, abs=1e-8)
    assert ax.eigenvalue == pytest.approx(top, abs=1e-8)
    dirs = rng.normal(size=(1000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    assert np.all(np.var(Xc @ dirs.T, axis=0) <= np.var(Xc @ ax.vector) + 1e-12)


def test_mig_pca_linear_subspaces():
    f = grid_factors([8, 8], 40)
    codes = np.zeros((len(f), 2, 2))
    codes[:, 0] = np.outer(f[:, 0], [0.6, 0.8])
    codes[:, 1] = np.outer(f[:, 1], [-1.0, 2.0])
    assert M.mig_pca(codes, f) == pytest.approx(1.0, abs=1e-12)


def test_mig_pca_collapsed_subspace():
    rng = np.random.default_rng(8)
    f = uniform_factors(2000, [5, 5], rng)
    codes = np.zeros((2000, 3, 2))
    codes[:, 0, 0] = f[:, 0] + rng.normal(0, 0.3, 2000)
    codes[:, 1, 1] = f[:, 1]
    codes[:, 2] = 4.2
    score = M.mig_pca(codes, f)
    assert 0 <= score <= 1


# -- k-means

def test_kmeans_examples():
    res = M.kmeans(np.array([0.0, 0.0, 10.0, 10.0]), 2, np.random.default_rng(0))
    assert sorted(res.centroids.ravel().tolist()) == [0.0, 10.0]
    X = np.random.default_rng(1).normal(size=(30, 3))
    np.testing.assert_allclose(M.kmeans(X, 1, np.random.default_rng(0)).centroids[0], X.mean(axis=0), atol=1e-14)
    with pytest.raises(ContractError):
        M.kmeans(X, 31, np.random.default_rng(0))


def test_kmeans_objective_monotone():
    X = np.random.default_rng(2).normal(size=(400, 2))
    obj = M.kmeans(X, 7, np.random.default_rng(3)).objective
    assert all(b <= a + 1e-9 for a, b in zip(obj, obj[1:]))


def test_kmeans_empty_cluster_reseeded():
    X = np.array([[0.0], [0.0], [0.0], [5.0]])
    res = M.kmeans(X, 3, np.random.default_rng(0))
    assert res.assignments.shape == (4,)


# -- MIG-KM

def onehot_codes(f, levels, rng, spread=0.01):
    M_, F = f.shape
    d = max(levels)
    codes = np.zeros((M_, F, d))
    for i in range(F):
        codes[np.arange(M_), i, f[:, i]] = 1.0
    return codes + rng.normal(0, spread, codes.shape)


def test_mig_km_one_hot_is_perfect():
    rng = np.random.default_rng(9)
    f = grid_factors([4, 4], 100)
    assert M.mig_km(onehot_codes(f, [4, 4], rng), f) == pytest.approx(1.0, abs=1e-12)


def test_mig_km_constant_codes(caplog):
    f = uniform_factors(100, [3, 3], np.random.default_rng(0))
    with caplog.at_level(logging.WARNING, logger="pmdp.metrics"):
        assert M.mig_km(np.ones((100, 2, 3)), f) == 0.0
    assert "constant" in caplog.text


def test_mig_km_rotation_and_permutation_invariance():
    rng = np.random.default_rng(10)
    f = uniform_factors(2000, [4, 5], rng)
    codes = onehot_codes(f, [4, 5], rng)
    codes[:, 0] += 0.3 * rng.normal(size=(2000, 5)) * (f[:, 1:2] == 0)  # some entanglement
    base = M.mig_km(codes, f)
    Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    rotated = codes.copy()
    rotated[:, 1] = codes[:, 1] @ Q
    assert M.mig_km(rotated, f) == pytest.approx(base, abs=1e-6)
    assert 0 <= base <= 1


# -- DCI

def test_dci_scoring_stage():
    assert M.dci_from_importance(np.eye(3)) == pytest.approx(1.0)
    assert M.dci_from_importance(np.ones((3, 3))) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ContractError):
        M.dci_from_importance(np.ones((3, 1)))


def test_dci_exact_linear_latents():
    rng = np.random.default_rng(11)
    f = uniform_factors(3000, [10, 10, 4], rng)
    assert M.dci_disentanglement(f.astype(float), f) >= 0.95


def test_ridge_escalates_then_fails():
    X = np.column_stack([np.ones(10), np.ones(10)])  # X^T X / n has eigenvalues 2 and 0
    with pytest.raises(np.linalg.LinAlgError):
        M._ridge(X, np.ones(10), 1e-16)
    # 1e-13 and 1e-12 are still too ill-conditioned, 1e-11 is accepted
    np.testing.assert_allclose(M._ridge(X, np.ones(10), 1e-13), [0.5, 0.5], rtol=1e-9)


# -- classifier scores

class ToySampler:
    """Uniform continuous factors with a chosen representation."""

    def __init__(self, F, represent):
        self.num_factors = F
        self.represent = represent

    def _v(self, n, rng):
        return rng.uniform(size=(n, self.num_factors))

    def fixed_pairs(self, factor, n, rng):
        a, b = self._v(n, rng), self._v(n, rng)
        b[:, factor] = a[:, factor]
        return self.represent(a, rng), self.represent(b, rng)

    def fixed_batch(self, factor, n, rng):
        v = self._v(n, rng)
        v[:, factor] = rng.uniform()
        return self.represent(v, rng)

    def sample(self, n, rng):
        return self.represent(self._v(n, rng), rng)


def identity(v, rng):
    return v.copy()


def noise(v, rng):
    return rng.normal(size=(len(v), 4))


def test_betavae_identity_and_noise():
    assert M.betavae_score(ToySampler(3, identity), np.random.default_rng(0), n_train=200, n_eval=100) == 1.0
    acc = M.betavae_score(ToySampler(3, noise), np.random.default_rng(1), n_train=300, n_eval=300)
    assert abs(acc - 1 / 3) <= 0.1


def test_betavae_insufficient_pairs():
    with pytest.raises(ContractError):
        M.betavae_score(ToySampler(3, identity), np.random.default_rng(0), n_train=2)


def test_factorvae_identity_and_noise():
    assert M.factorvae_score(ToySampler(3, identity), np.random.default_rng(0), n_train=200, n_eval=100) == 1.0
    acc = M.factorvae_score(ToySampler(4, noise), np.random.default_rng(1), n_train=400, n_eval=400)
    assert abs(acc - 1 / 4) <= 0.1


def test_factorvae_with_constant_dim(caplog):
    def with_dead(v, rng):
        return np.column_stack([v, np.zeros(len(v))])

    with caplog.at_level(logging.WARNING, logger="pmdp.metrics"):
        acc = M.factorvae_score(ToySampler(2, with_dead), np.random.default_rng(0), n_train=50, n_eval=50)
    assert acc == 1.0
    assert "zero-variance" in caplog.text


# -- activity

def test_subspace_activity():
    rng = np.random.default_rng(12)
    codes = np.zeros((10000, 2, 5))
    codes[:, 1] = rng.normal(size=(10000, 5))
    act = M.subspace_activity(codes)
    assert act[0] == 0.0
    assert act[1] == pytest.approx(1.0, abs=0.05)
