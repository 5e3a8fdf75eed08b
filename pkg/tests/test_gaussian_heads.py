import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from ghofl.client_stats import StatsRequest, compute_bundle
from ghofl.datamodel import GaussianParams, LabeledEmbeddingSet, sum_bundles
from ghofl.gaussian_heads import (
    DLRFactor,
    Shrinkage,
    accuracy,
    dlr_from_covariance,
    estimate_params,
    fit_head,
    shrink,
)
from ghofl.partition import PartitionSpec, make_partition
from ghofl.recipes import SyntheticRecipe, generate

from conftest import random_set, rel_err

FULL = StatsRequest(want_B=True, want_S=True, want_D=True)
NO_SHRINK = Shrinkage(0.0, 0.0)


def _random_spd(k, rng, cond=50.0):
    Q, _ = np.linalg.qr(rng.standard_normal((k, k)))
    lam = np.exp(rng.uniform(0, np.log(cond), k))
    return (Q * lam) @ Q.T


def _dense_scores(mu, covs, log_priors, X):
    out = np.empty((X.shape[0], mu.shape[0]))
    for c, S in enumerate(covs):
        R = X - mu[c]
        q = np.einsum("ij,ji->i", R, np.linalg.solve(S, R.T))
        out[:, c] = log_priors[c] - 0.5 * (np.linalg.slogdet(S)[1] + q)
    return out


@pytest.fixture
def two_class():
    X = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [0.0, 4.0]])
    return LabeledEmbeddingSet(X, [0, 0, 1, 1], 2)


class TestEstimate:
    def test_hand_example(self, two_class):
        p = estimate_params(compute_bundle(two_class, FULL), NO_SHRINK)
        np.testing.assert_allclose(p.class_means, [[1.0, 0.0], [0.0, 3.0]], atol=1e-15)
        np.testing.assert_allclose(p.priors, [0.5, 0.5], atol=1e-15)
        np.testing.assert_allclose(p.pooled_cov, np.eye(2), atol=1e-14)
        np.testing.assert_allclose(p.class_covs[0], [[2.0, 0.0], [0.0, 0.0]], atol=1e-14)

    def test_matches_numpy_oracle(self, small_set):
        p = estimate_params(compute_bundle(small_set, FULL), NO_SHRINK)
        X, y = small_set.features, small_set.labels
        C = small_set.class_count
        resid = np.concatenate([X[y == c] - X[y == c].mean(0) for c in range(C)])
        np.testing.assert_allclose(p.pooled_cov, resid.T @ resid / (small_set.n - C), rtol=1e-10, atol=1e-12)
        for c in range(C):
            np.testing.assert_allclose(p.class_covs[c], np.cov(X[y == c].T), rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(p.class_vars[c], X[y == c].var(0), rtol=1e-9)

    def test_full_shrinkage(self):
        S = _random_spd(5, np.random.default_rng(0))
        np.testing.assert_array_equal(shrink(S, 1.0), np.trace(S) / 5 * np.eye(5))

    def test_shrinkage_reduces_condition_number(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            S = _random_spd(6, rng, cond=1e4)
            conds = [np.linalg.cond(shrink(S, a)) for a in np.linspace(0, 1, 11)]
            assert np.all(np.diff(conds) <= 1e-9 * conds[0])

    def test_singleton_class_falls_back(self):
        s = LabeledEmbeddingSet([[0.0, 0.0], [2.0, 1.0], [5.0, 5.0], [0.0, 1.0]], [0, 0, 1, 0], 2)
        with pytest.warns(UserWarning, match="single sample"):
            p = estimate_params(compute_bundle(s, FULL), Shrinkage(), min_count=1)
        np.testing.assert_array_equal(p.class_covs[1], p.pooled_cov)

    def test_min_count_drops_class(self, small_set):
        y = small_set.labels.copy()
        keep = np.flatnonzero(y != 2)[:150]
        s = small_set.subset(np.concatenate([keep, np.flatnonzero(y == 2)[:1]]))
        with pytest.warns(UserWarning, match="dropping"):
            p = estimate_params(compute_bundle(s, FULL))
        np.testing.assert_array_equal(p.class_ids, [0, 1, 3])
        assert fit_head(p, "lda").predict(s.features).max() == 3

    def test_psd_after_shrinkage(self, small_set):
        p = estimate_params(compute_bundle(small_set, FULL))
        for S in [p.pooled_cov, *p.class_covs]:
            assert np.linalg.eigvalsh(S).min() >= -1e-8 * np.trace(S) / S.shape[0]
        assert np.all(p.class_vars >= 0)


class TestHeads:
    def test_lda_identity_weights(self):
        mu = np.array([[1.0, 2.0], [-3.0, 0.5]])
        p = GaussianParams(mu, np.log([0.5, 0.5]), np.array([0, 1]), pooled_cov=np.eye(2), class_count=2)
        np.testing.assert_array_equal(fit_head(p, "lda").weights, mu)

    def test_lda_hand_query(self, two_class):
        # identity pooled covariance and equal priors: nearest mean wins.
        # [1, 1.5] is at squared distance 2.25 from mu_0 and 3.25 from mu_1.
        head = fit_head(estimate_params(compute_bundle(two_class, FULL), NO_SHRINK), "lda")
        np.testing.assert_array_equal(head.predict(np.array([[1.0, 1.5], [0.5, 2.0], [0.0, 1.0]])), [0, 1, 0])
        g = head.scores(np.array([1.0, 1.5]))
        np.testing.assert_allclose(g[0] - g[1], 0.5, rtol=1e-12)

    @pytest.mark.parametrize("kind", ["nb_diag", "lda", "qda", "dlr_qda"])
    def test_means_classify_to_themselves(self, kind):
        data = random_set(400, 5, 4, seed=2, spread=6.0)
        p = estimate_params(compute_bundle(data, FULL))
        head = fit_head(p, kind, 2)
        assert accuracy(head, (p.class_means, p.class_ids)) == 1.0

    def test_mean_query_identity_cov(self):
        mu = np.random.default_rng(0).standard_normal((6, 4)) * 3
        p = GaussianParams(mu, np.full(6, -np.log(6)), np.arange(6), pooled_cov=np.eye(4), class_count=6)
        np.testing.assert_array_equal(fit_head(p, "lda").predict(mu), np.arange(6))

    def test_ties_go_to_lowest_index(self):
        p = GaussianParams(np.zeros((3, 2)), np.full(3, -np.log(3)), np.arange(3), pooled_cov=np.eye(2), class_count=3)
        assert fit_head(p, "lda").predict(np.ones((1, 2)))[0] == 0

    def test_qda_matches_dense_oracle(self, small_set):
        p = estimate_params(compute_bundle(small_set, FULL))
        X = small_set.features[:50]
        G = fit_head(p, "qda").scores(X)
        ref = _dense_scores(p.class_means, p.class_covs, p.log_priors, X)
        assert rel_err(G, ref) <= 1e-10

    def test_nb_matches_dense_oracle(self, small_set):
        p = estimate_params(compute_bundle(small_set, FULL))
        X = small_set.features[:50]
        ref = _dense_scores(p.class_means, [np.diag(v) for v in p.class_vars], p.log_priors, X)
        assert rel_err(fit_head(p, "nb_diag").scores(X), ref) <= 1e-10

    def test_lda_differences_affine(self, small_set):
        head = fit_head(estimate_params(compute_bundle(small_set, FULL)), "lda")
        rng = np.random.default_rng(3)
        for _ in range(10):
            a, b = rng.standard_normal((2, small_set.dim))
            t = rng.uniform(-2, 2)
            G = head.scores(np.stack([a, b, (1 - t) * a + t * b]))
            diff = G[:, 1:] - G[:, :1]
            np.testing.assert_allclose(diff[2], (1 - t) * diff[0] + t * diff[1], rtol=1e-9, atol=1e-9)

    def test_single_vector_scores(self, small_set):
        head = fit_head(estimate_params(compute_bundle(small_set, FULL)), "qda")
        x = small_set.features[0]
        np.testing.assert_array_equal(head.scores(x), head.scores(x[None])[0])

    def test_empty_test_set(self, small_set):
        head = fit_head(estimate_params(compute_bundle(small_set, FULL)), "lda")
        with pytest.raises(ValueError, match="empty"):
            accuracy(head, (np.zeros((0, small_set.dim)), np.zeros(0)))

    def test_missing_statistics(self, small_set):
        p = estimate_params(compute_bundle(small_set, StatsRequest()))
        with pytest.raises(ValueError, match="class covariances"):
            fit_head(p, "qda")

    def test_parameter_counts(self, small_set):
        p = estimate_params(compute_bundle(small_set, FULL))
        C, k = 4, 6
        assert fit_head(p, "lda").parameter_count() == C * k + C + k * (k + 1) // 2
        assert fit_head(p, "qda").parameter_count() == C * k + C + C * k * (k + 1) // 2


class TestDLR:
    def test_full_rank_matches_qda(self, small_set):
        p = estimate_params(compute_bundle(small_set, FULL))
        X = np.random.default_rng(5).standard_normal((30, small_set.dim)) * 3
        a = fit_head(p, "dlr_qda", small_set.dim).scores(X)
        assert rel_err(a, fit_head(p, "qda").scores(X)) <= 1e-8

    def test_rank_zero_is_isotropic(self, small_set):
        p = estimate_params(compute_bundle(small_set, FULL))
        head = fit_head(p, "dlr_qda", 0)
        for F, S in zip(head.factors, p.class_covs):
            assert F.rank == 0
            np.testing.assert_allclose(F.d, np.trace(S) / S.shape[0], rtol=1e-12)

    def test_woodbury_quad_and_logdet(self):
        rng = np.random.default_rng(6)
        d = rng.uniform(0.5, 2.0, 16)
        U = rng.standard_normal((16, 4))
        F = DLRFactor(d, U)
        R = rng.standard_normal((50, 16))
        dense = F.dense()
        q = np.einsum("ij,ji->i", R, np.linalg.solve(dense, R.T))
        assert rel_err(F.quad(R), q) <= 1e-8
        assert abs(F.logdet - np.linalg.slogdet(dense)[1]) <= 1e-8 * abs(np.linalg.slogdet(dense)[1])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 24), st.integers(0, 2**31))
    def test_factor_is_positive_definite(self, r, seed):
        rng = np.random.default_rng(seed)
        S = _random_spd(24, rng, cond=1e3)
        F = dlr_from_covariance(S, r)
        assert np.linalg.eigvalsh(F.dense()).min() > 0
        np.testing.assert_allclose(np.trace(F.dense()), np.trace(S), rtol=1e-10)


class TestPartitionInvariance:
    def test_heads_from_shards_equal_pooled(self):
        data = random_set(3000, 8, 5, seed=10)
        test = random_set(500, 8, 5, seed=11)
        ref = estimate_params(compute_bundle(data, FULL))
        for spec in (PartitionSpec.dirichlet(20, 0.1, seed=1), PartitionSpec.per_client_classes(5, 1)):
            parts = make_partition(data, spec)
            agg = sum_bundles([compute_bundle(data.subset(p), FULL) for p in parts if len(p)])
            p = estimate_params(agg)
            for name in ("class_means", "log_priors", "pooled_cov", "class_covs", "class_vars"):
                assert rel_err(getattr(p, name), getattr(ref, name)) <= 1e-8
            for kind in ("nb_diag", "lda", "qda", "dlr_qda"):
                np.testing.assert_array_equal(
                    fit_head(p, kind, 3).predict(test.features), fit_head(ref, kind, 3).predict(test.features)
                )


class TestBayesRate:
    def test_lda_two_gaussians(self):
        r = SyntheticRecipe(2, 2, 1.0, "antipodal", "identity", n_train=20000, n_test=50000, seed=3)
        train, test, _ = generate(r)
        head = fit_head(estimate_params(compute_bundle(train, StatsRequest())), "lda")
        assert abs(accuracy(head, test) - norm.cdf(1.0)) < 0.02
