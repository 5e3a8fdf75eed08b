import numpy as np
import pytest

from ghofl.recipes import SyntheticRecipe, generate


class TestRecipes:
    def test_simplex_means(self):
        _, _, truth = generate(SyntheticRecipe(10, 16, 3.0, n_train=100, n_test=10))
        mu = truth["means"]
        np.testing.assert_allclose(np.linalg.norm(mu, axis=1), 3.0, rtol=1e-12)
        np.testing.assert_allclose(mu.sum(0), 0.0, atol=1e-12)
        d = np.linalg.norm(mu[:, None] - mu[None], axis=2)[np.triu_indices(10, 1)]
        np.testing.assert_allclose(d, d[0], rtol=1e-12)

    def test_balanced_and_reproducible(self):
        r = SyntheticRecipe(3, 4, n_train=301, n_test=30, seed=2)
        a, _, _ = generate(r)
        b, _, _ = generate(r)
        assert a.equals(b)
        np.testing.assert_array_equal(np.bincount(a.labels), [101, 100, 100])

    def test_isotropic_variances(self):
        r = SyntheticRecipe(2, 2, 1.0, "offset", "isotropic", class_variances=(1.0, 9.0), n_train=40000, n_test=10)
        train, _, truth = generate(r)
        for c, v in enumerate((1.0, 9.0)):
            assert abs(train.features[train.labels == c].var(0).mean() - v) < 0.05 * v

    def test_validation(self):
        with pytest.raises(ValueError):
            SyntheticRecipe(3, 4, means="antipodal")
        with pytest.raises(ValueError):
            SyntheticRecipe(2, 4, covariance="isotropic")
