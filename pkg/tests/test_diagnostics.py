import json

import numpy as np
from scipy import stats

from ghofl.client_stats import StatsRequest, compute_bundle
from ghofl.datamodel import LabeledEmbeddingSet, sum_bundles
from ghofl.diagnostics import central_moments, gaussianity
from ghofl.partition import PartitionSpec, make_partition

REQ = StatsRequest(want_B=False, want_M34=True)


def _report(X, y=None, C=1):
    y = np.zeros(len(X), int) if y is None else y
    return gaussianity(compute_bundle(LabeledEmbeddingSet(X, y, C), REQ))


class TestOracles:
    def test_normal_draws(self):
        X = np.random.default_rng(0).standard_normal((100_000, 1))
        r = _report(X)
        assert abs(r.skewness[0, 0]) < 0.03
        assert abs(r.excess_kurtosis[0, 0]) < 0.06

    def test_exponential_draws(self):
        X = np.random.default_rng(1).exponential(1.0, (100_000, 1))
        r = _report(X)
        assert abs(r.skewness[0, 0] - 2.0) < 0.1
        assert abs(r.excess_kurtosis[0, 0] - 6.0) < 0.5

    def test_matches_direct_central_moments(self):
        rng = np.random.default_rng(2)
        X = rng.gamma(2.0, 1.5, (10_000, 3)) + 4.0
        y = rng.integers(0, 2, 10_000)
        m2, m3, m4 = central_moments(compute_bundle(LabeledEmbeddingSet(X, y, 2), REQ))
        for c in range(2):
            R = X[y == c] - X[y == c].mean(0)
            np.testing.assert_allclose(m2[c], (R**2).mean(0), rtol=1e-8)
            np.testing.assert_allclose(m3[c], (R**3).mean(0), rtol=1e-8)
            np.testing.assert_allclose(m4[c], (R**4).mean(0), rtol=1e-8)
        r = gaussianity(compute_bundle(LabeledEmbeddingSet(X, y, 2), REQ))
        np.testing.assert_allclose(r.skewness[0], stats.skew(X[y == 0]), rtol=1e-8)
        np.testing.assert_allclose(r.excess_kurtosis[1], stats.kurtosis(X[y == 1]), rtol=1e-8)


class TestReport:
    def test_small_classes_excluded(self):
        X = np.random.default_rng(3).standard_normal((30, 2))
        y = np.r_[np.zeros(25, int), np.ones(5, int)]
        r = _report(X, y, 3)
        assert r.included[0].all() and not r.included[1].any() and not r.included[2].any()
        assert np.isnan(r.skewness[1]).all()
        assert r.summary()["entries"] == 2

    def test_constant_feature_excluded(self):
        X = np.c_[np.random.default_rng(4).standard_normal(50), np.full(50, 3.0)]
        r = _report(X)
        np.testing.assert_array_equal(r.included[0], [True, False])

    def test_partition_invariant(self):
        rng = np.random.default_rng(5)
        data = LabeledEmbeddingSet(rng.exponential(1.0, (2000, 3)), rng.integers(0, 4, 2000), 4)
        ref = gaussianity(compute_bundle(data, REQ))
        parts = make_partition(data, PartitionSpec.dirichlet(10, 0.1, seed=3))
        got = gaussianity(sum_bundles([compute_bundle(data.subset(p), REQ) for p in parts if len(p)]))
        np.testing.assert_allclose(got.skewness, ref.skewness, rtol=1e-8)
        np.testing.assert_allclose(got.excess_kurtosis, ref.excess_kurtosis, rtol=1e-8)

    def test_outputs(self, tmp_path):
        r = _report(np.random.default_rng(6).standard_normal((40, 2)))
        r.write_csv(tmp_path / "d.csv")
        r.write_json(tmp_path / "d.json")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines[0].startswith("class,dim") and len(lines) == 3
        s = json.loads((tmp_path / "d.json").read_text())
        assert set(s) == {"abs_skew", "abs_excess_kurtosis", "entries"}
