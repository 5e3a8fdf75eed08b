import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghofl.client_stats import (
    FAMILY_REQUESTS,
    HEADER_SIZE,
    StatsRequest,
    bundle_to_vector,
    compute_bundle,
    decode_header,
    deserialize_bundle,
    payload_scalars,
    report_payload_bytes,
    serialize_bundle,
    vector_to_bundle,
    BundleLayout,
)
from ghofl.datamodel import LabeledEmbeddingSet, SpaceTag

from conftest import random_set, rel_err

FULL = StatsRequest(want_B=True, want_S=True, want_D=True, want_M34=True)


def _bundle_equal(a, b):
    assert a.space == b.space and a.present() == b.present()
    np.testing.assert_array_equal(a.counts, b.counts)
    for name in ("first_moments",) + a.present():
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


class TestComputeBundle:
    def test_hand_summable_shard(self):
        s = LabeledEmbeddingSet([[1.0, 2.0], [3.0, 4.0]], [0, 0], 1)
        b = compute_bundle(s, StatsRequest(want_B=True, want_S=True, want_D=True))
        np.testing.assert_array_equal(b.counts, [2])
        np.testing.assert_array_equal(b.first_moments, [[4.0, 6.0]])
        np.testing.assert_array_equal(b.class_sq_sums, [[10.0, 20.0]])
        np.testing.assert_array_equal(b.class_second[0], [[10.0, 14.0], [14.0, 20.0]])
        np.testing.assert_array_equal(b.global_second, b.class_second[0])

    def test_single_sample_rank_one(self):
        a, c = 1.5, -2.0
        b = compute_bundle(LabeledEmbeddingSet([[a, c]], [0], 1), StatsRequest())
        np.testing.assert_array_equal(b.global_second, [[a * a, a * c], [a * c, c * c]])
        assert np.linalg.matrix_rank(b.global_second) == 1

    def test_absent_class(self):
        s = LabeledEmbeddingSet(np.ones((4, 3)), [0, 1, 2, 4], 5)
        b = compute_bundle(s, FULL)
        assert b.counts[3] == 0
        np.testing.assert_array_equal(b.first_moments[3], 0.0)
        np.testing.assert_array_equal(b.class_second[3], 0.0)

    def test_diag_matches_exactly(self, small_set):
        b = compute_bundle(small_set, FULL)
        np.testing.assert_array_equal(b.class_sq_sums, np.diagonal(b.class_second, axis1=1, axis2=2))
        assert rel_err(b.class_second.sum(axis=0), b.global_second) <= 1e-9

    def test_power_sums(self, small_set):
        b = compute_bundle(small_set, FULL)
        X, y = small_set.features, small_set.labels
        for c in range(small_set.class_count):
            np.testing.assert_allclose(b.class_cube_sums[c], (X[y == c] ** 3).sum(0), rtol=1e-12)
            np.testing.assert_allclose(b.class_quart_sums[c], (X[y == c] ** 4).sum(0), rtol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariance(self, seed):
        s = random_set(120, 5, 3, seed=seed)
        perm = np.random.default_rng(seed).permutation(s.n)
        a, b = compute_bundle(s, FULL), compute_bundle(s.subset(perm), FULL)
        np.testing.assert_array_equal(a.counts, b.counts)
        for name in ("first_moments",) + a.present():
            assert rel_err(getattr(a, name), getattr(b, name)) <= 1e-10

    def test_projected_space_tag(self, small_set):
        req = StatsRequest(project_with={"seed": 4, "d": small_set.dim, "k": 3})
        b = compute_bundle(small_set, req)
        assert b.space == SpaceTag.projected(4, 3) and b.dim == 3


class TestRequests:
    def test_for_heads(self):
        assert StatsRequest.for_heads({"nb_diag"}).present() == ("class_sq_sums",)
        assert StatsRequest.for_heads({"lda"}).present() == ("global_second",)
        assert StatsRequest.for_heads({"lda", "qda", "nb_diag"}).present() == ("class_second",)
        assert StatsRequest.for_heads({"dlr_qda_r4"}).present() == ("class_second",)
        diag = StatsRequest.for_heads({"lda"}, diagnostics=True).present()
        assert diag == ("global_second", "class_sq_sums", "class_cube_sums", "class_quart_sums")


class TestSerialization:
    def test_header_size(self):
        assert HEADER_SIZE == 32

    def test_round_trip(self, small_set):
        for req in (FULL, StatsRequest(), StatsRequest(want_B=False, want_D=True)):
            b = compute_bundle(small_set, req)
            buf = serialize_bundle(b)
            assert len(buf) == HEADER_SIZE + 8 * payload_scalars(b)
            _bundle_equal(deserialize_bundle(buf), b)

    def test_projected_header(self, small_set):
        b = compute_bundle(small_set, StatsRequest(project_with={"seed": 123456789012, "d": 6, "k": 2}))
        assert decode_header(serialize_bundle(b)).space == SpaceTag.projected(123456789012, 2)

    def test_vector_round_trip(self, small_set):
        b = compute_bundle(small_set, FULL)
        _bundle_equal(vector_to_bundle(bundle_to_vector(b), BundleLayout.of(b)), b)

    def test_corrupt_frames(self, small_set):
        buf = serialize_bundle(compute_bundle(small_set, StatsRequest()))
        with pytest.raises(ValueError):
            deserialize_bundle(b"XXXX" + buf[4:])
        with pytest.raises(ValueError):
            deserialize_bundle(buf[:-8])


class TestPayload:
    @pytest.mark.parametrize("C,k", [(10, 16), (100, 256)])
    def test_family_formulas(self, C, k):
        tri = k * (k + 1) // 2
        expect = {"nb_diag": C * (1 + 2 * k), "lda": C * (1 + k) + tri, "qda": C * (1 + k + tri)}
        for name, req in FAMILY_REQUESTS.items():
            got = report_payload_bytes(req, C, k)
            assert got.scalars == expect[name]
            assert got.bytes == 8 * expect[name]

    def test_reference_counts(self):
        assert report_payload_bytes(FAMILY_REQUESTS["nb_diag"], 10, 16).scalars == 330
        assert report_payload_bytes(FAMILY_REQUESTS["lda"], 10, 16).scalars == 306

    def test_k_zero(self):
        with pytest.raises(ValueError):
            report_payload_bytes(FAMILY_REQUESTS["lda"], 10, 0)

    def test_matches_serialized_frame(self, small_set):
        for req in FAMILY_REQUESTS.values():
            b = compute_bundle(small_set, req)
            count = report_payload_bytes(req, small_set.class_count, small_set.dim)
            assert len(serialize_bundle(b)) == count.frame_bytes
