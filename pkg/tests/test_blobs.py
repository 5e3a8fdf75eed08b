import numpy as np
import pytest

from ghofl.blobs import head_from_bytes, head_to_bytes, load_head, save_head
from ghofl.client_stats import StatsRequest, compute_bundle
from ghofl.fisher import FixedK, fit_fisher, project_params
from ghofl.gaussian_heads import estimate_params, fit_head
from ghofl.synth import SynthConfig
from ghofl.train_heads import TrainConfig, train_fishermix, train_protohyper

from conftest import random_set


@pytest.fixture(scope="module")
def fitted():
    data = random_set(400, 6, 4, seed=1)
    p = estimate_params(compute_bundle(data, StatsRequest(want_S=True, want_D=True)))
    basis = fit_fisher(p, FixedK(3))
    return data, p, basis, project_params(p, basis)


class TestBlobs:
    @pytest.mark.parametrize("kind", ["nb_diag", "lda", "qda", "dlr_qda"])
    def test_closed_form_round_trip(self, fitted, tmp_path, kind):
        data, p, _, _ = fitted
        head = fit_head(p, kind, 2)
        digest = save_head(tmp_path / "h.ghh", head)
        assert len(digest) == 64
        back, basis, header = load_head(tmp_path / "h.ghh")
        assert basis is None and header["kind"] == kind
        np.testing.assert_array_equal(back.scores(data.features), head.scores(data.features))

    def test_trainable_round_trip(self, fitted):
        data, _, basis, pf = fitted
        cfg, t = SynthConfig(per_class=32), TrainConfig(epochs=2)
        for head in (train_fishermix(pf, basis, cfg, t), train_protohyper(pf, basis, "qda", cfg, t)):
            back, b, _ = head_from_bytes(head_to_bytes(head))
            np.testing.assert_array_equal(b.V, basis.V)
            np.testing.assert_array_equal(back.scores(data.features), head.scores(data.features))

    def test_fisher_space_closed_form(self, fitted):
        data, _, basis, pf = fitted
        head = fit_head(pf, "lda")
        back, b, _ = head_from_bytes(head_to_bytes(head, basis))
        np.testing.assert_array_equal(back.predict(b.transform(data.features)), head.predict(basis.transform(data.features)))

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            head_from_bytes(b"NOPE" + bytes(20))
