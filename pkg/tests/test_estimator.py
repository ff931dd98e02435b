import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fundusclip.estimator import FundusClip, check_image_batch, check_pair_list
from fundusclip.syndata import generate_corpus


def tiny_estimator(**over):
    kw = dict(batch_size=4, epochs=1, seed=5, image_size=16,
              stem_channels=4, num_residual_blocks=2, embed_dim=16,
              text_model_dim=32, text_max_seq_len=28)
    kw.update(over)
    return FundusClip(**kw)


@pytest.fixture(scope="module")
def fitted():
    est = tiny_estimator()
    est.fit(generate_corpus(12, 44, size=16))
    return est


class TestSklearnContract:
    def test_get_set_params_round_trip(self):
        est = tiny_estimator()
        params = est.get_params()
        assert params["batch_size"] == 4 and params["embed_dim"] == 16
        est.set_params(epochs=3)
        assert est.epochs == 3

    def test_clone_preserves_hyperparameters(self):
        est = tiny_estimator(task="multi-disease")
        twin = clone(est)
        assert twin.get_params() == est.get_params()

    def test_not_fitted_errors(self):
        est = tiny_estimator()
        x = np.zeros((1, 3, 16, 16))
        with pytest.raises(NotFittedError):
            est.transform(x)
        with pytest.raises(NotFittedError):
            est.predict(x)


class TestValidation:
    def test_image_batch_shape(self):
        with pytest.raises(ValueError, match="expected images"):
            check_image_batch(np.zeros((2, 1, 16, 16)), 16)
        single = check_image_batch(np.zeros((3, 16, 16)), 16)
        assert single.shape == (1, 3, 16, 16)

    def test_image_batch_range(self):
        with pytest.raises(ValueError, match="0, 1"):
            check_image_batch(np.full((1, 3, 16, 16), 2.0), 16)

    def test_pair_list(self):
        with pytest.raises(ValueError, match="non-empty"):
            check_pair_list([])
        with pytest.raises(ValueError, match="item 0"):
            check_pair_list([object()])


class TestFittedBehaviour:
    def test_transform_rows_unit_norm(self, fitted):
        pairs = generate_corpus(10, 45, size=16)
        emb = fitted.transform(np.stack([p.image for p in pairs]))
        assert emb.shape == (10, 16)
        np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0,
                                   atol=1e-9)

    def test_predict_returns_class_indices(self, fitted):
        pairs = generate_corpus(10, 46, size=16)
        preds = fitted.predict(np.stack([p.image for p in pairs]))
        assert preds.shape == (10,)
        assert set(preds) <= {0, 1}  # glaucoma screening is binary

    def test_unknown_task_rejected(self, fitted):
        est = clone(fitted).set_params(task="nope")
        est.params_ = fitted.params_
        est.config_ = fitted.config_
        est.vocab_ = fitted.vocab_
        with pytest.raises(ValueError, match="valid tasks"):
            est.predict(np.zeros((1, 3, 16, 16)))

    def test_checkpoint_round_trip(self, fitted, tmp_path):
        path = tmp_path / "est.ckpt"
        fitted.save(path)
        again = FundusClip.from_checkpoint(path)
        pairs = generate_corpus(10, 47, size=16)
        x = np.stack([p.image for p in pairs])
        np.testing.assert_array_equal(fitted.transform(x), again.transform(x))
        np.testing.assert_array_equal(fitted.predict(x), again.predict(x))

    def test_fit_is_deterministic(self):
        pairs = generate_corpus(12, 48, size=16)
        a = tiny_estimator().fit(pairs)
        b = tiny_estimator().fit(pairs)
        x = np.stack([p.image for p in pairs[:4]])
        np.testing.assert_array_equal(a.transform(x), b.transform(x))
