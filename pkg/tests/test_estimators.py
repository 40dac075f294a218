"""scikit-learn style wrappers."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from slate_forge.data import holdout_users
from slate_forge.estimators import SlatePolicy, SVDEmbedder
from slate_forge.train import TrainConfig, evaluate_deterministic, train

from conftest import separable_split


@pytest.fixture(scope="module")
def sep():
    beta, split = separable_split()
    return beta, *holdout_users(split, 0.1, 0)


class TestSVDEmbedder:
    def test_fit_transform(self):
        X = np.zeros((6, 5))
        X[:3, :2] = 1
        X[3:, 2:] = 1
        emb = SVDEmbedder(n_components=2).fit(X)
        assert emb.embeddings_.items.shape == (5, 2)
        assert emb.singular_values_[0] >= emb.singular_values_[1]
        Z = emb.transform(X)
        assert Z.shape == (6, 2)
        np.testing.assert_allclose(Z[0], emb.embeddings_.items[:2].mean(axis=0))

    def test_params_and_clone(self):
        emb = SVDEmbedder(n_components=3, random_state=7)
        assert emb.get_params()["n_components"] == 3
        assert clone(emb).get_params() == emb.get_params()

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            SVDEmbedder().transform(np.eye(3))


class TestSlatePolicy:
    def test_matches_train(self, sep):
        beta, tr, va = sep
        policy = SlatePolicy(estimator="lgp", K=3, S=4, iterations=30, random_state=2).fit(tr, beta)
        params, _ = train(TrainConfig(estimator="lgp", K=3, S=4, iterations=30, seed=2), tr, beta, None, 2)
        np.testing.assert_array_equal(policy.params_.to_vector(), params.to_vector())
        assert policy.score(va) == evaluate_deterministic(params, beta, va, 3)

    def test_predict_shape_and_distinct(self, sep):
        beta, tr, va = sep
        policy = SlatePolicy(estimator="pl-pg", K=4, S=2, iterations=5).fit(tr, beta)
        slates = policy.predict(va)
        assert slates.shape == (len(va), 4)
        assert all(len(set(s)) == 4 for s in slates.tolist())

    def test_clone_is_unfitted(self, sep):
        beta, tr, _ = sep
        policy = SlatePolicy(K=2, iterations=3).fit(tr, beta)
        fresh = clone(policy)
        assert fresh.get_params() == policy.get_params()
        with pytest.raises(NotFittedError):
            fresh.predict(tr)

    def test_set_params(self):
        policy = SlatePolicy().set_params(lr=0.5, K=7)
        assert (policy.lr, policy.K) == (0.5, 7)

    def test_accepts_embedder(self, sep):
        beta, tr, _ = sep
        emb = SVDEmbedder(n_components=4).fit(tr)
        policy = SlatePolicy(K=2, iterations=2).fit(tr, emb)
        assert policy.embeddings_ is emb.embeddings_
