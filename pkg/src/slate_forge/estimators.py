"""scikit-learn style wrappers: an SVD embedder and a trainable slate policy."""

from __future__ import annotations

from typing import Optional

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import EmbeddingMatrix, mean_embeddings
from .data import InteractionDataset, SessionSplit, compute_svd_embeddings
from .mips import ExactIndex, build_approx
from .train import TrainConfig, evaluate_deterministic, train


def _observed_rows(X):
    """Observed item sets from a SessionSplit, a sparse/dense user-item matrix or a list of id arrays."""
    if isinstance(X, SessionSplit):
        return X.observed
    if isinstance(X, InteractionDataset):
        return [X.user_items(u) for u in range(X.n_users)]
    if sp.issparse(X) or isinstance(X, np.ndarray):
        A = sp.csr_matrix(X)
        return [A.indices[A.indptr[u]:A.indptr[u + 1]] for u in range(A.shape[0])]
    return [np.asarray(x, dtype=np.int64) for x in X]


class SVDEmbedder(TransformerMixin, BaseEstimator):
    """Rank-L randomized SVD of the interaction matrix.

    ``fit`` learns action embeddings (singular-value-weighted right singular
    vectors); ``transform`` maps users to their mean observed embedding.
    """

    def __init__(self, n_components: int = 16, n_iter: int = 30, full_matrix: bool = False, random_state: int = 0):
        self.n_components = n_components
        self.n_iter = n_iter
        self.full_matrix = full_matrix
        self.random_state = random_state

    def fit(self, X, y=None):
        beta, (_, s, Vt) = compute_svd_embeddings(X, self.n_components, self.n_iter, self.random_state,
                                                  full_matrix=self.full_matrix, return_svd=True)
        self.embeddings_ = beta
        self.singular_values_ = s
        self.components_ = Vt
        self.n_features_in_ = beta.P
        return self

    def transform(self, X):
        check_is_fitted(self, "embeddings_")
        return mean_embeddings(self.embeddings_, _observed_rows(X))


class SlatePolicy(BaseEstimator):
    """Slate policy h(x) = M(X) theta over fixed embeddings, trained with one of the gradient estimators.

    ``fit(split, embeddings)`` trains on a SessionSplit; ``predict`` returns
    the deterministic top-K slates; ``score`` is the mean slate reward on a
    SessionSplit.
    """

    def __init__(self, estimator: str = "lgp", K: int = 5, S: int = 10, sigma="auto", lr: float = 1e-2,
                 batch_size: int = 32, iterations: Optional[int] = 1000, seconds: Optional[float] = None,
                 variant: str = "linear", init_scale: float = 0.1, mips_beam: int = 64, random_state: int = 0):
        self.estimator = estimator
        self.K = K
        self.S = S
        self.sigma = sigma
        self.lr = lr
        self.batch_size = batch_size
        self.iterations = iterations
        self.seconds = seconds
        self.variant = variant
        self.init_scale = init_scale
        self.mips_beam = mips_beam
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        iterations = None if self.seconds is not None else self.iterations
        return TrainConfig(estimator=self.estimator, K=self.K, S=self.S, sigma=self.sigma, lr=self.lr,
                           batch_size=self.batch_size, iterations=iterations, seconds=self.seconds,
                           seed=self.random_state, variant=self.variant, init_scale=self.init_scale,
                           mips_beam=self.mips_beam)

    def fit(self, X: SessionSplit, embeddings, index=None, validation: Optional[SessionSplit] = None):
        beta = embeddings.embeddings_ if isinstance(embeddings, SVDEmbedder) else embeddings
        if not isinstance(beta, EmbeddingMatrix):
            beta = EmbeddingMatrix.from_items(np.asarray(beta))
        config = self._config()
        if config.estimator == "lgp-mips" and index is None:
            index = build_approx(beta, rng=self.random_state)
        self.params_, self.log_ = train(config, X, beta, index, self.random_state, val_split=validation)
        self.embeddings_ = beta
        self.n_features_in_ = beta.P
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        M = mean_embeddings(self.embeddings_, _observed_rows(X))
        return ExactIndex(self.embeddings_).query_batch(self.params_.embed(M), self.K)

    def score(self, X: SessionSplit, y=None) -> float:
        check_is_fitted(self, "params_")
        return evaluate_deterministic(self.params_, self.embeddings_, X, self.K)
