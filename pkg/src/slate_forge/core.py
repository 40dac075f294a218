"""Shared domain types, random streams and the exact top-K decision function."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ConfigurationError

ActionId = int

# A slate is an int64 array of K distinct action ids; a batch of slates is (n, K).
Slate = np.ndarray


class RngStream:
    """Counter-based (Philox) random stream.

    Identical seeds give identical draws on every platform. ``spawn`` derives
    independent child streams, which is how the S noise draws of one gradient
    estimate (or the contexts of one batch) are split across workers.
    """

    def __init__(self, seed: Union[int, np.random.SeedSequence] = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
            self.seed = int(seed.entropy) if isinstance(seed.entropy, int) else 0
        else:
            self.seed = int(seed)
            self._seq = np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.Philox(self._seq))

    def spawn(self, n: int) -> list["RngStream"]:
        return [RngStream(s) for s in self._seq.spawn(n)]

    def child(self) -> "RngStream":
        return self.spawn(1)[0]

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)

    def __repr__(self):
        return f"RngStream(seed={self.seed})"


def as_stream(rng) -> RngStream:
    """Coerce ``None``/int/RngStream into an RngStream."""
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(0)
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    raise TypeError(f"cannot build a random stream from {type(rng).__name__}")


class EmbeddingMatrix:
    """Fixed action embeddings beta, conceptually an L x P matrix.

    Storage is action-major (``items`` has shape (P, L), one action per
    contiguous row); ``data`` is the (L, P) view of the same memory.
    """

    def __init__(self, data: np.ndarray, *, action_major: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ConfigurationError("embedding matrix must be two-dimensional")
        items = arr if action_major else arr.T
        items = np.ascontiguousarray(items)
        P, L = items.shape
        if L < 1 or P < 1:
            raise ConfigurationError(f"embedding matrix needs L >= 1 and P >= 1, got L={L}, P={P}")
        if not np.all(np.isfinite(items)):
            raise ConfigurationError("embedding matrix has non-finite entries")
        items.setflags(write=False)
        self.items = items
        self.norms = np.linalg.norm(items, axis=1)
        self.norms.setflags(write=False)

    @classmethod
    def from_items(cls, items: np.ndarray) -> "EmbeddingMatrix":
        return cls(items, action_major=True)

    @property
    def data(self) -> np.ndarray:
        return self.items.T

    @property
    def L(self) -> int:
        return self.items.shape[1]

    @property
    def P(self) -> int:
        return self.items.shape[0]

    def column(self, a: int) -> np.ndarray:
        return self.items[a]

    def scores(self, h: np.ndarray) -> np.ndarray:
        """Inner products h^T beta_a for every action (rows of ``h`` if 2-D)."""
        h = np.asarray(h, dtype=np.float64)
        if h.shape[-1] != self.L:
            raise ConfigurationError(f"latent dimension {h.shape[-1]} does not match L={self.L}")
        return h @ self.items.T

    def mean_norm(self) -> float:
        return float(self.norms.mean())

    def __repr__(self):
        return f"EmbeddingMatrix(L={self.L}, P={self.P})"


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class PolicyParams:
    """Parameters of the context-embedding map h_theta."""

    variant = "base"

    @property
    def L(self) -> int:
        raise NotImplementedError

    def embed(self, m: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def pullback(self, m: np.ndarray, grad_h: np.ndarray) -> np.ndarray:
        """Chain rule from a latent-space gradient to a flat parameter gradient.

        Accepts a single (m, grad_h) pair or row-aligned batches; batches
        return one flat gradient per row.
        """
        raise NotImplementedError

    def to_vector(self) -> np.ndarray:
        raise NotImplementedError

    def with_vector(self, vec: np.ndarray) -> "PolicyParams":
        raise NotImplementedError

    @property
    def size(self) -> int:
        return self.to_vector().size

    def _check(self, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape[-1] != self.L:
            raise ConfigurationError(f"mean embedding has length {m.shape[-1]}, parameters expect {self.L}")
        return m


@dataclass(frozen=True, eq=False)
class LinearParams(PolicyParams):
    """h(m) = m @ theta with theta of shape (L, L)."""

    theta: np.ndarray
    variant = "linear"

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
            raise ConfigurationError(f"theta must be square, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ConfigurationError("theta has non-finite entries")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def identity(cls, L: int, scale: float = 1.0) -> "LinearParams":
        return cls(scale * np.eye(L))

    @property
    def L(self):
        return self.theta.shape[0]

    def embed(self, m):
        return self._check(m) @ self.theta

    def pullback(self, m, grad_h):
        m = self._check(m)
        grad_h = np.asarray(grad_h, dtype=np.float64)
        if m.ndim == 1:
            return np.outer(m, grad_h).ravel()
        return np.einsum("ni,nj->nij", m, grad_h).reshape(len(m), -1)

    def to_vector(self):
        return self.theta.ravel().copy()

    def with_vector(self, vec):
        return LinearParams(np.asarray(vec, dtype=np.float64).reshape(self.theta.shape))


@dataclass(frozen=True, eq=False)
class TwoLayerParams(PolicyParams):
    """h(m) = sigmoid(m @ theta1) @ theta2, both weights (L, L)."""

    theta1: np.ndarray
    theta2: np.ndarray
    variant = "two_layer"

    def __post_init__(self):
        t1 = np.array(self.theta1, dtype=np.float64)
        t2 = np.array(self.theta2, dtype=np.float64)
        if t1.ndim != 2 or t1.shape[0] != t1.shape[1] or t1.shape != t2.shape:
            raise ConfigurationError(f"two-layer weights must be equal square matrices, got {t1.shape} and {t2.shape}")
        if not (np.all(np.isfinite(t1)) and np.all(np.isfinite(t2))):
            raise ConfigurationError("two-layer weights have non-finite entries")
        t1.setflags(write=False)
        t2.setflags(write=False)
        object.__setattr__(self, "theta1", t1)
        object.__setattr__(self, "theta2", t2)

    @property
    def L(self):
        return self.theta1.shape[0]

    def embed(self, m):
        return _sigmoid(self._check(m) @ self.theta1) @ self.theta2

    def pullback(self, m, grad_h):
        m = self._check(m)
        grad_h = np.asarray(grad_h, dtype=np.float64)
        z = _sigmoid(m @ self.theta1)
        back = (grad_h @ self.theta2.T) * z * (1.0 - z)
        if m.ndim == 1:
            return np.concatenate([np.outer(m, back).ravel(), np.outer(z, grad_h).ravel()])
        n = len(m)
        g1 = np.einsum("ni,nj->nij", m, back).reshape(n, -1)
        g2 = np.einsum("ni,nj->nij", z, grad_h).reshape(n, -1)
        return np.concatenate([g1, g2], axis=1)

    def to_vector(self):
        return np.concatenate([self.theta1.ravel(), self.theta2.ravel()])

    def with_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        k = self.theta1.size
        return TwoLayerParams(vec[:k].reshape(self.theta1.shape), vec[k:].reshape(self.theta2.shape))


def context_embedding(params: PolicyParams, m: np.ndarray) -> np.ndarray:
    """Latent query h_theta(x) computed from the mean embedding ``m``."""
    return params.embed(m)


def _check_k(K: int, P: int):
    if not isinstance(K, (int, np.integer)) or K < 1:
        raise ValueError(f"slate size must be a positive integer, got {K!r}")
    if K > P:
        raise ValueError(f"slate size K={K} exceeds the number of actions P={P}")


def top_k(scores: np.ndarray, K: int) -> np.ndarray:
    """Indices of the K largest scores, decreasing; ties go to the smaller index."""
    scores = np.asarray(scores)
    P = scores.shape[-1]
    _check_k(K, P)
    if scores.ndim == 1:
        return top_k(scores[None, :], K)[0]
    n = scores.shape[0]
    if K == P:
        cand = np.broadcast_to(np.arange(P), (n, P))
    else:
        cand = np.argpartition(-scores, K - 1, axis=1)[:, :K]
    cand_scores = np.take_along_axis(scores, cand, axis=1)
    # Rows whose K-th value is tied with an unselected score need the id tie-break.
    kth = cand_scores.min(axis=1)
    n_tied_total = (scores == kth[:, None]).sum(axis=1)
    n_tied_sel = (cand_scores == kth[:, None]).sum(axis=1)
    cand = np.array(cand, dtype=np.int64)
    for i in np.flatnonzero(n_tied_total != n_tied_sel):
        above = np.flatnonzero(scores[i] > kth[i])
        tied = np.flatnonzero(scores[i] == kth[i])[: K - above.size]
        cand[i] = np.concatenate([above, tied])
    cand_scores = np.take_along_axis(scores, cand, axis=1)
    rows = np.repeat(np.arange(n), K)
    order = np.lexsort((cand.ravel(), -cand_scores.ravel(), rows))
    return cand.ravel()[order].reshape(n, K)


def decide(beta: EmbeddingMatrix, h: np.ndarray, K: int) -> Slate:
    """Deterministic decision: the top-K actions by h^T beta_a."""
    _check_k(K, beta.P)
    return top_k(beta.scores(h), K)


def mean_embedding(beta: EmbeddingMatrix, observed: Iterable[int]) -> np.ndarray:
    """Average embedding of the observed actions."""
    ids = np.fromiter(observed, dtype=np.int64) if not isinstance(observed, np.ndarray) else observed.astype(np.int64)
    if ids.size == 0:
        raise ValueError("mean embedding of an empty set of actions is undefined")
    if ids.min() < 0 or ids.max() >= beta.P:
        raise ValueError("observed action id out of range")
    return beta.items[ids].mean(axis=0)


def mean_embeddings(beta: EmbeddingMatrix, observed: Sequence[np.ndarray]) -> np.ndarray:
    """Row-wise mean embeddings for many users, computed with one sparse product."""
    import scipy.sparse as sp

    lengths = np.array([len(o) for o in observed], dtype=np.int64)
    if np.any(lengths == 0):
        raise ValueError("mean embedding of an empty set of actions is undefined")
    indptr = np.concatenate([[0], np.cumsum(lengths)])
    indices = np.concatenate([np.asarray(o, dtype=np.int64) for o in observed]) if len(observed) else np.zeros(0, np.int64)
    vals = np.repeat(1.0 / lengths, lengths) if len(observed) else np.zeros(0)
    A = sp.csr_matrix((vals, indices, indptr), shape=(len(observed), beta.P))
    return np.asarray(A @ beta.items)
