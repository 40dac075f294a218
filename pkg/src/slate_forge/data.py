"""Interaction data: CSV/SLEB I/O, synthetic generation, session splits, SVD embeddings, reward."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .core import EmbeddingMatrix, RngStream, as_stream
from .errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

CSV_HEADER = ("user_id", "item_id")
SLEB_MAGIC = b"SLEB"
SLEB_VERSION = 1


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Binary user x item interactions stored as CSR (sorted, duplicate-free rows)."""

    n_users: int
    n_items: int
    indptr: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        if self.indptr.shape != (self.n_users + 1,):
            raise ValidationError("indptr length must be n_users + 1")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.n_items):
            raise ValidationError("item id out of range")

    @classmethod
    def from_pairs(cls, users, items, n_users=None, n_items=None, *, allow_duplicates=False) -> "InteractionDataset":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.shape != items.shape:
            raise ValidationError("user and item arrays must have equal length")
        if users.size and (users.min() < 0 or items.min() < 0):
            raise ValidationError("ids must be non-negative")
        U = int(users.max()) + 1 if n_users is None else int(n_users)
        P = int(items.max()) + 1 if n_items is None else int(n_items)
        if users.size and users.max() >= U:
            raise ValidationError(f"user id {int(users.max())} out of range for {U} users")
        if items.size and items.max() >= P:
            raise ValidationError(f"item id {int(items.max())} out of range for {P} items")
        order = np.lexsort((items, users))
        users, items = users[order], items[order]
        dup = (np.diff(users) == 0) & (np.diff(items) == 0)
        if dup.any():
            if not allow_duplicates:
                i = int(np.flatnonzero(dup)[0])
                raise ValidationError(f"duplicate interaction (user={users[i]}, item={items[i]})")
            keep = np.concatenate([[True], ~dup])
            users, items = users[keep], items[keep]
        indptr = np.zeros(U + 1, dtype=np.int64)
        np.add.at(indptr, users + 1, 1)
        return cls(U, P, np.cumsum(indptr), items)

    @classmethod
    def from_matrix(cls, matrix) -> "InteractionDataset":
        m = sp.csr_matrix(matrix)
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr.astype(np.int64), m.indices.astype(np.int64))

    @property
    def n_interactions(self) -> int:
        return int(self.indices.size)

    @property
    def density(self) -> float:
        cells = self.n_users * self.n_items
        return self.n_interactions / cells if cells else 0.0

    def user_items(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def to_csr(self) -> sp.csr_matrix:
        data = np.ones(self.indices.size, dtype=np.float64)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n_users, self.n_items))

    def pairs(self):
        users = np.repeat(np.arange(self.n_users), np.diff(self.indptr))
        return users, self.indices

    def __eq__(self, other):
        if not isinstance(other, InteractionDataset):
            return NotImplemented
        return (
            self.n_users == other.n_users
            and self.n_items == other.n_items
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )


def load_interactions(path, n_users: Optional[int] = None, n_items: Optional[int] = None) -> InteractionDataset:
    """Parse a ``user_id,item_id`` CSV.

    Without explicit sizes the user/item counts are max id + 1. Malformed
    lines raise ParseError with the 1-based line number; out-of-range ids
    and duplicate pairs raise ValidationError.
    """
    path = Path(path)
    users, items = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("missing header", lineno=1, path=path)
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise ParseError(f"expected header 'user_id,item_id', got {','.join(header)!r}", lineno=1, path=path)
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, got {len(row)}", lineno=lineno, path=path)
            try:
                u, i = int(row[0]), int(row[1])
            except ValueError:
                raise ParseError(f"non-integer id in {row!r}", lineno=lineno, path=path) from None
            if u < 0 or i < 0:
                raise ParseError(f"negative id in {row!r}", lineno=lineno, path=path)
            users.append(u)
            items.append(i)
    if not users:
        return InteractionDataset(n_users or 0, n_items or 0, np.zeros((n_users or 0) + 1, np.int64), np.zeros(0, np.int64))
    return InteractionDataset.from_pairs(users, items, n_users, n_items)


def save_interactions(ds: InteractionDataset, path) -> None:
    users, items = ds.pairs()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for u, i in zip(users.tolist(), items.tolist()):
            fh.write(f"{u},{i}\n")


def generate_synthetic(U: int, P: int, L_true: int = 16, density: float = 0.0024, seed: int = 0,
                       popularity: float = 1.0, temperature: float = 1.0, min_items: int = 2) -> InteractionDataset:
    """Low-rank-logit interaction data with controlled density.

    Each user has a latent factor and each item a latent factor plus a
    popularity offset; logits are their inner product. A user's interaction
    count is Binomial(P, density) (at least ``min_items``) and the items are
    drawn without replacement with probabilities proportional to exp(logit),
    which is a Gumbel top-n over the logits.
    """
    if not (0.0 < density < 1.0):
        raise ValueError(f"density must lie in (0, 1), got {density}")
    if U < 1 or P < 2:
        raise ValueError("need at least one user and two items")
    rng = RngStream(seed)
    gen = rng.generator
    user_f = gen.standard_normal((U, L_true)) / np.sqrt(L_true) * 3.0
    item_f = gen.standard_normal((P, L_true))
    item_b = popularity * gen.standard_normal(P)
    counts = np.clip(gen.binomial(P, density, size=U), min_items, P)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    indices = np.empty(indptr[-1], dtype=np.int64)
    chunk = max(1, int(4_000_000 // P))
    for start in range(0, U, chunk):
        stop = min(U, start + chunk)
        logits = (user_f[start:stop] @ item_f.T + item_b) / temperature
        logits += gen.gumbel(size=logits.shape)
        for r, u in enumerate(range(start, stop)):
            n = counts[u]
            top = np.argpartition(-logits[r], n - 1)[:n]
            indices[indptr[u]:indptr[u + 1]] = np.sort(top)
    return InteractionDataset(U, P, indptr, indices)


def synthetic_embeddings(P: int, L: int, seed: int = 0, decay: float = 0.5, norm_spread: float = 0.3) -> EmbeddingMatrix:
    """SVD-like embeddings without a dataset: power-law spectrum, log-normal action norms."""
    gen = RngStream(seed).generator
    spectrum = np.arange(1, L + 1, dtype=np.float64) ** (-decay)
    items = gen.standard_normal((P, L)) * spectrum
    items *= np.exp(norm_spread * gen.standard_normal((P, 1)))
    return EmbeddingMatrix.from_items(items)


@dataclass(frozen=True, eq=False)
class SessionSplit:
    """Per-user observed (X) / hidden (Y) partition."""

    users: np.ndarray
    observed: list
    hidden: list
    split_ratio: float
    seed: int
    n_items: int
    dropped: int = 0

    def __len__(self):
        return len(self.users)

    def subset(self, idx) -> "SessionSplit":
        idx = np.asarray(idx, dtype=np.int64)
        return SessionSplit(self.users[idx], [self.observed[i] for i in idx], [self.hidden[i] for i in idx],
                            self.split_ratio, self.seed, self.n_items, 0)

    def observed_matrix(self) -> sp.csr_matrix:
        """Observed interactions as a (len(users), n_items) CSR matrix."""
        return _rows_to_csr(self.observed, self.n_items)

    def hidden_matrix(self) -> sp.csr_matrix:
        return _rows_to_csr(self.hidden, self.n_items)


def _rows_to_csr(rows, n_cols) -> sp.csr_matrix:
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(lengths)])
    indices = np.concatenate(rows).astype(np.int64) if rows else np.zeros(0, np.int64)
    return sp.csr_matrix((np.ones(indices.size), indices, indptr), shape=(len(rows), n_cols))


def split_sessions(ds: InteractionDataset, ratio: float = 0.5, seed: int = 0) -> SessionSplit:
    """Randomly split every user's interactions into observed and hidden parts.

    Users with fewer than two interactions are dropped (count logged). The
    observed size is round(ratio * n) clipped to [1, n - 1].
    """
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    gen = RngStream(seed).generator
    users, observed, hidden = [], [], []
    dropped = 0
    for u in range(ds.n_users):
        items = ds.user_items(u)
        n = items.size
        if n < 2:
            dropped += 1
            continue
        perm = gen.permutation(n)
        n_obs = int(min(max(round(ratio * n), 1), n - 1))
        users.append(u)
        observed.append(np.sort(items[perm[:n_obs]]))
        hidden.append(np.sort(items[perm[n_obs:]]))
    if dropped:
        logger.warning("split_sessions: dropped %d users with fewer than 2 interactions", dropped)
    return SessionSplit(np.asarray(users, dtype=np.int64), observed, hidden, ratio, seed, ds.n_items, dropped)


def holdout_users(split: SessionSplit, fraction: float = 0.1, seed: int = 0):
    """Split users into (train, validation) sessions; validation gets ``fraction`` of users."""
    if not (0.0 < fraction < 1.0):
        raise ValueError("holdout fraction must lie in (0, 1)")
    n = len(split)
    perm = RngStream(seed).generator.permutation(n)
    n_val = max(1, int(round(fraction * n)))
    return split.subset(np.sort(perm[n_val:])), split.subset(np.sort(perm[:n_val]))


def randomized_svd(A, k: int, iters: int = 30, oversample: int = 10, seed: int = 0, tol: float = 1e-10):
    """Rank-k truncated SVD by randomized subspace iteration.

    Iterates until the leading k singular values change by less than ``tol``
    (relative) or ``iters`` power steps have run. Returns (U, s, Vt) with the
    sign of each singular pair fixed so the largest |entry| of V is positive.
    """
    n_rows, n_cols = A.shape
    r = min(k + oversample, n_rows, n_cols)
    gen = RngStream(seed).generator
    Q = np.linalg.qr(A @ gen.standard_normal((n_cols, r)))[0]
    s_prev = None
    for _ in range(max(iters, 1)):
        Z = np.linalg.qr(A.T @ Q)[0]
        Q = np.linalg.qr(A @ Z)[0]
        B = Q.T @ A
        s = np.linalg.svd(B, compute_uv=False)[:k]
        if s_prev is not None and np.all(np.abs(s - s_prev) <= tol * max(s[0], 1e-300)):
            break
        s_prev = s
    B = np.asarray(Q.T @ A)
    Ub, s, Vt = np.linalg.svd(B, full_matrices=False)
    U = Q @ Ub[:, :k]
    s = s[:k]
    Vt = Vt[:k]
    idx = np.argmax(np.abs(Vt), axis=1)
    signs = np.sign(Vt[np.arange(k), idx])
    signs[signs == 0] = 1.0
    return U * signs, s, Vt * signs[:, None]


@dataclass(frozen=True)
class EmbeddingSpec:
    L: int
    method: str = "svd"
    path: Optional[str] = None


def compute_svd_embeddings(source, L: int, iters: int = 30, seed: int = 0, *, full_matrix: bool = False,
                           return_svd: bool = False):
    """Action embeddings beta_a = singular values * (row a of V) from a rank-L SVD.

    ``source`` is an InteractionDataset, a SessionSplit (observed part only
    unless ``full_matrix``) or any 2-D (sparse) matrix.
    """
    if isinstance(source, SessionSplit):
        A = source.observed_matrix()
        if full_matrix:
            A = A + source.hidden_matrix()
    elif isinstance(source, InteractionDataset):
        A = source.to_csr()
    else:
        A = sp.csr_matrix(source) if sp.issparse(source) else np.asarray(source, dtype=np.float64)
    if not isinstance(L, (int, np.integer)) or L < 1 or L > min(A.shape):
        raise ValueError(f"embedding dimension L={L} must lie in [1, min(U, P)={min(A.shape)}]")
    U, s, Vt = randomized_svd(A, L, iters=iters, seed=seed)
    beta = EmbeddingMatrix(s[:, None] * Vt)
    if return_svd:
        return beta, (U, s, Vt)
    return beta


def save_embeddings(beta: EmbeddingMatrix, path) -> None:
    """SLEB: magic, version u32, L u32, P u64, then P*L little-endian float32, one action contiguous."""
    with open(path, "wb") as fh:
        fh.write(SLEB_MAGIC)
        fh.write(struct.pack("<IIQ", SLEB_VERSION, beta.L, beta.P))
        fh.write(np.ascontiguousarray(beta.items, dtype="<f4").tobytes())


def load_embeddings(path) -> EmbeddingMatrix:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SLEB_MAGIC:
            raise ParseError(f"bad magic {magic!r}, expected {SLEB_MAGIC!r}", path=path)
        header = fh.read(16)
        if len(header) != 16:
            raise ParseError("truncated header", path=path)
        version, L, P = struct.unpack("<IIQ", header)
        if version != SLEB_VERSION:
            raise ParseError(f"unsupported SLEB version {version}", path=path)
        payload = fh.read()
    if len(payload) != 4 * L * P:
        raise ParseError(f"payload has {len(payload)} bytes, expected {4 * L * P}", path=path)
    items = np.frombuffer(payload, dtype="<f4").reshape(P, L).astype(np.float64)
    return EmbeddingMatrix.from_items(items)


def position_weights(K: int) -> np.ndarray:
    """Geometric position discounts 1, 1/2, 1/4, ... of the slate reward."""
    return 0.5 ** np.arange(K, dtype=np.float64)


def slate_reward(slate, hidden) -> float:
    """Sum over positions k of [a_k in hidden] / 2^(k-1)."""
    slate = np.asarray(slate, dtype=np.int64)
    hidden = np.asarray(sorted(hidden) if isinstance(hidden, (set, frozenset)) else hidden, dtype=np.int64)
    hits = np.isin(slate, hidden)
    return float(hits @ position_weights(slate.size))


class SlateReward:
    """Position-linear reward: sum_k weights[k] * [a_k in hidden].

    Calling it on one slate returns a float; ``batch`` scores an (n, K)
    array. The default weights are the geometric discounts used throughout.
    """

    linear = True

    def __init__(self, weights: Optional[Sequence[float]] = None):
        self.weights = None if weights is None else np.asarray(weights, dtype=np.float64)

    def _w(self, K):
        if self.weights is None:
            return position_weights(K)
        if self.weights.size < K:
            raise ValueError(f"reward has {self.weights.size} position weights, slate has {K}")
        return self.weights[:K]

    def __call__(self, slate, hidden) -> float:
        slate = np.asarray(slate, dtype=np.int64)
        return float(np.isin(slate, _as_sorted(hidden)) @ self._w(slate.size))

    def batch(self, slates, hidden) -> np.ndarray:
        slates = np.asarray(slates, dtype=np.int64)
        return np.isin(slates, _as_sorted(hidden)).astype(np.float64) @ self._w(slates.shape[-1])

    def relevance(self, hidden, P: int) -> np.ndarray:
        rel = np.zeros(P, dtype=np.float64)
        rel[_as_sorted(hidden)] = 1.0
        return rel

    def position_weights(self, K: int) -> np.ndarray:
        return self._w(K)


def _as_sorted(hidden) -> np.ndarray:
    if isinstance(hidden, np.ndarray):
        return hidden.astype(np.int64, copy=False)
    return np.asarray(sorted(hidden), dtype=np.int64)


def batch_rewards(reward, slates, hidden) -> np.ndarray:
    """Rewards of an (n, K) slate batch for any reward callable."""
    if hasattr(reward, "batch"):
        return np.asarray(reward.batch(slates, hidden), dtype=np.float64)
    return np.array([float(reward(s, hidden)) for s in np.asarray(slates)], dtype=np.float64)
