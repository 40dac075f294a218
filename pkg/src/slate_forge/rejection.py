"""Exact softmax and Plackett-Luce sampling by rejection against a MIPS envelope.

Let s_a = h . beta_a and let the index return the top ``K_env`` actions,
whose smallest score is s_K. Every action outside that set has s_a <= s_K,
so the proposal

    head: pick a top action with weight exp(s_a) - exp(s_K)
    tail: pick q uniformly from all P actions, accept with min(1, exp(s_q - s_K))

puts mass exactly exp(s_a) on every action: a top action collects
exp(s_a) - exp(s_K) from the head and exp(s_K) from the tail, every other
action exp(s_a) from the tail. The K_env-th action therefore has no head
weight and is covered by the tail alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import EmbeddingMatrix, _check_k, as_stream
from .errors import SlateForgeError


class EnvelopeViolation(SlateForgeError):
    """A tail proposal outside the candidate set scored above the envelope."""


@dataclass
class RejectionStats:
    accepted: int = 0
    proposed: int = 0
    head_hits: int = 0
    tail_hits: int = 0
    fallbacks: int = 0

    def __post_init__(self):
        self._check()

    def _check(self):
        if self.accepted > self.proposed:
            raise ValueError("accepted cannot exceed proposed")

    def merge(self, other: "RejectionStats") -> "RejectionStats":
        for name in ("accepted", "proposed", "head_hits", "tail_hits", "fallbacks"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        self._check()
        return self

    @property
    def proposals_per_accept(self) -> float:
        return self.proposed / self.accepted if self.accepted else float("inf")


class _Envelope:
    """Head weights and tail bound for one query, in the log domain."""

    def __init__(self, beta: EmbeddingMatrix, h, cand):
        self.beta = beta
        self.h = h
        self.cand = np.asarray(cand, dtype=np.int64)
        # Exact scores over the returned candidates: an approximate index may
        # return them out of order or miss some of the true top set.
        self.s_cand = beta.items[self.cand] @ h
        self.s_K = float(self.s_cand.min())
        self.in_cand = np.zeros(beta.P, dtype=bool)
        self.in_cand[self.cand] = True

    def weights(self, excluded: Optional[np.ndarray] = None):
        """Per-row head probabilities over cand and probability of taking the head.

        ``excluded`` is an (m, P) mask of actions removed per row (or None);
        each row is shifted by its own largest remaining candidate score.
        """
        s = self.s_cand[None, :]
        if excluded is not None:
            s = np.where(excluded[:, self.cand], -np.inf, s)
        c = np.maximum(s.max(axis=1), self.s_K)[:, None]
        with np.errstate(invalid="ignore"):
            head = np.exp(s - c) - np.exp(self.s_K - c)
        head = np.where(np.isfinite(s), np.maximum(head, 0.0), 0.0)
        z_head = head.sum(axis=1)
        z_tail = self.beta.P * np.exp(self.s_K - c[:, 0])
        p_head = z_head / (z_head + z_tail)
        return head, p_head


def _draw(env: _Envelope, n: int, stream, stats: RejectionStats, strict: bool,
          excluded: Optional[np.ndarray] = None) -> np.ndarray:
    """``n`` exact draws; ``excluded`` (n, P) bool removes actions per row."""
    P = env.beta.P
    out = np.full(n, -1, dtype=np.int64)
    pending = np.arange(n)
    if excluded is None:
        head_w, p_head = env.weights()
        cdf_all = np.cumsum(head_w[0])
    while pending.size:
        m = pending.size
        stats.proposed += m
        if excluded is None:
            take_head = stream.uniform(m) < p_head[0]
        else:
            head_w, p_head = env.weights(excluded[pending])
            take_head = stream.uniform(m) < p_head
        got = np.full(m, -1, dtype=np.int64)
        rows = np.flatnonzero(take_head)
        if rows.size:
            cdf = cdf_all[None, :] if excluded is None else np.cumsum(head_w[rows], axis=1)
            target = stream.uniform(rows.size) * cdf[:, -1]
            pos = (cdf <= target[:, None]).sum(axis=1)
            got[rows] = env.cand[np.minimum(pos, env.cand.size - 1)]
            stats.head_hits += rows.size
        tail = np.flatnonzero(~take_head)
        if tail.size:
            q = stream.integers(0, P, size=tail.size)
            u = stream.uniform(tail.size)
            s_q = env.beta.items[q] @ env.h
            if strict:
                over = ~env.in_cand[q] & (s_q > env.s_K)
                if over.any():
                    raise EnvelopeViolation(f"action {int(q[over][0])} scores above the envelope {env.s_K}")
            acc = u < np.exp(np.minimum(s_q - env.s_K, 0.0))
            if excluded is not None:
                acc &= ~excluded[pending[tail], q]
            got[tail[acc]] = q[acc]
            stats.tail_hits += int(acc.sum())
        ok = got >= 0
        out[pending[ok]] = got[ok]
        stats.accepted += int(ok.sum())
        pending = pending[~ok]
    return out


def _exact_index(beta):
    from .mips import ExactIndex

    return ExactIndex(beta)


def rejection_sample_categorical(beta: EmbeddingMatrix, h, K_env: int, index=None, rng=None, n: Optional[int] = None,
                                 strict: bool = True):
    """Exact draws from softmax(h . beta) using the top-``K_env`` actions as the envelope.

    Returns (action, stats), or (actions array, stats) when ``n`` is given.
    In strict mode a tail proposal outside the candidate set that beats the
    envelope (possible only with an approximate index) triggers a restart
    with the exact index; ``stats.fallbacks`` counts such restarts.
    """
    _check_k(K_env, beta.P)
    h = np.asarray(h, dtype=np.float64)
    stream = as_stream(rng)
    index = index if index is not None else _exact_index(beta)
    stats = RejectionStats()
    rows = 1 if n is None else int(n)
    env = _Envelope(beta, h, index.query(h, K_env))
    try:
        out = _draw(env, rows, stream, stats, strict)
    except EnvelopeViolation:
        stats.fallbacks += 1
        env = _Envelope(beta, h, _exact_index(beta).query(h, K_env))
        out = _draw(env, rows, stream, stats, strict)
    return (int(out[0]) if n is None else out), stats


def rejection_sample_pl_slate(beta: EmbeddingMatrix, h, K: int, K_env: int, index=None, rng=None,
                              n: Optional[int] = None, strict: bool = True):
    """Plackett-Luce slates from K successive rejection draws without replacement.

    Already-selected actions get no head weight and are rejected when the
    tail proposes them, so each step draws exactly from the softmax over the
    remaining actions. Returns (slate(s), stats).
    """
    _check_k(K, beta.P)
    _check_k(K_env, beta.P)
    h = np.asarray(h, dtype=np.float64)
    stream = as_stream(rng)
    index = index if index is not None else _exact_index(beta)
    stats = RejectionStats()
    rows = 1 if n is None else int(n)

    def run(env):
        out = np.empty((rows, K), dtype=np.int64)
        excluded = np.zeros((rows, beta.P), dtype=bool)
        for i in range(K):
            if i == 0:
                out[:, 0] = _draw(env, rows, stream, stats, strict)
            else:
                out[:, i] = _draw(env, rows, stream, stats, strict, excluded)
            excluded[np.arange(rows), out[:, i]] = True
        return out

    env = _Envelope(beta, h, index.query(h, K_env))
    try:
        out = run(env)
    except EnvelopeViolation:
        stats.fallbacks += 1
        out = run(_Envelope(beta, h, _exact_index(beta).query(h, K_env)))
    return (out[0] if n is None else out), stats
