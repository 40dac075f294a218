import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from slate_forge import EmbeddingMatrix, LinearParams  # noqa: E402
from slate_forge.data import SessionSplit, SlateReward  # noqa: E402
from slate_forge.gradients import Instance  # noqa: E402
from slate_forge.mips import ExactIndex  # noqa: E402


def random_beta(P, L, seed):
    return EmbeddingMatrix.from_items(np.random.default_rng(seed).normal(size=(P, L)))


def tiny_instance(P, K, L, seed, hidden=None, sigma=None, theta_scale=1.0):
    """Random tiny problem: Gaussian embeddings, Gaussian theta, one context."""
    rng = np.random.default_rng(seed)
    beta = EmbeddingMatrix.from_items(rng.normal(size=(P, L)))
    theta = theta_scale * rng.normal(size=(L, L))
    m = rng.normal(size=L)
    if hidden is None:
        hidden = np.sort(rng.choice(P, size=max(1, P // 2), replace=False))
    return Instance(beta, LinearParams(theta), m, np.asarray(hidden), K, SlateReward(), sigma, ExactIndex(beta))


def separable_split(P=50, L=8, C=8, U=600, seed=0):
    """Clustered embeddings where each user's hidden items are the next cluster over.

    A user of cluster c observes three items of c and wants every item of
    cluster c + 1, so the best linear map rotates cluster directions while
    the identity map ranks the wrong cluster first.
    """
    rng = np.random.default_rng(seed)
    cl = np.arange(P) % C
    items = 2.0 * np.eye(L)[cl] + 0.3 * rng.normal(size=(P, L))
    perm = np.roll(np.arange(C), 1)
    observed, hidden = [], []
    for _ in range(U):
        c = rng.integers(C)
        own = np.flatnonzero(cl == c)
        observed.append(np.sort(rng.choice(own, size=3, replace=False)))
        hidden.append(np.flatnonzero(cl == perm[c]))
    split = SessionSplit(np.arange(U), observed, hidden, 0.5, seed, P)
    return EmbeddingMatrix.from_items(items), split


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_beta():
    return random_beta(1000, 16, 0)


# one line per acceptance criterion, collected for the end-of-run summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
