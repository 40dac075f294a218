"""Stochastic policy-gradient estimators, exhaustive oracles and variance probes.

Every estimator works in the latent space first (the gradient with respect
to h = h_theta(m)) and is then pulled back to the parameters, which is exact
because the scores depend on theta only through h.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import PolicyParams, RngStream, as_stream
from .data import SlateReward, batch_rewards
from .errors import ConfigurationError, InstanceTooLargeError, TrainingDivergedError, UnsupportedDistributionError
from .policy import (
    GaussianNoise,
    LgpPolicy,
    NoiseDistribution,
    PlackettLuce,
    gumbel_noise,
    pl_latent_score,
    pl_log_prob_scores,
    pl_steps,
)
from .core import top_k

PL_PG = "pl-pg"
PL_COV = "pl-cov"
PL_RANK = "pl-rank"
LGP = "lgp"
LRP = "lrp"

# Name -> whether an implementation is available. Training adds the
# index-backed variant "lgp-mips" on top of LGP.
ESTIMATORS = {PL_PG: True, PL_COV: True, PL_RANK: True, LGP: True, LRP: True}

MAX_ENUMERATION = 10**6
# Upper bound on floats materialised at once when batching Gumbel draws.
_CHUNK_FLOATS = 1 << 23


@dataclass(frozen=True, eq=False)
class GradientSample:
    """One stochastic gradient estimate G_theta(x) with its provenance."""

    grad: np.ndarray
    estimator: str
    S: int
    sigma: Optional[float] = None
    latent: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not np.all(np.isfinite(self.grad)):
            raise TrainingDivergedError(f"{self.estimator} produced a non-finite gradient")


def _rewards(reward, slates, hidden):
    r = batch_rewards(reward, slates, hidden)
    if not np.all(np.isfinite(r)):
        raise ValueError("reward returned a non-finite value")
    return r


def _pullback(params: PolicyParams, m, g_h):
    return params.pullback(np.asarray(m, dtype=np.float64), g_h)


def _check_S(S, minimum=1):
    if not isinstance(S, (int, np.integer)) or S < minimum:
        raise ValueError(f"number of samples S must be an integer >= {minimum}, got {S!r}")


# ---------------------------------------------------------------------------
# Latent-space kernels over a (trials, S) grid of slates. Each returns one
# latent gradient per trial.


def _pl_pg_latent(items, f, slates, r, S):
    score = pl_latent_score(items, f, slates)
    return (r[:, None] * score).reshape(-1, S, items.shape[1]).mean(axis=1)


def _pl_cov_latent(items, f, slates, r, S):
    v = items[slates].sum(axis=1).reshape(-1, S, items.shape[1])
    r = r.reshape(-1, S)
    rc = r - r.mean(axis=1, keepdims=True)
    vc = v - v.mean(axis=1, keepdims=True)
    return np.einsum("ts,tsl->tl", rc, vc) / (S - 1)


def _pl_rank_latent(items, f, slates, rel_ids, weights, S):
    """Linear-reward estimator: exact expectation of each position's own term.

    For a reward sum_k w_k rho(a_k), the score-function gradient splits per
    position i into w_i rho(a_i) grad log p_i(a_i) plus the later positions'
    reward times the same score. The first part is replaced by its exact
    conditional expectation over a_i given the prefix, which uses only the
    relevant actions; the second part stays sampled.
    """
    n, K = slates.shape
    L = items.shape[1]
    rho = np.isin(slates, rel_ids).astype(np.float64)
    later = np.cumsum((rho * weights)[:, ::-1], axis=1)[:, ::-1]
    grad = np.zeros((n, L))
    beta_rel = items[rel_ids]
    f_rel = f[rel_ids]
    in_prefix = np.zeros((n, rel_ids.size), dtype=bool)
    for i, c, Z, mean in pl_steps(items, f, slates):
        a = slates[:, i]
        tail = later[:, i + 1] if i + 1 < K else np.zeros(n)
        grad += tail[:, None] * (items[a] - mean)
        if rel_ids.size:
            p_rel = np.exp(f_rel[None, :] - c[:, None]) / Z[:, None]
            p_rel[in_prefix] = 0.0
            grad += weights[i] * (p_rel @ beta_rel - p_rel.sum(axis=1)[:, None] * mean)
            in_prefix |= rel_ids[None, :] == a[:, None]
    return grad.reshape(-1, S, L).mean(axis=1)


def _linear_reward_parts(reward, hidden, K):
    if not getattr(reward, "linear", False):
        raise ConfigurationError("pl-rank needs a reward that is linear over slate positions")
    weights = np.asarray(reward.position_weights(K), dtype=np.float64)
    rel_ids = np.unique(np.asarray(sorted(hidden) if isinstance(hidden, (set, frozenset)) else hidden, dtype=np.int64))
    return rel_ids, weights


def _sample_pl(pl: PlackettLuce, f, n, stream):
    out = np.empty((n, pl.K), dtype=np.int64)
    rows = max(1, _CHUNK_FLOATS // f.size)
    for start in range(0, n, rows):
        stop = min(n, start + rows)
        out[start:stop] = top_k(f + gumbel_noise(stream, (stop - start, f.size)), pl.K)
    return out


def pl_gradient_trials(kind: str, pl: PlackettLuce, m, hidden, reward, S: int, trials: int, rng) -> np.ndarray:
    """``trials`` independent PL-family estimates in one vectorised pass, shape (trials, n_params)."""
    _check_S(S, 2 if kind == PL_COV else 1)
    stream = as_stream(rng)
    f = pl.scores(m)
    items = pl.beta.items
    if kind == PL_RANK:
        rel_ids, weights = _linear_reward_parts(reward, hidden, pl.K)
    slates = _sample_pl(pl, f, trials * S, stream)
    if kind == PL_RANK:
        g_h = _pl_rank_latent(items, f, slates, rel_ids, weights, S)
    else:
        r = _rewards(reward, slates, hidden)
        if kind == PL_PG:
            g_h = _pl_pg_latent(items, f, slates, r, S)
        elif kind == PL_COV:
            g_h = _pl_cov_latent(items, f, slates, r, S)
        else:
            raise ConfigurationError(f"unknown Plackett-Luce estimator {kind!r}")
    return _pullback(pl.params, np.broadcast_to(m, (trials, pl.params.L)), g_h)


def pl_pg_grad(pl: PlackettLuce, x, hidden, reward, S: int, rng) -> GradientSample:
    """Score-function estimate (1/S) sum_s r(A_s) grad log pi(A_s), A_s drawn by the Gumbel trick."""
    _check_S(S)
    f = pl.scores(x)
    slates = _sample_pl(pl, f, S, as_stream(rng))
    r = _rewards(reward, slates, hidden)
    g_h = _pl_pg_latent(pl.beta.items, f, slates, r, S)[0]
    return GradientSample(_pullback(pl.params, x, g_h), PL_PG, S, None, g_h)


def pl_cov_grad(pl: PlackettLuce, x, hidden, reward, S: int, rng) -> GradientSample:
    """Sample covariance (S - 1 normalisation) of r(A) with sum_i grad f(a_i).

    No normaliser is evaluated. This is the gradient exactly when K = 1; for
    longer slates its expectation differs from the gradient (the prefix-
    dependent normaliser terms do not factor out of the expectation).
    """
    _check_S(S, 2)
    f = pl.scores(x)
    slates = _sample_pl(pl, f, S, as_stream(rng))
    r = _rewards(reward, slates, hidden)
    g_h = _pl_cov_latent(pl.beta.items, f, slates, r, S)[0]
    return GradientSample(_pullback(pl.params, x, g_h), PL_COV, S, None, g_h)


def pl_rank_grad(pl: PlackettLuce, x, hidden, reward, S: int, rng) -> GradientSample:
    """Unbiased linear-reward estimator (see ``_pl_rank_latent``).

    ``reward`` must be linear over positions: it exposes ``linear = True``
    and ``position_weights(K)``, with relevance 1 on the hidden set.
    """
    _check_S(S)
    rel_ids, weights = _linear_reward_parts(reward, hidden, pl.K)
    f = pl.scores(x)
    slates = _sample_pl(pl, f, S, as_stream(rng))
    g_h = _pl_rank_latent(pl.beta.items, f, slates, rel_ids, weights, S)[0]
    return GradientSample(_pullback(pl.params, x, g_h), PL_RANK, S, None, g_h)


def lgp_grad_from_draws(params: PolicyParams, x, eps, rewards, sigma: float) -> np.ndarray:
    """(1/(S sigma)) sum_s r_s eps_s, pulled back to the parameters; draws are frozen."""
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    rewards = np.asarray(rewards, dtype=np.float64)
    g_h = (rewards @ eps) / (len(eps) * sigma)
    return _pullback(params, x, g_h)


def lgp_grad(lgp: LgpPolicy, x, hidden, reward, S: int, index, rng) -> GradientSample:
    """Latent Gaussian perturbation estimate with slates of h + sigma * eps_s from ``index``."""
    _check_S(S)
    slates, eps = lgp.sample(x, index, rng, n=S)
    r = _rewards(reward, slates, hidden)
    g_h = (r @ eps) / (S * lgp.sigma)
    return GradientSample(_pullback(lgp.params, x, g_h), LGP, S, lgp.sigma, g_h)


def lrp_grad(params: PolicyParams, x, hidden, reward, noise: NoiseDistribution, S: int, index, rng,
             K: int) -> GradientSample:
    """(1/S) sum_s r(A{h_s}) grad log q(h_s), the score taken with respect to the location."""
    _check_S(S)
    if not noise.has_score:
        raise UnsupportedDistributionError(f"{type(noise).__name__} has no differentiable log-density")
    h = params.embed(x)
    delta = noise.sample(rng, S, params.L)
    slates = index.query_batch(h + delta, K)
    r = _rewards(reward, slates, hidden)
    g_h = (r @ noise.location_score(delta)) / S
    sigma = noise.sigma if isinstance(noise, GaussianNoise) else None
    return GradientSample(_pullback(params, x, g_h), LRP, S, sigma, g_h)


def lgp_gradient_trials(lgp: LgpPolicy, m, hidden, reward, S: int, trials: int, index, rng) -> np.ndarray:
    """``trials`` independent LGP estimates in one pass, shape (trials, n_params)."""
    _check_S(S)
    slates, eps = lgp.sample(m, index, rng, n=trials * S)
    r = _rewards(reward, slates, hidden)
    g_h = (r[:, None] * eps).reshape(trials, S, -1).mean(axis=1) / lgp.sigma
    return _pullback(lgp.params, np.broadcast_to(m, (trials, lgp.params.L)), g_h)


# ---------------------------------------------------------------------------
# Exhaustive oracles.


def enumerate_slates(P: int, K: int) -> np.ndarray:
    n = math.perm(P, K)
    if n > MAX_ENUMERATION:
        raise InstanceTooLargeError(f"{n} ordered slates exceed the enumeration limit {MAX_ENUMERATION}")
    return np.array(list(itertools.permutations(range(P), K)), dtype=np.int64).reshape(n, K)


def _exact_parts(pl: PlackettLuce, x, hidden, reward):
    slates = enumerate_slates(pl.beta.P, pl.K)
    f = pl.scores(x)
    prob = np.exp(pl_log_prob_scores(f, slates))
    r = _rewards(reward, slates, hidden)
    return slates, f, prob, r


def exact_pl_objective(pl: PlackettLuce, x, hidden, reward) -> float:
    """sum over all ordered slates of pi(A) r(A)."""
    _, _, prob, r = _exact_parts(pl, x, hidden, reward)
    return float(math.fsum(prob * r))


def exact_pl_grad(pl: PlackettLuce, x, hidden, reward) -> GradientSample:
    """sum over all ordered slates of pi(A) r(A) grad log pi(A)."""
    slates, f, prob, r = _exact_parts(pl, x, hidden, reward)
    score = pl_latent_score(pl.beta.items, f, slates)
    g_h = (prob * r) @ score
    return GradientSample(_pullback(pl.params, x, g_h), "exact-pl", 0, None, g_h)


def exact_pl_score_mean(pl: PlackettLuce, x) -> np.ndarray:
    """E[grad log pi(A)] by enumeration (zero up to rounding)."""
    slates = enumerate_slates(pl.beta.P, pl.K)
    f = pl.scores(x)
    prob = np.exp(pl_log_prob_scores(f, slates))
    return _pullback(pl.params, x, prob @ pl_latent_score(pl.beta.items, f, slates))


def exact_pl_covariance(pl: PlackettLuce, x, hidden, reward) -> np.ndarray:
    """Cov(r(A), sum_i grad f(a_i)) under the policy: the expectation of ``pl_cov_grad``."""
    slates, f, prob, r = _exact_parts(pl, x, hidden, reward)
    v = pl.beta.items[slates].sum(axis=1)
    Er = prob @ r
    g_h = (prob * r) @ v - Er * (prob @ v)
    return _pullback(pl.params, x, g_h)


# ---------------------------------------------------------------------------
# Learned-embedding block (only for the embedding-fixing study).


def pl_beta_block_trials(items: np.ndarray, h: np.ndarray, m_grad: np.ndarray, hidden, reward, K: int, S: int,
                         trials: int, rng) -> np.ndarray:
    """Score-function estimates of d/d beta for scores f_b = h . beta_b.

    ``m_grad`` is d f_b / d beta_b (equal to h when beta enters linearly).
    Returns (trials, P * L) dense gradients: for each sample,
    r * sum_i (e_{a_i} - p_i) outer m_grad, p_i the conditional softmax at
    position i (zero on the prefix).
    """
    P, L = items.shape
    f = items @ h
    stream = as_stream(rng)
    out = np.empty((trials, P * L))
    for t in range(trials):
        slates = top_k(f + gumbel_noise(stream, (S, P)), K)
        r = _rewards(reward, slates, hidden)
        coef = np.zeros(P)
        for s in range(S):
            c_s = np.zeros(P)
            f_rem = f.copy()
            for a in slates[s]:
                w = np.exp(f_rem - f_rem.max())
                c_s -= w / w.sum()
                c_s[a] += 1.0
                f_rem[a] = -np.inf
            coef += r[s] * c_s
        out[t] = np.outer(coef / S, m_grad).ravel()
    return out


# ---------------------------------------------------------------------------
# Variance instrumentation.


@dataclass(frozen=True)
class Instance:
    """A frozen single-context problem: everything an estimator needs except randomness."""

    beta: object
    params: PolicyParams
    m: np.ndarray
    hidden: np.ndarray
    K: int
    reward: object = field(default_factory=SlateReward)
    sigma: Optional[float] = None
    index: object = None

    def pl(self) -> PlackettLuce:
        return PlackettLuce(self.beta, self.params, self.K)

    def lgp(self) -> LgpPolicy:
        if self.sigma is None:
            raise ConfigurationError("instance has no sigma for latent perturbation estimators")
        return LgpPolicy(self.beta, self.params, self.K, self.sigma)

    def exact_index(self):
        from .mips import ExactIndex

        return self.index if self.index is not None else ExactIndex(self.beta)


def gradient_trials(name: str, inst: Instance, S: int, trials: int, rng) -> np.ndarray:
    """Independent estimates of one estimator on a frozen instance, shape (trials, n_params)."""
    if name in (PL_PG, PL_COV, PL_RANK):
        return pl_gradient_trials(name, inst.pl(), inst.m, inst.hidden, inst.reward, S, trials, rng)
    if name in (LGP, LRP, "lgp-mips"):
        return lgp_gradient_trials(inst.lgp(), inst.m, inst.hidden, inst.reward, S, trials, inst.exact_index(), rng)
    if name == "exact-pl":
        g = exact_pl_grad(inst.pl(), inst.m, inst.hidden, inst.reward).grad
        return np.broadcast_to(g, (trials, g.size)).copy()
    raise ConfigurationError(f"unknown estimator {name!r}; available: {sorted(ESTIMATORS)}")


def variance_of(samples: np.ndarray) -> float:
    """Empirical E||G - mean G||^2 over rows (divisor n - 1)."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    # shifting by the first row keeps identical rows at exactly zero variance
    shifted = samples - samples[0]
    dev = shifted - shifted.mean(axis=0)
    return float(np.einsum("ij,ij->", dev, dev) / (len(samples) - 1))


def estimate_variance(estimator, instance: Optional[Instance] = None, trials: int = 1000, rng=None, S: int = 1,
                      chunk: int = 10_000) -> float:
    """Empirical gradient variance over independent trials on one frozen instance.

    ``estimator`` is an estimator name (evaluated on ``instance``) or any
    callable ``rng -> GradientSample | array`` run once per trial on child
    streams.
    """
    if trials < 100:
        raise ValueError(f"variance estimates need at least 100 trials, got {trials}")
    stream = as_stream(rng)
    if callable(estimator):
        rows = []
        for child in stream.spawn(trials):
            g = estimator(child)
            rows.append(g.grad if isinstance(g, GradientSample) else np.asarray(g, dtype=np.float64))
        return variance_of(np.stack(rows))
    if instance is None:
        raise ValueError("an instance is required when the estimator is given by name")
    parts = []
    children = stream.spawn((trials + chunk - 1) // chunk)
    for j, child in enumerate(children):
        n = min(chunk, trials - j * chunk)
        parts.append(gradient_trials(estimator, instance, S, n, child))
    return variance_of(np.concatenate(parts))


def mean_and_stderr(samples: np.ndarray):
    """Per-coordinate mean and standard error of the mean."""
    samples = np.asarray(samples, dtype=np.float64)
    return samples.mean(axis=0), samples.std(axis=0, ddof=1) / np.sqrt(len(samples))


def within_combined_se(mean, se, target, n_se: float = 3.0) -> bool:
    """||mean - target|| <= n_se * sqrt(sum se^2)."""
    return bool(np.linalg.norm(np.asarray(mean) - np.asarray(target)) <= n_se * np.sqrt(np.sum(np.square(se))))
