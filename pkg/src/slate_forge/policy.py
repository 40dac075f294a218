"""Plackett-Luce and latent-perturbation slate policies: probabilities and samplers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import EmbeddingMatrix, PolicyParams, _check_k, as_stream, top_k
from .errors import ConfigurationError, UnsupportedDistributionError

# Relative remaining mass below which the running normalizer is recomputed
# from scratch instead of by subtraction.
_CANCEL = 1e-8
_U_MIN = 1e-300


def _check_slates(slates, P, K=None):
    slates = np.asarray(slates, dtype=np.int64)
    if slates.ndim not in (1, 2):
        raise ValueError("a slate must be 1-D (or a 2-D batch of slates)")
    batch = np.atleast_2d(slates)
    if K is not None and batch.shape[1] != K:
        raise ValueError(f"slate length {batch.shape[1]} does not match K={K}")
    if batch.size and (batch.min() < 0 or batch.max() >= P):
        raise ValueError("slate contains an out-of-range action id")
    srt = np.sort(batch, axis=1)
    if np.any(srt[:, 1:] == srt[:, :-1]):
        raise ValueError("slate contains duplicate actions")
    return slates


def gumbel_noise(rng, size) -> np.ndarray:
    """Standard Gumbel draws -log(-log u), u clamped to [1e-300, 1)."""
    u = np.maximum(as_stream(rng).uniform(size), _U_MIN)
    return -np.log(-np.log(u))


def pl_log_prob_scores(scores: np.ndarray, slates: np.ndarray) -> np.ndarray:
    """log PL probability of each slate given the full score vector.

    The running normalizer Z_i = Z_{i-1} - exp(f_{a_i}) is tracked relative
    to a max-shift; when subtraction cancels most of the remaining mass the
    normalizer is recomputed over the remaining actions with a fresh shift.
    """
    f = np.asarray(scores, dtype=np.float64)
    slates = np.atleast_2d(np.asarray(slates, dtype=np.int64))
    n, K = slates.shape
    c = np.full(n, f.max())
    w = np.exp(f - f.max())
    Z = np.full(n, w.sum())
    out = np.zeros(n)
    taken = None
    for i in range(K):
        a = slates[:, i]
        out += f[a] - c - np.log(Z)
        if i == K - 1:
            break
        rem = Z - np.exp(f[a] - c)
        bad = rem <= _CANCEL * Z
        if bad.any():
            if taken is None:
                taken = np.zeros((n, f.size), dtype=bool)
                taken[np.arange(n)[:, None], slates[:, :i]] = True
            rows = np.flatnonzero(bad)
            mask = taken[rows].copy()
            mask[np.arange(rows.size), a[rows]] = True
            f_rem = np.where(mask, -np.inf, f)
            c_new = f_rem.max(axis=1)
            c[rows] = c_new
            rem[rows] = np.exp(f_rem - c_new[:, None]).sum(axis=1)
        if taken is not None:
            taken[np.arange(n), a] = True
        Z = rem
    return out


def pl_steps(items: np.ndarray, scores: np.ndarray, slates: np.ndarray):
    """Per-position conditional softmax statistics along each slate.

    Yields (i, c, Z, mean) for positions i = 0..K-1, where the remaining
    actions have weights exp(f - c) summing to Z and ``mean`` is their
    softmax-weighted mean embedding (arrays have one row per slate). The
    weighted sums are updated by subtraction and rebuilt with a fresh shift
    when cancellation would lose precision.
    """
    f = np.asarray(scores, dtype=np.float64)
    slates = np.atleast_2d(np.asarray(slates, dtype=np.int64))
    n, K = slates.shape
    c0 = f.max()
    w = np.exp(f - c0)
    Z = np.full(n, w.sum())
    S = np.broadcast_to(w @ items, (n, items.shape[1])).copy()
    c = np.full(n, c0)
    taken = None
    for i in range(K):
        yield i, c, Z, S / Z[:, None]
        if i == K - 1:
            return
        a = slates[:, i]
        wa = np.exp(f[a] - c)
        Z_new = Z - wa
        S = S - wa[:, None] * items[a]
        bad = Z_new <= _CANCEL * Z
        if bad.any():
            if taken is None:
                taken = np.zeros((n, f.size), dtype=bool)
                taken[np.arange(n)[:, None], slates[:, :i]] = True
            rows = np.flatnonzero(bad)
            mask = taken[rows].copy()
            mask[np.arange(rows.size), a[rows]] = True
            f_rem = np.where(mask, -np.inf, f)
            c_new = f_rem.max(axis=1)
            w_rem = np.exp(f_rem - c_new[:, None])
            c = c.copy()
            c[rows] = c_new
            Z_new[rows] = w_rem.sum(axis=1)
            S[rows] = w_rem @ items
        if taken is not None:
            taken[np.arange(n), a] = True
        Z = Z_new


def pl_latent_score(items: np.ndarray, scores: np.ndarray, slates: np.ndarray) -> np.ndarray:
    """Gradient of log PL probability with respect to the latent query h.

    With f_a = h . beta_a this is sum_i (beta_{a_i} - mean of beta under the
    conditional softmax at step i). Rows of ``slates`` give rows of output.
    """
    slates = np.atleast_2d(np.asarray(slates, dtype=np.int64))
    grad = items[slates].sum(axis=1)
    for _, _, _, mean in pl_steps(items, scores, slates):
        grad -= mean
    return grad


class PlackettLuce:
    """Plackett-Luce slate policy over scores f(a, x) = h_theta(m) . beta_a."""

    def __init__(self, beta: EmbeddingMatrix, params: PolicyParams, K: int):
        _check_k(K, beta.P)
        if params.L != beta.L:
            raise ConfigurationError(f"parameters have L={params.L}, embeddings have L={beta.L}")
        self.beta = beta
        self.params = params
        self.K = int(K)

    def with_params(self, params: PolicyParams) -> "PlackettLuce":
        return PlackettLuce(self.beta, params, self.K)

    def latent(self, m) -> np.ndarray:
        return self.params.embed(m)

    def scores(self, m) -> np.ndarray:
        return self.beta.scores(self.params.embed(m))

    def log_prob(self, m, slates) -> np.ndarray | float:
        slates = _check_slates(slates, self.beta.P, self.K)
        out = pl_log_prob_scores(self.scores(m), slates)
        return float(out[0]) if slates.ndim == 1 else out

    def sample_sequential(self, m, rng, n: Optional[int] = None) -> np.ndarray:
        """K categorical draws without replacement, probabilities proportional to exp(f).

        Each step re-shifts by the largest remaining score, so the draw stays
        exact even when earlier picks held nearly all of the mass.
        """
        f = self.scores(m)
        stream = as_stream(rng)
        rows = 1 if n is None else int(n)
        out = np.empty((rows, self.K), dtype=np.int64)
        f_rem = np.broadcast_to(f, (rows, f.size)).copy()
        idx = np.arange(rows)
        for i in range(self.K):
            w = np.exp(f_rem - f_rem.max(axis=1, keepdims=True))
            cdf = np.cumsum(w, axis=1)
            target = stream.uniform(rows) * cdf[:, -1]
            # first position whose cumulative mass exceeds the target; it has w > 0
            a = (cdf <= target[:, None]).sum(axis=1)
            out[:, i] = a
            f_rem[idx, a] = -np.inf
        return out[0] if n is None else out

    def sample_gumbel(self, m, rng, n: Optional[int] = None, gumbel: Optional[np.ndarray] = None) -> np.ndarray:
        """Top-K of f + gamma with i.i.d. standard Gumbel gamma.

        ``gumbel`` overrides the noise (shape (P,) or (n, P)); passing zeros
        recovers the deterministic decision.
        """
        f = self.scores(m)
        rows = 1 if n is None else int(n)
        g = gumbel_noise(rng, (rows, f.size)) if gumbel is None else np.broadcast_to(gumbel, (rows, f.size))
        out = top_k(f + g, self.K)
        return out[0] if n is None else out

    def grad_log_prob(self, m, slates) -> np.ndarray:
        """Flat parameter gradient of log pi(slate) (one row per slate for batches)."""
        slates = _check_slates(slates, self.beta.P, self.K)
        g_h = pl_latent_score(self.beta.items, self.scores(m), slates)
        if slates.ndim == 1:
            return self.params.pullback(m, g_h[0])
        m_b = np.broadcast_to(m, (len(g_h), self.params.L))
        return self.params.pullback(m_b, g_h)


def pl_log_prob(pl: PlackettLuce, x_mean, slate) -> float:
    return pl.log_prob(x_mean, slate)


def pl_sample_sequential(pl: PlackettLuce, x_mean, rng) -> np.ndarray:
    return pl.sample_sequential(x_mean, rng)


def pl_sample_gumbel(pl: PlackettLuce, x_mean, rng) -> np.ndarray:
    return pl.sample_gumbel(x_mean, rng)


class NoiseDistribution:
    """Latent perturbation law Q for h = h_theta(x) + eps.

    ``location_score(eps)`` must return the gradient of log q(h) with respect
    to the location h_theta(x), evaluated at h = h_theta(x) + eps. Laws
    without a differentiable log-density (point masses, uniform boxes) only
    support sampling.
    """

    def sample(self, rng, n: int, L: int) -> np.ndarray:
        raise NotImplementedError

    def location_score(self, eps: np.ndarray) -> np.ndarray:
        raise UnsupportedDistributionError(f"{type(self).__name__} has no differentiable log-density")

    @property
    def has_score(self) -> bool:
        return type(self).location_score is not NoiseDistribution.location_score


@dataclass(frozen=True)
class GaussianNoise(NoiseDistribution):
    """Isotropic N(0, sigma^2 I); draws returned already scaled by sigma."""

    sigma: float

    def __post_init__(self):
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")

    def sample(self, rng, n, L):
        return self.sigma * as_stream(rng).normal((n, L))

    def location_score(self, eps):
        return np.asarray(eps, dtype=np.float64) / self.sigma**2


@dataclass(frozen=True)
class PointMass(NoiseDistribution):
    """Degenerate zero perturbation (sampling only)."""

    def sample(self, rng, n, L):
        return np.zeros((n, L))


@dataclass(frozen=True)
class UniformCube(NoiseDistribution):
    """Uniform on [-half_width, half_width]^L (sampling only: flat density)."""

    half_width: float

    def sample(self, rng, n, L):
        return self.half_width * (2.0 * as_stream(rng).uniform((n, L)) - 1.0)


def sigma_default(L: int) -> float:
    """Latent noise scale 1/L."""
    return 1.0 / L


def sigma_norm_heuristic(beta: EmbeddingMatrix) -> float:
    """1 / (mean action-embedding norm): per-action score noise near unit scale."""
    B = beta.mean_norm()
    if B <= 0:
        raise ConfigurationError("all action embeddings are zero")
    return 1.0 / B


def resolve_sigma(sigma, beta: EmbeddingMatrix) -> float:
    """Accept a number, ``"auto"`` (1/L) or ``"norm"`` (1/B)."""
    if isinstance(sigma, str):
        key = sigma.strip().lower()
        if key == "auto":
            return sigma_default(beta.L)
        if key == "norm":
            return sigma_norm_heuristic(beta)
        try:
            sigma = float(key)
        except ValueError:
            raise ConfigurationError(f"sigma must be a number, 'auto' or 'norm', got {sigma!r}") from None
    sigma = float(sigma)
    if not (sigma > 0 and np.isfinite(sigma)):
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    return sigma


class LrpPolicy:
    """Deterministic top-K of a randomly perturbed latent query."""

    def __init__(self, beta: EmbeddingMatrix, params: PolicyParams, K: int, noise: NoiseDistribution):
        _check_k(K, beta.P)
        if params.L != beta.L:
            raise ConfigurationError(f"parameters have L={params.L}, embeddings have L={beta.L}")
        self.beta = beta
        self.params = params
        self.K = int(K)
        self.noise = noise

    def latent(self, m) -> np.ndarray:
        return self.params.embed(m)

    def sample(self, m, index, rng, n: Optional[int] = None):
        """Returns (slates, perturbations); unbatched when ``n`` is None."""
        h = self.params.embed(m)
        rows = 1 if n is None else int(n)
        eps = self.noise.sample(rng, rows, self.beta.L)
        slates = index.query_batch(h + eps, self.K)
        if n is None:
            return slates[0], eps[0]
        return slates, eps


class LgpPolicy(LrpPolicy):
    """Latent Gaussian perturbation: top-K of h_theta(x) + sigma * eps, eps ~ N(0, I)."""

    def __init__(self, beta: EmbeddingMatrix, params: PolicyParams, K: int, sigma: float):
        sigma = float(sigma)
        if not (sigma > 0 and np.isfinite(sigma)):
            raise ConfigurationError(f"sigma must be positive, got {sigma}")
        super().__init__(beta, params, K, GaussianNoise(sigma))
        self.sigma = sigma

    def with_params(self, params) -> "LgpPolicy":
        return LgpPolicy(self.beta, params, self.K, self.sigma)

    def sample(self, m, index, rng, n: Optional[int] = None):
        """Returns (slates, standard normal eps) so gradients can reuse the raw draws."""
        h = self.params.embed(m)
        rows = 1 if n is None else int(n)
        eps = as_stream(rng).normal((rows, self.beta.L))
        slates = index.query_batch(h + self.sigma * eps, self.K)
        if n is None:
            return slates[0], eps[0]
        return slates, eps


def lgp_sample(lgp: LgpPolicy, x_mean, index, rng):
    return lgp.sample(x_mean, index, rng)


def lrp_sample(params: PolicyParams, x_mean, noise: NoiseDistribution, index, rng, K: int):
    return LrpPolicy(index.beta, params, K, noise).sample(x_mean, index, rng)
