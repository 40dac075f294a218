"""Desk-scale benchmark studies: budgets, variance versus K, sigma scaling, fixed embeddings, complexity."""

from __future__ import annotations

import csv
import json
import logging
import platform
import time
import tracemalloc
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import EmbeddingMatrix, LinearParams, RngStream, as_stream, mean_embeddings, top_k
from .data import (
    SessionSplit,
    SlateReward,
    compute_svd_embeddings,
    generate_synthetic,
    holdout_users,
    split_sessions,
    synthetic_embeddings,
)
from .errors import ConfigurationError
from .gradients import ESTIMATORS, Instance, estimate_variance, gradient_trials, variance_of
from .mips import ApproxIndex, ExactIndex, build_approx
from .policy import LgpPolicy, PlackettLuce, gumbel_noise, pl_latent_score, sigma_norm_heuristic
from .train import AdamState, TrainConfig, adam_step, evaluate_deterministic, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scenario:
    """A synthetic stand-in for one dataset scale."""

    name: str
    P: int
    L: int
    U: int = 0
    density: float = 0.0
    L_true: int = 16
    synthetic_only: bool = False
    items_per_user: int = 40


SCENARIOS = {
    "small": Scenario("small", P=1_000, L=16, U=2_000, density=0.01),
    "medium": Scenario("medium", P=100_000, L=32, U=10_000, density=0.0024),
    "large": Scenario("large", P=1_000_000, L=32, synthetic_only=True),
}


def get_scenario(name_or_scenario) -> Scenario:
    if isinstance(name_or_scenario, Scenario):
        return name_or_scenario
    try:
        return SCENARIOS[name_or_scenario]
    except KeyError:
        raise ConfigurationError(f"unknown scenario {name_or_scenario!r}; choose from {sorted(SCENARIOS)}") from None


@dataclass
class ScenarioData:
    scenario: Scenario
    seed: int
    beta: EmbeddingMatrix
    train: SessionSplit
    val: SessionSplit
    index: Optional[ApproxIndex] = None
    build_seconds: dict = field(default_factory=dict)

    def ensure_index(self, max_degree=16, beam=100) -> ApproxIndex:
        if self.index is None:
            t0 = time.perf_counter()
            self.index = build_approx(self.beta, max_degree, beam, RngStream(self.seed))
            self.build_seconds["index"] = time.perf_counter() - t0
        return self.index


def synthetic_sessions(P: int, n_users: int, items_per_user: int, seed: int, beta: Optional[EmbeddingMatrix] = None,
                       ratio: float = 0.5) -> SessionSplit:
    """Users with ``items_per_user`` items each, split into observed and hidden halves.

    Without embeddings the items are uniform; with ``beta`` each user's items
    are the nearest (by inner product) actions to a random action's embedding
    plus noise, so users have coherent tastes.
    """
    gen = RngStream(seed).generator
    observed, hidden = [], []
    n_obs = max(1, int(round(ratio * items_per_user)))
    for _ in range(n_users):
        if beta is None:
            items = gen.choice(P, size=items_per_user, replace=False)
        else:
            anchor = beta.items[gen.integers(P)] + 0.5 * gen.standard_normal(beta.L) * beta.items.std(axis=0)
            pool = gen.choice(P, size=min(P, 50 * items_per_user), replace=False)
            items = pool[top_k(beta.items[pool] @ anchor, items_per_user)]
        perm = gen.permutation(items)
        observed.append(np.sort(perm[:n_obs]))
        hidden.append(np.sort(perm[n_obs:]))
    return SessionSplit(np.arange(n_users), observed, hidden, ratio, seed, P)


def build_scenario(name_or_scenario, seed: int = 0, *, with_index: bool = False) -> ScenarioData:
    sc = get_scenario(name_or_scenario)
    timings = {}
    t0 = time.perf_counter()
    if sc.synthetic_only:
        beta = synthetic_embeddings(sc.P, sc.L, seed)
        timings["embeddings"] = time.perf_counter() - t0
        sessions = synthetic_sessions(sc.P, 2_000, sc.items_per_user, seed + 1, beta)
        train_split, val_split = holdout_users(sessions, 0.1, seed)
    else:
        ds = generate_synthetic(sc.U, sc.P, sc.L_true, sc.density, seed)
        timings["generate"] = time.perf_counter() - t0
        split = split_sessions(ds, 0.5, seed)
        train_split, val_split = holdout_users(split, 0.1, seed)
        t1 = time.perf_counter()
        beta = compute_svd_embeddings(train_split, sc.L, seed=seed)
        timings["svd"] = time.perf_counter() - t1
    data = ScenarioData(sc, seed, beta, train_split, val_split, build_seconds=timings)
    if with_index:
        data.ensure_index()
    return data


def fingerprint(data: ScenarioData, **extra) -> dict:
    fp = {
        "scenario": data.scenario.name,
        "P": data.beta.P,
        "L": data.beta.L,
        "n_train_users": len(data.train),
        "n_val_users": len(data.val),
        "data_seed": data.seed,
        "hardware": f"{platform.machine()} {platform.processor() or platform.system()}",
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    fp.update(extra)
    return fp


@dataclass
class BenchReport:
    """Long-format curves plus per-method aggregates over seeds."""

    scenario: str
    study: str
    x_label: str
    y_label: str
    fingerprint: dict
    rows: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def add(self, method, seed, x, y):
        self.rows.append({"scenario": self.scenario, "method": method, "seed": seed, "x": float(x), "y": float(y)})

    def methods(self):
        seen = []
        for r in self.rows:
            if r["method"] not in seen:
                seen.append(r["method"])
        return seen

    def curve(self, method):
        """(x grid, mean over seeds, standard error over seeds) for one method."""
        rows = [r for r in self.rows if r["method"] == method]
        xs = sorted({r["x"] for r in rows})
        seeds = sorted({r["seed"] for r in rows})
        table = np.full((len(seeds), len(xs)), np.nan)
        for r in rows:
            table[seeds.index(r["seed"]), xs.index(r["x"])] = r["y"]
        mean = np.nanmean(table, axis=0)
        n = np.sum(~np.isnan(table), axis=0)
        se = np.where(n > 1, np.nanstd(table, axis=0, ddof=1) / np.sqrt(np.maximum(n, 1)), 0.0) if len(seeds) > 1 \
            else np.zeros(len(xs))
        return np.array(xs), mean, se

    def final(self, method):
        _, mean, se = self.curve(method)
        return float(mean[-1]), float(se[-1])

    def summary(self) -> dict:
        out = {}
        for m in self.methods():
            xs, mean, se = self.curve(m)
            out[m] = {"x": xs.tolist(), "mean": mean.tolist(), "stderr": se.tolist()}
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["scenario", "method", "seed", "x", "y"], lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows)

    def to_json(self, path=None) -> str:
        payload = {
            "scenario": self.scenario,
            "study": self.study,
            "x_label": self.x_label,
            "y_label": self.y_label,
            "fingerprint": self.fingerprint,
            "summary": self.summary(),
            "extras": self.extras,
            "rows": self.rows,
        }
        text = json.dumps(payload, indent=2, default=_json_default)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _method_config(method, base: TrainConfig) -> TrainConfig:
    if isinstance(method, TrainConfig):
        return method
    return replace(base, estimator=method)


def _method_name(method) -> str:
    return method.estimator if isinstance(method, TrainConfig) else str(method)


def _available(method) -> bool:
    name = _method_name(method)
    base = "lgp" if name == "lgp-mips" else name
    return ESTIMATORS.get(base, False)


def bench_time_budget(data: ScenarioData, methods: Sequence, budget_seconds: float, seeds: Sequence[int], *,
                      base: Optional[TrainConfig] = None, labels: Optional[Sequence[str]] = None) -> BenchReport:
    """Validation reward at 10 equal slices of a shared training-time budget."""
    if len(methods) < 2:
        raise ConfigurationError("a comparison needs at least two methods")
    base = base or TrainConfig(seconds=budget_seconds, train_eval_users=0)
    base = replace(base, seconds=budget_seconds, iterations=None)
    labels = list(labels) if labels is not None else [_method_name(m) for m in methods]
    report = BenchReport(data.scenario.name, "time_budget", "seconds", "val_reward",
                         fingerprint(data, K=base.K, S=base.S, budget_seconds=budget_seconds, seeds=list(seeds)))
    iters = {}
    for method, label in zip(methods, labels):
        if not _available(method):
            report.extras.setdefault("unavailable", []).append(label)
            continue
        cfg = replace(_method_config(method, base), seconds=budget_seconds, iterations=None)
        index = data.ensure_index() if cfg.estimator == "lgp-mips" else None
        for seed in seeds:
            _, log = train(replace(cfg, seed=int(seed)), data.train, data.beta, index, int(seed), val_split=data.val)
            for j, rec in enumerate(log.records):
                report.add(label, seed, j * budget_seconds / cfg.eval_intervals, rec["val_reward"])
            iters.setdefault(label, []).append(log.records[-1]["iteration"])
    report.extras["iterations"] = iters
    return report


def bench_iteration_budget(data: ScenarioData, methods: Sequence, T: int, seeds: Sequence[int], *,
                           base: Optional[TrainConfig] = None, labels: Optional[Sequence[str]] = None) -> BenchReport:
    """Training reward at 10 equal slices of a shared iteration budget."""
    base = base or TrainConfig(iterations=T)
    base = replace(base, iterations=int(T), seconds=None)
    labels = list(labels) if labels is not None else [_method_name(m) for m in methods]
    report = BenchReport(data.scenario.name, "iteration_budget", "iteration", "train_reward",
                         fingerprint(data, K=base.K, S=base.S, iterations=T, seeds=list(seeds)))
    for method, label in zip(methods, labels):
        if not _available(method):
            report.extras.setdefault("unavailable", []).append(label)
            continue
        cfg = replace(_method_config(method, base), iterations=int(T), seconds=None)
        index = data.ensure_index() if cfg.estimator == "lgp-mips" else None
        for seed in seeds:
            _, log = train(replace(cfg, seed=int(seed)), data.train, data.beta, index, int(seed), val_split=data.val)
            for j, rec in enumerate(log.records):
                report.add(label, seed, j * T / cfg.eval_intervals, rec["train_reward"])
    return report


def iterations_to_fraction(report: BenchReport, method: str, fraction: float = 0.9) -> float:
    """First x at which the mean curve reaches ``fraction`` of its final gain over the start."""
    xs, mean, _ = report.curve(method)
    target = mean[0] + fraction * (mean[-1] - mean[0])
    hit = np.flatnonzero(mean >= target - 1e-12)
    return float(xs[hit[0]]) if hit.size else float("inf")


def frozen_instance(data: ScenarioData, K: int, user: int = 0, params=None, sigma=None) -> Instance:
    """One training context with fixed parameters (default 0.1 * identity) and sigma = 1/B."""
    params = params if params is not None else LinearParams.identity(data.beta.L, 0.1)
    m = mean_embeddings(data.beta, [data.train.observed[user]])[0]
    sigma = sigma if sigma is not None else sigma_norm_heuristic(data.beta)
    return Instance(data.beta, params, m, data.train.hidden[user], K, SlateReward(), sigma, ExactIndex(data.beta))


@dataclass
class ContextPool:
    """Frozen parameters over a scenario's training contexts.

    Each variance trial draws a context uniformly and then one gradient
    estimate for it, so the variance covers both sources of noise a training
    step sees. Defaults: 0.1 * identity parameters and sigma = 1/B.
    """

    data: ScenarioData
    K: int
    params: Optional[object] = None
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.params is None:
            self.params = LinearParams.identity(self.data.beta.L, 0.1)
        if self.sigma is None:
            self.sigma = sigma_norm_heuristic(self.data.beta)
        self._M = mean_embeddings(self.data.beta, self.data.train.observed)
        self._exact = ExactIndex(self.data.beta)

    def with_k(self, K: int) -> "ContextPool":
        return replace(self, K=int(K))

    def with_sigma(self, sigma: float) -> "ContextPool":
        return replace(self, sigma=float(sigma))

    def instance(self, user: int) -> Instance:
        return Instance(self.data.beta, self.params, self._M[user], self.data.train.hidden[user], self.K,
                        SlateReward(), self.sigma, self._exact)

    def trials(self, name: str, S: int, n: int, rng) -> np.ndarray:
        stream = as_stream(rng)
        users = stream.integers(0, len(self.data.train), size=n)
        uniq, counts = np.unique(users, return_counts=True)
        rows = np.empty((n, self.params.size))
        # rows are grouped by context; the variance does not depend on row order
        pos = 0
        for u, c, child in zip(uniq, counts, stream.spawn(uniq.size)):
            rows[pos:pos + c] = gradient_trials(name, self.instance(int(u)), S, int(c), child)
            pos += c
        return rows

    def variance(self, name: str, trials: int, rng, S: int = 1) -> float:
        if trials < 100:
            raise ValueError(f"variance estimates need at least 100 trials, got {trials}")
        return variance_of(self.trials(name, S, trials, rng))


def _variance(source, method, trials, seed, S):
    if isinstance(source, ContextPool):
        return source.variance(method, trials, RngStream(seed), S)
    return estimate_variance(method, source, trials, RngStream(seed), S=S)


def _source_for(source, K=None, sigma=None):
    if isinstance(source, ContextPool):
        out = source if K is None else source.with_k(K)
        return out if sigma is None else out.with_sigma(sigma)
    if isinstance(source, Instance):
        out = source if K is None else replace(source, K=int(K))
        return out if sigma is None else replace(out, sigma=float(sigma))
    if callable(source):
        return source(K)
    raise TypeError(f"expected a ContextPool, an Instance or a callable K -> Instance, got {type(source).__name__}")


def bench_variance_vs_k(source, K_list: Sequence[int], trials: int, seeds: Sequence[int] = (0,),
                        methods: Sequence[str] = ("pl-pg", "lgp"), S: int = 1, scenario: str = "custom") -> BenchReport:
    """Gradient variance of each method as the slate size grows.

    ``source`` is a ContextPool (variance over contexts and samples), a single
    Instance, or a callable mapping K to an Instance. ``y`` holds log10
    variance; the raw per-seed variances are in ``extras["variance"]``.
    """
    first = _source_for(source, K_list[0])
    beta = first.data.beta if isinstance(first, ContextPool) else first.beta
    report = BenchReport(scenario, "variance_vs_k", "K", "log10_variance",
                         {"P": beta.P, "L": beta.L, "sigma": first.sigma, "S": S, "trials": trials,
                          "seeds": list(seeds), "pooled_contexts": isinstance(first, ContextPool),
                          "hardware": platform.machine()})
    raw = {}
    for method in methods:
        if method not in ESTIMATORS and method != "exact-pl":
            report.extras.setdefault("unavailable", []).append(method)
            continue
        for K in K_list:
            src = _source_for(source, K)
            for seed in seeds:
                v = _variance(src, method, trials, seed, S)
                raw.setdefault(method, {}).setdefault(int(K), []).append(v)
                report.add(method, seed, K, np.log10(v) if v > 0 else -np.inf)
    report.extras["variance"] = raw
    return report


def variance_ratio(report: BenchReport, method: str, k_hi: int, k_lo: int) -> float:
    raw = report.extras["variance"][method]
    return float(np.mean(raw[k_hi]) / np.mean(raw[k_lo]))


def bench_sigma_scaling(source, sigmas: Sequence[float], trials: int, seeds: Sequence[int] = (0,),
                        S: int = 1) -> BenchReport:
    """LGP gradient variance against sigma; the log-log slope is stored in extras."""
    beta = source.data.beta if isinstance(source, ContextPool) else source.beta
    report = BenchReport("custom", "sigma_scaling", "sigma", "log10_variance",
                         {"P": beta.P, "L": beta.L, "K": source.K, "trials": trials, "seeds": list(seeds),
                          "pooled_contexts": isinstance(source, ContextPool)})
    means = []
    for sigma in sigmas:
        src = _source_for(source, sigma=sigma)
        vs = [_variance(src, "lgp", trials, seed, S) for seed in seeds]
        for seed, v in zip(seeds, vs):
            report.add("lgp", seed, sigma, np.log10(v))
        means.append(np.mean(vs))
    slope, _ = np.polyfit(np.log(sigmas), np.log(means), 1)
    report.extras.update({"slope": float(slope), "variance": [float(v) for v in means]})
    return report


# ---------------------------------------------------------------------------
# Embedding-fixing study. Three Plackett-Luce parametrisations share the
# sampling and score-function code:
#   learn-theta  f(a, x) = (M(X) theta) . beta_a with beta fixed
#   learn-beta   f(a, x) = M(X) . beta_a with beta trained (M(X) depends on beta)
#   joint        f(a, x) = (M(X) theta) . beta_a with both trained


def _observed_csr(split: SessionSplit, P: int):
    import scipy.sparse as sp

    lengths = np.array([len(o) for o in split.observed], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(lengths)])
    indices = np.concatenate([np.asarray(o, dtype=np.int64) for o in split.observed])
    return sp.csr_matrix((np.repeat(1.0 / lengths, lengths), indices, indptr), shape=(len(lengths), P))


def _pl_score_coefficients(F: np.ndarray, G: np.ndarray, K: int):
    """Sampled slates and d log pi / d f for each row of scores F given Gumbel draws G."""
    slates = top_k(F + G, K)
    rows = np.arange(F.shape[0])
    coef = np.zeros_like(F)
    remaining = F.copy()
    for i in range(K):
        w = np.exp(remaining - remaining.max(axis=1, keepdims=True))
        coef -= w / w.sum(axis=1, keepdims=True)
        coef[rows, slates[:, i]] += 1.0
        remaining[rows, slates[:, i]] = -np.inf
    return slates, coef


class _FixedBetaModel:
    """Per-context PL-PG gradients for one parametrisation, vectorised over a batch."""

    def __init__(self, kind: str, beta: EmbeddingMatrix, split: SessionSplit, K: int, theta_scale: float = 1.0):
        if kind not in ("learn-theta", "learn-beta", "joint"):
            raise ConfigurationError(f"unknown parametrisation {kind!r}")
        self.name = kind
        self.K = K
        self.split = split
        self.A = _observed_csr(split, beta.P)
        self.Y = split.hidden_matrix().astype(bool)
        self.items = beta.items.copy()
        self.L = beta.L
        self.theta = np.eye(beta.L) * theta_scale if kind != "learn-beta" else None
        self.M = np.asarray(self.A @ self.items)  # refreshed whenever beta moves

    def vector(self):
        if self.name == "learn-theta":
            return self.theta.ravel().copy()
        if self.name == "learn-beta":
            return self.items.ravel().copy()
        return np.concatenate([self.theta.ravel(), self.items.ravel()])

    def set_vector(self, v):
        n_t = self.L * self.L
        if self.name == "learn-theta":
            self.theta = v.reshape(self.L, self.L).copy()
            return
        if self.name == "learn-beta":
            self.items = v.reshape(self.items.shape).copy()
        else:
            self.theta = v[:n_t].reshape(self.L, self.L).copy()
            self.items = v[n_t:].reshape(self.items.shape).copy()
        self.M = np.asarray(self.A @ self.items)

    def _h(self, users):
        M = self.M[users]
        return M, (M if self.theta is None else M @ self.theta)

    def per_context(self, users, streams, reward, summed: bool):
        """Gradient rows (or their sum) for the given users, one Gumbel stream each."""
        M, H = self._h(users)
        F = H @ self.items.T
        G = np.stack([gumbel_noise(s, self.items.shape[0]) for s in streams])
        slates, coef = _pl_score_coefficients(F, G, self.K)
        r = self.rewards(users, slates, reward)
        coef *= r[:, None]
        g_h = coef @ self.items  # r * d log pi / d h per row
        parts = []
        if self.theta is not None:
            parts.append(np.einsum("bi,bj->bij", M, g_h) if not summed else M.T @ g_h)
        if self.name != "learn-theta":
            # f_a = h . beta_a directly, and h depends on beta through M(X)
            back = g_h if self.theta is None else g_h @ self.theta.T
            if summed:
                d_items = coef.T @ H + self.A[users].T @ back
                parts.append(d_items)
            else:
                Ab = self.A[users]
                rows = np.einsum("bp,bl->bpl", coef, H)
                for j in range(len(users)):
                    lo, hi = Ab.indptr[j], Ab.indptr[j + 1]
                    rows[j, Ab.indices[lo:hi]] += Ab.data[lo:hi, None] * back[j]
                parts.append(rows)
        if summed:
            return np.concatenate([np.asarray(p).ravel() for p in parts])
        return np.concatenate([p.reshape(len(users), -1) for p in parts], axis=1)

    def rewards(self, users, slates, reward):
        hits = np.take_along_axis(self.Y[users].toarray(), slates, axis=1)
        return hits @ reward.position_weights(slates.shape[1])

    def decide(self, users, K):
        _, H = self._h(users)
        return top_k(H @ self.items.T, K)


def _reward_of(model, users, K, reward):
    return float(np.mean(model.rewards(users, model.decide(users, K), reward)))


def bench_fixed_beta(data: ScenarioData, epochs: float = 1.0, K: int = 2, lr: float = 1e-2, batch_size: int = 32,
                     probe_trials: int = 200, n_logs: int = 10, seed: int = 0, max_iterations: Optional[int] = None,
                     variants: Sequence[str] = ("learn-theta", "learn-beta")) -> BenchReport:
    """Train PL-PG (S = 1) under each parametrisation and probe gradient variance along the way.

    All variants start from the same policy ranking (theta = I, SVD beta). At
    each log point the parameters are frozen and ``probe_trials``
    single-context estimates on the same contexts and Gumbel streams give
    E||G - mean G||^2. Per-iteration wall time covers optimisation steps only.
    """
    reward = SlateReward()
    split = data.train
    n_users = len(split)
    T = int(np.ceil(epochs * n_users / batch_size))
    if max_iterations is not None:
        T = min(T, int(max_iterations))
    log_at = sorted({int(round(j * T / n_logs)) for j in range(n_logs + 1)})
    report = BenchReport(data.scenario.name, "fixed_beta", "iteration", "log10_variance",
                         fingerprint(data, K=K, S=1, epochs=epochs, iterations=T, lr=lr, probe_trials=probe_trials))
    eval_users = np.arange(min(n_users, 1000))
    times, rewards, variances = {}, {}, {}
    for kind in variants:
        model = _FixedBetaModel(kind, data.beta, split, K)
        batch_rng, sample_rng, probe_rng = RngStream(seed).spawn(3)
        vec = model.vector()
        adam = AdamState.zeros(vec.size)
        step_time = 0.0
        it = 0
        for target in log_at:
            while it < target:
                t0 = time.perf_counter()
                users = batch_rng.integers(0, n_users, size=batch_size)
                g = model.per_context(users, sample_rng.spawn(batch_size), reward, summed=True)
                vec = adam_step(adam, vec, -g / batch_size, lr)
                model.set_vector(vec)
                step_time += time.perf_counter() - t0
                it += 1
            probe = probe_rng.child()
            users = probe.integers(0, n_users, size=probe_trials)
            var = variance_of(model.per_context(users, probe.spawn(probe_trials), reward, summed=False))
            variances.setdefault(kind, []).append(var)
            report.add(kind, seed, it, np.log10(var) if var > 0 else -np.inf)
            rewards.setdefault(kind, []).append(_reward_of(model, eval_users, K, reward))
        times[kind] = step_time / max(T, 1)
    report.extras.update({"seconds_per_iteration": times, "train_reward": rewards, "variance": variances,
                          "log_iterations": log_at})
    return report


# ---------------------------------------------------------------------------
# Complexity: per-iteration latency and sampling memory against P.


def _lgp_iteration(policy: LgpPolicy, index, M: np.ndarray, hidden, S: int, streams, reward):
    total = 0.0
    for m, y, s in zip(M, hidden, streams):
        slates, eps = policy.sample(m, index, s, n=S)
        r = reward.batch(slates, y)
        total += float(r @ eps[:, 0])
    return total


def lgp_iteration_seconds(data: ScenarioData, index, S: int = 10, K: int = 5, batch_size: int = 32,
                          iterations: int = 3, seed: int = 0, beam: Optional[int] = None) -> float:
    """Mean wall time of one LGP sampling-and-reward pass over a batch of contexts."""
    from .train import _BeamIndex

    if beam is not None and isinstance(index, ApproxIndex):
        index = _BeamIndex(index, beam)
    beta = data.beta
    policy = LgpPolicy(beta, LinearParams.identity(beta.L, 1.0), K, 1.0 / beta.L)
    M = mean_embeddings(beta, data.train.observed)
    reward = SlateReward()
    stream = RngStream(seed)
    # warm-up so compilation and caches do not count
    users = stream.integers(0, len(M), size=2)
    _lgp_iteration(policy, index, M[users], [data.train.hidden[u] for u in users], S, stream.spawn(2), reward)
    t0 = time.perf_counter()
    for _ in range(iterations):
        users = stream.integers(0, len(M), size=batch_size)
        _lgp_iteration(policy, index, M[users], [data.train.hidden[u] for u in users], S, stream.spawn(batch_size),
                       reward)
    return (time.perf_counter() - t0) / iterations


def sampling_peak_bytes(sample_fn) -> int:
    """Peak traced allocation while ``sample_fn()`` runs (numpy buffers included)."""
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base, _ = tracemalloc.get_traced_memory()
        sample_fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return int(peak - base)


def lgp_sampling_bytes(beta: EmbeddingMatrix, index, S: int, K: int = 5, seed: int = 0) -> int:
    policy = LgpPolicy(beta, LinearParams.identity(beta.L, 1.0), K, 1.0 / beta.L)
    m = beta.items[:8].mean(axis=0)
    policy.sample(m, index, RngStream(seed), n=S)  # warm-up
    return sampling_peak_bytes(lambda: policy.sample(m, index, RngStream(seed), n=S))


def pl_sampling_bytes(beta: EmbeddingMatrix, S: int, K: int = 5, seed: int = 0) -> int:
    pl = PlackettLuce(beta, LinearParams.identity(beta.L, 1.0), K)
    m = beta.items[:8].mean(axis=0)
    return sampling_peak_bytes(lambda: pl.sample_gumbel(m, RngStream(seed), n=S))


def bench_complexity(P_list: Sequence[int] = (10_000, 100_000, 1_000_000), L: int = 32, S: int = 10, K: int = 5,
                     iterations: int = 3, seed: int = 0, max_degree: int = 16, beam: int = 100,
                     mips_beam: int = 64) -> BenchReport:
    """Per-iteration latency of LGP through the graph index versus the exact index, and sampling memory."""
    report = BenchReport("complexity", "complexity", "P", "seconds_per_iteration",
                         {"L": L, "S": S, "K": K, "iterations": iterations, "seed": seed, "max_degree": max_degree,
                          "beam": beam, "mips_beam": mips_beam, "hardware": platform.machine()})
    extras = {"build_seconds": {}, "lgp_bytes": {}, "pl_bytes": {}, "ratio": {}}
    for P in P_list:
        sc = Scenario(f"synthetic-{P}", P=P, L=L, synthetic_only=True)
        data = build_scenario(sc, seed)
        t0 = time.perf_counter()
        index = data.ensure_index(max_degree, beam)
        extras["build_seconds"][P] = time.perf_counter() - t0
        t_mips = lgp_iteration_seconds(data, index, S, K, iterations=iterations, seed=seed, beam=mips_beam)
        t_exact = lgp_iteration_seconds(data, ExactIndex(data.beta), S, K, iterations=iterations, seed=seed)
        report.add("lgp-mips", seed, P, t_mips)
        report.add("lgp-exact", seed, P, t_exact)
        extras["ratio"][P] = t_mips / t_exact
        from .train import _BeamIndex

        extras["lgp_bytes"][P] = lgp_sampling_bytes(data.beta, _BeamIndex(index, mips_beam), S, K, seed)
        extras["pl_bytes"][P] = pl_sampling_bytes(data.beta, S, K, seed)
        del data, index
    report.extras.update(extras)
    return report
