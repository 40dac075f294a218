"""Mini-batch policy optimisation with Adam, budget control and deterministic evaluation."""

from __future__ import annotations

import csv
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import EmbeddingMatrix, LinearParams, PolicyParams, RngStream, TwoLayerParams, as_stream, mean_embeddings
from .data import SessionSplit, SlateReward
from .errors import ConfigurationError, ParseError, TrainingDivergedError
from .gradients import ESTIMATORS, lgp_grad, lrp_grad, pl_cov_grad, pl_pg_grad, pl_rank_grad
from .mips import ApproxIndex, ExactIndex
from .policy import GaussianNoise, LgpPolicy, PlackettLuce, resolve_sigma

logger = logging.getLogger(__name__)

TRAIN_ESTIMATORS = ("lgp-mips", "lgp", "lrp", "pl-pg", "pl-cov", "pl-rank")
N_INTERVALS = 10
PARAMS_MAGIC = b"SLPP"
PARAMS_VERSION = 1
_VARIANT_CODES = {"linear": 0, "two_layer": 1}


@dataclass(frozen=True)
class TrainConfig:
    """Everything that defines a training run.

    Exactly one of ``iterations`` and ``seconds`` sets the budget. ``sigma``
    accepts a number, "auto" (1/L) or "norm" (1 / mean embedding norm).
    ``mips_beam`` is the search beam used when sampling through the
    approximate index.
    """

    estimator: str = "lgp-mips"
    K: int = 5
    S: int = 10
    sigma: object = "auto"
    lr: float = 1e-2
    batch_size: int = 32
    iterations: Optional[int] = None
    seconds: Optional[float] = None
    eval_intervals: int = N_INTERVALS
    seed: int = 0
    variant: str = "linear"
    init_scale: float = 0.1
    mips_beam: int = 64
    train_eval_users: int = 1000

    def __post_init__(self):
        if self.estimator not in TRAIN_ESTIMATORS:
            raise ConfigurationError(f"unknown estimator {self.estimator!r}; choose from {', '.join(TRAIN_ESTIMATORS)}")
        base = "lgp" if self.estimator == "lgp-mips" else self.estimator
        if not ESTIMATORS.get(base, False):
            raise ConfigurationError(f"estimator {self.estimator!r} is not available")
        if not (self.lr >= 0 and np.isfinite(self.lr)):
            raise ConfigurationError(f"learning rate must be >= 0, got {self.lr}")
        if self.S < (2 if self.estimator == "pl-cov" else 1):
            raise ConfigurationError(f"S={self.S} is too small for {self.estimator}")
        if self.batch_size < 1 or self.K < 1:
            raise ConfigurationError("batch_size and K must be >= 1")
        if (self.iterations is None) == (self.seconds is None):
            raise ConfigurationError("set exactly one budget: iterations or seconds")
        if self.iterations is not None and self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.seconds is not None and self.seconds <= 0:
            raise ConfigurationError("seconds must be > 0")
        if self.eval_intervals < 1:
            raise ConfigurationError("eval_intervals must be >= 1")
        if self.variant not in _VARIANT_CODES:
            raise ConfigurationError(f"variant must be one of {sorted(_VARIANT_CODES)}")

    @classmethod
    def from_mapping(cls, mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            key = config_key(key)
            if key not in names:
                raise ConfigurationError(f"unknown configuration key {key!r}")
            kwargs[key] = value
        return cls(**kwargs)

    def to_dict(self):
        return asdict(self)


_ALIASES = {"k": "K", "s": "S", "budget_seconds": "seconds", "budget_iterations": "iterations"}


def config_key(key: str) -> str:
    """Field name for a config or flag spelling such as ``budget-iterations`` or ``k``."""
    key = key.replace("-", "_")
    return _ALIASES.get(key, key)


def load_config(path) -> dict:
    """Read a TOML key/value file (flat, or with the keys under [train])."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(str(exc), path=path) from None
    return dict(data.get("train", data))


@dataclass
class AdamState:
    """Bias-corrected Adam moments (minimisation convention)."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """One Adam descent step; returns the new parameter vector and advances ``state``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape or params.shape != state.m.shape:
        raise ConfigurationError(f"Adam state has {state.m.size} coordinates, got {params.size} params, {grad.size} grads")
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise TrainingDivergedError(f"non-finite gradient at coordinate {bad} on step {state.t + 1}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainLog:
    """Evaluation records: one at initialisation and one after each budget interval."""

    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    COLUMNS = ("interval", "seconds", "iteration", "train_reward", "val_reward")

    def add(self, **row):
        if self.records and row["seconds"] < self.records[-1]["seconds"]:
            raise ValueError("log timestamps must be non-decreasing")
        self.records.append(row)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    @property
    def final_val_reward(self) -> float:
        return float(self.records[-1]["val_reward"])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in self.records:
                w.writerow(r)

    def to_json(self, path=None) -> str:
        text = json.dumps({"config": self.config, "wall_seconds": self.wall_seconds, "records": self.records},
                          indent=2, default=_json_default)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    @classmethod
    def from_json(cls, text) -> "TrainLog":
        data = json.loads(text)
        return cls(data["records"], data.get("config", {}), data.get("wall_seconds", 0.0))


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def init_params(L: int, variant: str = "linear", scale: float = 0.1) -> PolicyParams:
    """Scaled identity for the linear map; identity first layer for the two-layer map."""
    if variant == "linear":
        return LinearParams.identity(L, scale)
    if variant == "two_layer":
        return TwoLayerParams(np.eye(L), scale * np.eye(L))
    raise ConfigurationError(f"unknown variant {variant!r}")


def save_params(params: PolicyParams, path) -> None:
    """SLPP: magic, version u32, variant u32, L u32, then float64 weights (row-major)."""
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<III", PARAMS_VERSION, _VARIANT_CODES[params.variant], params.L))
        fh.write(params.to_vector().astype("<f8").tobytes())


def load_params(path) -> PolicyParams:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != PARAMS_MAGIC:
        raise ParseError(f"bad magic {buf[:4]!r}, expected {PARAMS_MAGIC!r}", path=path)
    if len(buf) < 16:
        raise ParseError("truncated header", path=path)
    version, code, L = struct.unpack_from("<III", buf, 4)
    if version != PARAMS_VERSION:
        raise ParseError(f"unsupported params version {version}", path=path)
    variant = {v: k for k, v in _VARIANT_CODES.items()}.get(code)
    if variant is None:
        raise ParseError(f"unknown variant code {code}", path=path)
    n = L * L * (1 if variant == "linear" else 2)
    if len(buf) - 16 != 8 * n:
        raise ParseError(f"expected {8 * n} bytes of weights, found {len(buf) - 16}", path=path)
    vec = np.frombuffer(buf, dtype="<f8", offset=16).astype(np.float64)
    template = init_params(L, variant)
    return template.with_vector(vec)


def evaluate_deterministic(params: PolicyParams, beta: EmbeddingMatrix, split: SessionSplit, K: int, index=None,
                           reward=None, m: Optional[np.ndarray] = None) -> float:
    """Mean reward of the noise-free top-K decision over the split's users.

    Always scored with the exact index (an approximate ``index`` argument is
    ignored) so the metric does not depend on how the policy was trained.
    """
    if len(split) == 0:
        return 0.0
    reward = reward if reward is not None else SlateReward()
    exact = index if isinstance(index, ExactIndex) else ExactIndex(beta)
    m = mean_embeddings(beta, split.observed) if m is None else m
    slates = exact.query_batch(params.embed(m), K)
    total = [reward(s, y) if len(y) else 0.0 for s, y in zip(slates, split.hidden)]
    return float(np.mean(total))


class _Trainer:
    def __init__(self, config: TrainConfig, train_split: SessionSplit, beta, index, reward):
        self.config = config
        self.split = train_split
        self.beta = beta
        self.reward = reward
        self.sigma = resolve_sigma(config.sigma, beta)
        self.m_all = mean_embeddings(beta, train_split.observed)
        if config.estimator == "lgp-mips":
            if not isinstance(index, ApproxIndex):
                raise ConfigurationError("lgp-mips needs an approximate index")
            self.index = _BeamIndex(index, config.mips_beam)
        elif config.estimator in ("lgp", "lrp"):
            self.index = ExactIndex(beta)
        else:
            self.index = None

    def context_grad(self, params, m, hidden, stream) -> np.ndarray:
        c = self.config
        name = c.estimator
        if name in ("lgp", "lgp-mips"):
            lgp = LgpPolicy(self.beta, params, c.K, self.sigma)
            return lgp_grad(lgp, m, hidden, self.reward, c.S, self.index, stream).grad
        if name == "lrp":
            return lrp_grad(params, m, hidden, self.reward, GaussianNoise(self.sigma), c.S, self.index, stream,
                            c.K).grad
        pl = PlackettLuce(self.beta, params, c.K)
        fn = {"pl-pg": pl_pg_grad, "pl-cov": pl_cov_grad, "pl-rank": pl_rank_grad}[name]
        return fn(pl, m, hidden, self.reward, c.S, stream).grad

    def batch_grad(self, params, users, streams) -> np.ndarray:
        total = np.zeros(params.size)
        for u, stream in zip(users, streams):
            total += self.context_grad(params, self.m_all[u], self.split.hidden[u], stream)
        return total / len(users)


class _BeamIndex:
    """View of an approximate index that searches with a fixed beam."""

    def __init__(self, index: ApproxIndex, beam: int):
        self.inner = index
        self.beta = index.beta
        self.beam = beam

    def query(self, h, K):
        return self.inner.query(h, K, beam=self.beam)

    def query_batch(self, H, K):
        return self.inner.query_batch(H, K, beam=self.beam)


def train(config: TrainConfig, split: SessionSplit, beta: EmbeddingMatrix, index=None, rng=None, *,
          val_split: Optional[SessionSplit] = None, params: Optional[PolicyParams] = None, reward=None,
          callback=None):
    """Optimise the policy parameters; returns (params, TrainLog).

    Each iteration draws ``batch_size`` training users, averages their
    per-context gradient estimates (each context gets its own child random
    stream) and takes one Adam ascent step. Evaluation happens at start and
    after each of ``eval_intervals`` equal slices of the budget; with a
    wall-clock budget only optimisation time counts against it.
    """
    stream = as_stream(rng if rng is not None else config.seed)
    reward = reward if reward is not None else SlateReward()
    if len(split) == 0:
        raise ConfigurationError("training split has no users")
    trainer = _Trainer(config, split, beta, index, reward)
    params = params if params is not None else init_params(beta.L, config.variant, config.init_scale)
    if params.L != beta.L:
        raise ConfigurationError(f"parameters have L={params.L}, embeddings have L={beta.L}")
    val_split = val_split if val_split is not None else split
    m_val = mean_embeddings(beta, val_split.observed) if len(val_split) else None
    n_tr = min(config.train_eval_users, len(split))
    tr_eval = split.subset(np.arange(n_tr))
    m_tr = trainer.m_all[:n_tr]

    log = TrainLog(config=config.to_dict())
    exact = ExactIndex(beta)

    def evaluate(interval, seconds, iteration, p):
        log.add(interval=interval, seconds=seconds, iteration=iteration,
                train_reward=(evaluate_deterministic(p, beta, tr_eval, config.K, exact, reward, m_tr)
                              if n_tr else float("nan")),
                val_reward=evaluate_deterministic(p, beta, val_split, config.K, exact, reward, m_val))
        if callback is not None:
            callback(log.records[-1], p)

    batch_rng, sample_rng = stream.spawn(2)
    adam = AdamState.zeros(params.size)
    vec = params.to_vector()
    t_train = 0.0
    it = 0
    start = time.perf_counter()
    evaluate(0, 0.0, 0, params)
    n_int = config.eval_intervals
    for interval in range(1, n_int + 1):
        if config.iterations is not None:
            stop_it = round(interval * config.iterations / n_int)
            while it < stop_it:
                t0 = time.perf_counter()
                vec, params = _step(trainer, params, vec, adam, batch_rng, sample_rng, config)
                t_train += time.perf_counter() - t0
                it += 1
        else:
            stop_t = interval * config.seconds / n_int
            while t_train < stop_t:
                t0 = time.perf_counter()
                vec, params = _step(trainer, params, vec, adam, batch_rng, sample_rng, config)
                t_train += time.perf_counter() - t0
                it += 1
        evaluate(interval, t_train, it, params)
    log.wall_seconds = time.perf_counter() - start
    return params, log


def _step(trainer, params, vec, adam, batch_rng, sample_rng, config):
    users = batch_rng.integers(0, len(trainer.split), size=config.batch_size)
    streams = sample_rng.spawn(config.batch_size)
    grad = trainer.batch_grad(params, users, streams)
    # Adam minimises; the objective is a reward, so step along -grad.
    vec = adam_step(adam, vec, -grad, config.lr)
    return vec, params.with_vector(vec)


def lr_sweep(config: TrainConfig, lrs: Sequence[float], split, beta, index=None, *, val_split=None):
    """Train once per learning rate; returns (best_lr, {lr: final validation reward})."""
    scores = {}
    for lr in lrs:
        _, log = train(replace(config, lr=float(lr)), split, beta, index, config.seed, val_split=val_split)
        scores[float(lr)] = log.final_val_reward
    best = max(scores, key=lambda k: (scores[k], -k))
    return best, scores
