"""Training loop, Adam, budgets, deterministic evaluation and parameter files."""

import time
from dataclasses import replace

import numpy as np
import pytest

from slate_forge import EmbeddingMatrix, LinearParams, RngStream, TwoLayerParams
from slate_forge.data import SessionSplit, SlateReward, holdout_users
from slate_forge.errors import ConfigurationError, ParseError, TrainingDivergedError
from slate_forge.mips import build_approx
from slate_forge.train import (
    AdamState,
    TrainConfig,
    TrainLog,
    _Trainer,
    adam_step,
    evaluate_deterministic,
    init_params,
    load_config,
    load_params,
    lr_sweep,
    save_params,
    train,
)

import oracles
from conftest import separable_split


@pytest.fixture(scope="module")
def separable():
    beta, split = separable_split()
    train_split, val_split = holdout_users(split, 0.1, 0)
    return beta, train_split, val_split


def _small_problem(seed=0, P=60, L=4, U=80):
    rng = np.random.default_rng(seed)
    beta = EmbeddingMatrix.from_items(rng.normal(size=(P, L)))
    observed = [np.sort(rng.choice(P, 4, replace=False)) for _ in range(U)]
    hidden = [np.setdiff1d(rng.choice(P, 6, replace=False), o) for o in observed]
    return beta, SessionSplit(np.arange(U), observed, hidden, 0.5, seed, P)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        state = AdamState.zeros(3)
        x = np.array([1.0, -2.0, 0.5])
        for _ in range(10):
            x = adam_step(state, x, np.zeros(3), 0.1)
        np.testing.assert_array_equal(x, [1.0, -2.0, 0.5])

    def test_first_step_is_lr(self):
        state = AdamState.zeros(4)
        x = adam_step(state, np.zeros(4), np.array([3.0, -0.2, 1e-3, 50.0]), 0.01)
        np.testing.assert_allclose(np.abs(x), 0.01, rtol=1e-4)
        np.testing.assert_array_equal(np.sign(x), [-1, 1, -1, -1])

    def test_quadratic_converges(self):
        state = AdamState.zeros(1)
        x = np.array([1.0])
        for _ in range(500):
            x = adam_step(state, x, 2 * x, 0.1)
        assert abs(x[0]) < 1e-3

    def test_matches_longhand(self, rng):
        grads = rng.normal(size=30)
        state = AdamState.zeros(1)
        x = np.array([0.3])
        traj = []
        for g in grads:
            x = adam_step(state, x, np.array([g]), 0.05)
            traj.append(x[0])
        np.testing.assert_allclose(traj, oracles.adam_scalar(grads, 0.05, 0.3), rtol=1e-12, atol=1e-15)

    def test_non_finite_gradient(self):
        with pytest.raises(TrainingDivergedError):
            adam_step(AdamState.zeros(2), np.zeros(2), np.array([0.0, np.nan]), 0.1)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3), 0.1)


class TestEvaluate:
    def test_empty_hidden_sets(self):
        beta, split = _small_problem()
        empty = SessionSplit(split.users, split.observed, [np.zeros(0, np.int64)] * len(split), 0.5, 0, beta.P)
        assert evaluate_deterministic(LinearParams(np.eye(4)), beta, empty, 3) == 0.0

    def test_oracle_parameters(self):
        # hidden items lie along the user's own direction; identity ranks them first
        items = np.concatenate([np.eye(3) * 5.0 + 0.1 * k for k in range(4)] + [-np.eye(3)])
        beta = EmbeddingMatrix.from_items(items)
        observed, hidden = [], []
        for d in range(3):
            own = np.flatnonzero(np.argmax(items, axis=1) == d)
            own = own[items[own, d] > 0]
            observed.append(own[:1])
            hidden.append(own)
        split = SessionSplit(np.arange(3), observed, hidden, 0.5, 0, beta.P)
        K = 3
        r = evaluate_deterministic(LinearParams(np.eye(3)), beta, split, K)
        assert r == sum(2.0 ** -k for k in range(K))

    def test_bit_exact_repeat(self):
        beta, split = _small_problem()
        params = LinearParams(np.random.default_rng(0).normal(size=(4, 4)))
        assert evaluate_deterministic(params, beta, split, 5) == evaluate_deterministic(params, beta, split, 5)

    def test_ignores_approximate_index(self):
        beta, split = _small_problem()
        params = LinearParams(np.eye(4))
        approx = build_approx(beta, rng=0, query_beam=1)
        assert evaluate_deterministic(params, beta, split, 5, approx) == evaluate_deterministic(params, beta, split, 5)


class TestTrain:
    def test_zero_learning_rate_flat(self):
        beta, split = _small_problem()
        config = TrainConfig(estimator="lgp", K=3, S=4, lr=0.0, iterations=20, eval_intervals=4)
        params, log = train(config, split, beta)
        np.testing.assert_array_equal(params.to_vector(), init_params(4).to_vector())
        assert len(set(log.column("val_reward"))) == 1
        assert len(log.records) == 5

    @pytest.mark.slow
    def test_separable_instance_beats_random(self, separable):
        beta, train_split, val_split = separable
        gen = np.random.default_rng(123)
        baseline = np.mean([evaluate_deterministic(LinearParams(gen.normal(size=(8, 8))), beta, val_split, 3)
                            for _ in range(50)])
        config = TrainConfig(estimator="lgp", K=3, S=10, lr=1e-2, iterations=2000)
        _, log = train(config, train_split, beta, val_split=val_split)
        assert log.final_val_reward >= 3 * baseline
        assert log.final_val_reward > log.records[0]["val_reward"]

    def test_wall_clock_budget(self):
        beta, split = _small_problem()
        config = TrainConfig(estimator="pl-pg", K=3, S=4, seconds=1.0, eval_intervals=5)
        t0 = time.perf_counter()
        _, log = train(config, split, beta)
        optimisation = log.records[-1]["seconds"]
        assert 1.0 <= optimisation
        per_iteration = optimisation / log.records[-1]["iteration"]
        assert optimisation <= 1.0 + 5 * per_iteration + 0.05
        assert time.perf_counter() - t0 < 10

    @pytest.mark.slow
    def test_five_second_budget(self):
        beta, split = _small_problem()
        config = TrainConfig(estimator="lgp", K=3, S=4, seconds=5.0)
        _, log = train(config, split, beta)
        per_iteration = log.records[-1]["seconds"] / log.records[-1]["iteration"]
        assert 5.0 <= log.records[-1]["seconds"] <= 5.0 + per_iteration + 0.01

    @pytest.mark.parametrize("estimator", ["lgp", "lrp", "pl-pg", "pl-cov", "pl-rank", "lgp-mips"])
    def test_bit_reproducible(self, estimator):
        beta, split = _small_problem()
        index = build_approx(beta, rng=0) if estimator == "lgp-mips" else None
        config = TrainConfig(estimator=estimator, K=3, S=4, iterations=15, eval_intervals=3, seed=4)
        a, log_a = train(config, split, beta, index)
        b, log_b = train(config, split, beta, index)
        np.testing.assert_array_equal(a.to_vector(), b.to_vector())
        assert log_a.column("val_reward").tolist() == log_b.column("val_reward").tolist()

    def test_batch_gradient_is_mean_of_contexts(self):
        beta, split = _small_problem()
        config = TrainConfig(estimator="lgp", K=3, S=5, iterations=1)
        trainer = _Trainer(config, split, beta, None, SlateReward())
        params = LinearParams(np.random.default_rng(1).normal(size=(4, 4)))
        for batch in (1, 2, 3, 4):
            users = np.arange(batch) * 7
            streams = RngStream(batch).spawn(batch)
            total = trainer.batch_grad(params, users, streams)
            each = [trainer.context_grad(params, trainer.m_all[u], split.hidden[u], s)
                    for u, s in zip(users, RngStream(batch).spawn(batch))]
            np.testing.assert_allclose(total, np.mean(each, axis=0), rtol=0, atol=1e-15)

    def test_evaluation_independent_of_training_settings(self):
        beta, split = _small_problem()
        logs = [train(TrainConfig(estimator=e, K=3, S=s, sigma=sg, lr=0.0, iterations=2), split, beta)[1]
                for e, s, sg in (("lgp", 2, 0.1), ("pl-pg", 7, "auto"))]
        assert logs[0].records[0]["val_reward"] == logs[1].records[0]["val_reward"]

    def test_two_layer_variant(self):
        beta, split = _small_problem()
        params, _ = train(TrainConfig(estimator="lgp", K=3, S=4, iterations=10, variant="two_layer"), split, beta)
        assert isinstance(params, TwoLayerParams)

    def test_lgp_mips_needs_graph(self):
        beta, split = _small_problem()
        with pytest.raises(ConfigurationError):
            train(TrainConfig(estimator="lgp-mips", iterations=1), split, beta)

    def test_divergence_reported(self):
        beta, split = _small_problem()

        class Exploding(SlateReward):
            def batch(self, slates, hidden):
                return np.full(len(slates), np.inf)

        with pytest.raises(ValueError):
            train(TrainConfig(estimator="lgp", iterations=3), split, beta, reward=Exploding())

    def test_lr_sweep_picks_best(self, separable):
        beta, train_split, val_split = separable
        config = TrainConfig(estimator="lgp", K=3, S=5, iterations=100, eval_intervals=1)
        best, scores = lr_sweep(config, [0.0, 1e-2], train_split, beta, val_split=val_split)
        assert best == max(scores, key=scores.get)
        assert set(scores) == {0.0, 1e-2}


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        {"estimator": "reinforce", "iterations": 1},
        {"lr": -1.0, "iterations": 1},
        {"estimator": "pl-cov", "S": 1, "iterations": 1},
        {"iterations": 1, "seconds": 1.0},
        {},
        {"iterations": 1, "variant": "deep"},
        {"iterations": 1, "eval_intervals": 0},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs)

    def test_toml(self, tmp_path):
        (tmp_path / "c.toml").write_text('[train]\nestimator = "pl-pg"\nk = 3\nbudget-iterations = 7\n')
        config = TrainConfig.from_mapping(load_config(tmp_path / "c.toml"))
        assert (config.estimator, config.K, config.iterations) == ("pl-pg", 3, 7)

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_mapping({"iterations": 1, "momentum": 0.9})

    def test_bad_toml(self, tmp_path):
        (tmp_path / "c.toml").write_text("k = = 3\n")
        with pytest.raises(ParseError):
            load_config(tmp_path / "c.toml")


class TestArtifacts:
    def test_log_csv_and_json(self, tmp_path):
        beta, split = _small_problem()
        _, log = train(TrainConfig(estimator="lgp", K=3, S=2, iterations=4, eval_intervals=2), split, beta)
        log.to_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "interval,seconds,iteration,train_reward,val_reward"
        assert len(lines) == 4
        again = TrainLog.from_json(log.to_json())
        assert again.records == log.records

    def test_timestamps_monotone(self):
        log = TrainLog()
        log.add(interval=0, seconds=1.0, iteration=0, train_reward=0, val_reward=0)
        with pytest.raises(ValueError):
            log.add(interval=1, seconds=0.5, iteration=1, train_reward=0, val_reward=0)

    @pytest.mark.parametrize("params", [LinearParams(np.arange(9.0).reshape(3, 3)),
                                        TwoLayerParams(np.eye(3), -np.eye(3))])
    def test_params_round_trip(self, tmp_path, params):
        save_params(params, tmp_path / "p.bin")
        again = load_params(tmp_path / "p.bin")
        assert type(again) is type(params)
        np.testing.assert_array_equal(again.to_vector(), params.to_vector())

    def test_params_bad_magic(self, tmp_path):
        (tmp_path / "p.bin").write_bytes(b"JUNK" + bytes(20))
        with pytest.raises(ParseError):
            load_params(tmp_path / "p.bin")

    def test_params_truncated(self, tmp_path):
        save_params(LinearParams(np.eye(3)), tmp_path / "p.bin")
        raw = (tmp_path / "p.bin").read_bytes()
        (tmp_path / "p.bin").write_bytes(raw[:-8])
        with pytest.raises(ParseError):
            load_params(tmp_path / "p.bin")

    def test_init(self):
        np.testing.assert_array_equal(init_params(3).theta, 0.1 * np.eye(3))
        with pytest.raises(ConfigurationError):
            init_params(3, "deep")
