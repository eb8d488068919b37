"""Server loop: sampling, aggregation, optimizer steps, determinism."""

import numpy as np
import pytest

from fedquant.data import FederatedDataset, dirichlet_partition, gen_synthetic
from fedquant.errors import AggregationError, ConfigError
from fedquant.federation import (FedConfig, ServerState, aggregate,
                                 evaluate_global, load_checkpoint, run,
                                 sample_clients, save_checkpoint, server_step)
from fedquant.mlp import Batch, backward, forward, init_params
from fedquant.rng import Purpose, RngStream
from fedquant.strategies import ClientUpdate, StrategyConfig


def tiny_fed_data(seed=0, classes=4, dim=8, per_class=40, clients=8, sep=3.0,
                  alpha=1.0):
    root = RngStream(seed)
    train, val = gen_synthetic(classes, dim, per_class, sep, root.child(Purpose.DATA))
    assignment = dirichlet_partition(train.labels, clients, alpha,
                                     root.child(Purpose.PARTITION))
    return FederatedDataset(base=train, assignment=assignment, alpha=alpha,
                            holdout=val)


class TestSampleClients:
    def test_exhaustive_when_s_equals_n(self):
        got = sample_clients(12, 12, RngStream(0))
        assert np.array_equal(got, np.arange(12))

    def test_sorted_distinct(self):
        got = sample_clients(100, 10, RngStream(1))
        assert got.size == 10
        assert np.array_equal(got, np.unique(got))

    def test_participation_frequency(self):
        """Over many rounds every client participates close to s/n of the time."""
        root = RngStream(2)
        counts = np.zeros(100)
        rounds = 20000
        for t in range(rounds):
            counts[sample_clients(100, 10, root.child(t))] += 1
        freq = counts / rounds
        assert np.all(np.abs(freq - 0.1) < 0.005)  # 5% of 0.1

    def test_deterministic_per_round_stream(self):
        a = sample_clients(50, 5, RngStream(3, (9,)))
        b = sample_clients(50, 5, RngStream(3, (9,)))
        assert np.array_equal(a, b)

    def test_oversampling_rejected(self):
        with pytest.raises(ConfigError):
            sample_clients(5, 6, RngStream(0))


class TestAggregate:
    def test_single_update_is_identity(self):
        d = np.array([1.0, -2.0, 3.0])
        out = aggregate([ClientUpdate(0, d, [0.0])])
        assert np.array_equal(out, d)

    def test_opposite_deltas_cancel(self):
        d = RngStream(4).normal(20)
        out = aggregate([ClientUpdate(0, d, [0.0]), ClientUpdate(1, -d, [0.0])])
        assert np.array_equal(out, np.zeros(20))

    def test_matches_scalar_loop_oracle(self):
        rng = RngStream(5)
        deltas = [rng.normal(30) for _ in range(3)]
        got = aggregate([ClientUpdate(i, d, [0.0]) for i, d in enumerate(deltas)])
        want = np.zeros(30)
        for j in range(30):
            acc = 0.0
            for d in deltas:
                acc += d[j]
            want[j] = acc / 3
        assert np.max(np.abs(got - want)) < 1e-15

    def test_order_insensitive_summation(self):
        rng = RngStream(6)
        ups = [ClientUpdate(i, rng.normal(10), [0.0]) for i in range(5)]
        assert np.array_equal(aggregate(ups), aggregate(list(reversed(ups))))

    def test_linearity_under_scaling(self):
        rng = RngStream(7)
        ups = [ClientUpdate(i, rng.normal(10), [0.0]) for i in range(4)]
        scaled = [ClientUpdate(u.client_id, 3.0 * u.delta, [0.0]) for u in ups]
        assert np.allclose(aggregate(scaled), 3.0 * aggregate(ups), rtol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(AggregationError):
            aggregate([ClientUpdate(0, np.zeros(3), [0.0]),
                       ClientUpdate(1, np.zeros(4), [0.0])])

    def test_empty_rejected(self):
        with pytest.raises(AggregationError):
            aggregate([])


def scalar_state(values, server_opt="sgd"):
    from fedquant.mlp import ParamSet
    w = np.asarray(values, dtype=np.float64).reshape(1, -1)
    params = ParamSet([(w, np.zeros(w.shape[1]))])
    dim = params.dim
    if server_opt == "adam":
        return ServerState(0, params, adam_m=np.zeros(dim), adam_v=np.zeros(dim))
    return ServerState(0, params)


class TestServerStep:
    def test_sgd_zero_delta_is_identity(self):
        state = scalar_state([1.0, -2.0])
        cfg = FedConfig(total_rounds=1, num_clients=1, clients_per_round=1,
                        eta_s=1.0)
        new = server_step(state, np.zeros(state.params.dim), cfg)
        assert np.array_equal(new.params.flatten(), state.params.flatten())
        assert new.round_idx == 1

    def test_sgd_applies_scaled_delta(self):
        state = scalar_state([0.0, 0.0])
        cfg = FedConfig(total_rounds=1, num_clients=1, clients_per_round=1,
                        eta_s=0.5)
        delta = np.zeros(state.params.dim)
        delta[0], delta[1] = 2.0, -2.0
        new = server_step(state, delta, cfg)
        assert new.params.layers[0][0][0, 0] == 1.0
        assert new.params.layers[0][0][0, 1] == -1.0

    def test_adam_first_step_hand_formula(self):
        """Bias-corrected first step moves by eta * c / (|c| + eps)."""
        state = scalar_state([0.0, 0.0, 0.0], server_opt="adam")
        cfg = FedConfig(total_rounds=1, num_clients=1, clients_per_round=1,
                        eta_s=0.1, server_opt="adam", adam_eps=1e-3)
        c = 0.25
        delta = np.full(state.params.dim, c)
        new = server_step(state, delta, cfg)
        moved = new.params.flatten()[:3]
        assert np.allclose(moved, 0.1 * c / (abs(c) + 1e-3), rtol=1e-12)


class TestRun:
    def test_single_client_single_step_round_composes_oracles(self):
        data = tiny_fed_data(seed=1, clients=1)
        cfg = FedConfig(total_rounds=1, num_clients=1, clients_per_round=1,
                        eta_s=1.0, eta_c=0.05, local_steps=1, batch_size=16,
                        server_opt="sgd", seed=42, eval_every=1)
        state, history = run(cfg, StrategyConfig(), data, hidden=(6,))
        # replay by hand: same init, same batch draw, one SGD step, eta_s = 1
        root = RngStream(42)
        params = init_params([8, 6, data.base.num_classes],
                             root.child(Purpose.INIT))
        batch_rng = root.child(Purpose.BATCH, 0, 0)
        idx = data.assignment[0]
        perm = idx[batch_rng.permutation(idx.size)]
        sel = np.take(perm, np.arange(16), mode="wrap")
        batch = Batch(data.base.inputs[sel], data.base.labels[sel])
        _, cache = forward(params, batch)
        params.add_scaled(backward(cache), -0.05)
        assert np.array_equal(state.params.flatten(), params.flatten())
        assert len(history.rows) == 1

    def test_thread_count_does_not_change_results(self):
        data = tiny_fed_data(seed=2)
        cfg = FedConfig(total_rounds=4, num_clients=8, clients_per_round=4,
                        eta_s=1.0, eta_c=0.05, local_steps=2, batch_size=8,
                        server_opt="sgd", seed=7, eval_every=2)
        strat = StrategyConfig(kind="mqat", bit_set=(2, 4, 8, 32))
        s1, h1 = run(cfg, strat, data, hidden=(6,), threads=1)
        s4, h4 = run(cfg, strat, data, hidden=(6,), threads=4)
        assert np.array_equal(s1.params.flatten(), s4.params.flatten())
        assert [(r.round_idx, r.val_accuracy, r.val_loss, r.mean_client_loss)
                for r in h1.rows] == \
               [(r.round_idx, r.val_accuracy, r.val_loss, r.mean_client_loss)
                for r in h4.rows]

    def test_full_participation_single_step_equals_union_sgd(self):
        """With every client running one full-batch step and eta_s = 1, a
        round is one mini-batch SGD step on the equal-weight union objective."""
        data = tiny_fed_data(seed=3, clients=4, per_class=25)
        max_client = max(idx.size for idx in data.assignment)
        cfg = FedConfig(total_rounds=1, num_clients=4, clients_per_round=4,
                        eta_s=1.0, eta_c=0.05, local_steps=1,
                        batch_size=max_client, server_opt="sgd", seed=11,
                        eval_every=1)
        state, _ = run(cfg, StrategyConfig(), data, hidden=(5,))
        root = RngStream(11)
        params = init_params([8, 5, data.base.num_classes],
                             root.child(Purpose.INIT))
        grad = np.zeros(params.dim)
        for idx in data.assignment:
            batch = Batch(data.base.inputs[idx], data.base.labels[idx])
            _, cache = forward(params, batch)
            grad += backward(cache).flatten()
        expected = params.flatten() - 0.05 * grad / 4
        got = state.params.flatten()
        scale = max(1.0, float(np.max(np.abs(expected))))
        assert np.max(np.abs(got - expected)) < 1e-12 * scale

    def test_baseline_learns_separable_data(self):
        data = tiny_fed_data(seed=4, classes=4, dim=8, per_class=50, clients=8,
                             sep=6.0)
        cfg = FedConfig(total_rounds=200, num_clients=8, clients_per_round=4,
                        eta_s=1.0, eta_c=0.05, local_steps=None, batch_size=10,
                        server_opt="sgd", seed=21, eval_every=50)
        state, history = run(cfg, StrategyConfig(), data, hidden=(16,))
        assert history.rows[-1].val_accuracy >= 0.95

    def test_round_purity_resume_equivalence(self):
        """State after t rounds is a pure function of (cfg, strat, seed)."""
        data = tiny_fed_data(seed=5)
        cfg = FedConfig(total_rounds=3, num_clients=8, clients_per_round=3,
                        eta_s=0.5, eta_c=0.05, local_steps=2, batch_size=8,
                        server_opt="adam", seed=13, eval_every=1)
        s_a, _ = run(cfg, StrategyConfig(), data, hidden=(6,))
        s_b, _ = run(cfg, StrategyConfig(), data, hidden=(6,))
        assert np.array_equal(s_a.params.flatten(), s_b.params.flatten())
        assert np.array_equal(s_a.adam_m, s_b.adam_m)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        data = tiny_fed_data(seed=6)
        cfg = FedConfig(total_rounds=2, num_clients=8, clients_per_round=2,
                        eta_s=1.0, eta_c=0.05, local_steps=1, batch_size=8,
                        server_opt="adam", seed=3, eval_every=1)
        strat = StrategyConfig(kind="qat", train_bits=4)
        state, _ = run(cfg, strat, data, hidden=(6,))
        path = str(tmp_path / "ckpt.json")
        save_checkpoint(path, state, {"any": "config"})
        loaded, doc = load_checkpoint(path)
        assert doc == {"any": "config"}
        assert loaded.round_idx == state.round_idx
        assert np.array_equal(loaded.params.flatten(), state.params.flatten())
        assert np.array_equal(loaded.adam_v, state.adam_v)
        assert [t.steps for t in loaded.step_tables.weights] == \
               [t.steps for t in state.step_tables.weights]

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "not_ckpt.json"
        path.write_text('{"magic": "something-else"}')
        with pytest.raises(ConfigError):
            load_checkpoint(str(path))


class TestEvaluateGlobal:
    def test_matches_loop_oracle(self):
        data = tiny_fed_data(seed=8)
        params = init_params([8, 6, data.base.num_classes], RngStream(1))
        acc, loss = evaluate_global(params, data.holdout)
        from fedquant.mlp import predict_logits
        logits = predict_logits(params, data.holdout.inputs)
        correct = 0
        for i in range(data.holdout.size):
            if int(np.argmax(logits[i])) == int(data.holdout.labels[i]):
                correct += 1
        assert acc == correct / data.holdout.size
        assert loss > 0
