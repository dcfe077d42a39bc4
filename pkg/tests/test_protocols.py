import numpy as np
import pytest

from splitfed import seeds
from splitfed.data import (Dataset, Partition, gen_synthetic, partition_dirichlet,
                           partition_iid, round_batches)
from splitfed.engine import cross_entropy, make_optimizer
from splitfed.models import build_mlp
from splitfed.protocols import (CommLedger, RoundConfig, aggregate_weighted, comm_cost,
                                evaluate, init_protocol, run_round, run_sl_round)
from splitfed.split import _split_unchecked, payload_profile


def make_world(num_classes=4, dim=8, per_class=40, k_clients=4, seed=3,
               partition="iid", mu=0.5, min_samples=5):
    ds = gen_synthetic(num_classes, dim, per_class, 1.5, seed=seed)
    if partition == "iid":
        part = partition_iid(ds, k_clients, seed=seed)
    else:
        part = partition_dirichlet(ds, k_clients, mu, seed=seed,
                                   min_samples=min_samples)
    model, boundaries = build_mlp((dim,), (16, 16, 16), num_classes)
    model.init_params(seed)
    return ds, part, model, boundaries


def advance(state, ds, part, cfg, rounds, **kw):
    losses = []
    for t in range(rounds):
        losses.append(run_round(state, ds, part, cfg, t, **kw))
    return losses


class TestAggregation:
    def two_models(self, values):
        out = []
        for v in values:
            m, _ = build_mlp((2,), (2,), 2)
            m.load_params(np.full(m.param_count, v))
            out.append(m)
        return out

    def test_identical_models_any_weights_bitwise(self):
        models = self.two_models([1.234, 1.234, 1.234])
        agg = aggregate_weighted(models, [0.2, 0.5, 0.3])
        assert np.array_equal(agg.flatten_params(), models[0].flatten_params())

    def test_even_weights_mean(self):
        models = self.two_models([1.0, 3.0])
        agg = aggregate_weighted(models, [0.5, 0.5])
        assert np.allclose(agg.flatten_params(), 2.0, atol=1e-15)

    def test_dataset_size_weighting(self):
        models = self.two_models([0.0, 4.0])
        agg = aggregate_weighted(models, [0.25, 0.75])  # D = [10, 30]
        assert np.allclose(agg.flatten_params(), 3.0, atol=1e-15)

    def test_weight_sum_violation(self):
        models = self.two_models([0.0, 4.0])
        with pytest.raises(ValueError, match="sum to 1"):
            aggregate_weighted(models, [0.6, 0.6])

    def test_shape_mismatch(self):
        a, _ = build_mlp((2,), (2,), 2)
        b, _ = build_mlp((2,), (3,), 2)
        with pytest.raises(Exception, match="shapes"):
            aggregate_weighted([a, b], [0.5, 0.5])

    def test_matches_plain_weighted_sum(self):
        rng = np.random.default_rng(0)
        models = []
        for _ in range(3):
            m, _ = build_mlp((2,), (2,), 2)
            m.load_params(rng.normal(size=m.param_count))
            models.append(m)
        w = np.array([0.2, 0.3, 0.5])
        agg = aggregate_weighted(models, w)
        plain = sum(wi * m.flatten_params() for wi, m in zip(w, models))
        assert np.max(np.abs(agg.flatten_params() - plain)) < 1e-14


class TestFedAvg:
    def test_single_client_equals_local_training(self):
        ds, part, model, _ = make_world(k_clients=1)
        state = init_protocol(model, "fedavg", None, 1, "sgd", 0.05)
        cfg = RoundConfig(epochs=2, batch_size=16, master_seed=3, lr_schedule=0.05)
        advance(state, ds, part, cfg, 2)

        # straight-line oracle: plain minibatch SGD over the same stream
        ref = model.clone()
        opt = make_optimizer("sgd", 0.05)
        for t in range(2):
            for idx in round_batches(part, 0, 16, 3, t, 2):
                logits = ref.forward(ds.features[idx])
                loss, gl = cross_entropy(logits, ds.labels[idx])
                grads, _ = ref.backward(gl)
                opt.step(ref.parameters(), grads)
        assert np.array_equal(state.global_model().flatten_params(),
                              ref.flatten_params())

    def test_zero_epochs_is_identity(self):
        ds, part, model, _ = make_world()
        state = init_protocol(model, "fedavg", None, 4, "sgd", 0.05)
        cfg = RoundConfig(epochs=0, batch_size=16, master_seed=3, lr_schedule=0.05)
        advance(state, ds, part, cfg, 3)
        assert np.array_equal(state.global_model().flatten_params(),
                              model.flatten_params())

    def test_two_clients_against_hand_rolled_loop(self):
        # one batch each, SGD: aggregate must equal the alpha-weighted mean of
        # two one-step-updated models
        ds, part, model, _ = make_world(k_clients=2, per_class=8)  # D_k = 16
        state = init_protocol(model, "fedavg", None, 2, "sgd", 0.1)
        cfg = RoundConfig(epochs=1, batch_size=16, master_seed=3, lr_schedule=0.1)
        run_round(state, ds, part, cfg, 0)

        updated = []
        for k in range(2):
            local = model.clone()
            (idx,) = round_batches(part, k, 16, 3, 0, 1)
            logits = local.forward(ds.features[idx])
            _, gl = cross_entropy(logits, ds.labels[idx])
            grads, _ = local.backward(gl)
            for p, g in zip(local.parameters(), grads):
                p -= 0.1 * g
            updated.append(local.flatten_params())
        expected = part.weights[0] * updated[0] + part.weights[1] * updated[1]
        assert np.max(np.abs(state.global_model().flatten_params() - expected)) <= 1e-12


class TestSflV1:
    @pytest.mark.parametrize("cut_block", [1, 2, 3])
    @pytest.mark.parametrize("epochs", [1, 2])
    def test_equals_fedavg_under_sgd(self, cut_block, epochs):
        ds, part, model, bounds = make_world(partition="dirichlet")
        cut = bounds[cut_block - 1]
        cfg = RoundConfig(epochs=epochs, batch_size=16, master_seed=3, lr_schedule=0.05)
        v1 = init_protocol(model, "sflv1", cut, 4, "sgd", 0.05)
        fed = init_protocol(model, "fedavg", None, 4, "sgd", 0.05)
        for t in range(3):
            run_round(v1, ds, part, cfg, t)
            run_round(fed, ds, part, cfg, t)
            dev = np.max(np.abs(v1.global_model().flatten_params()
                                - fed.global_model().flatten_params()))
            assert dev <= 1e-12

    def test_single_client_equals_centralized_on_same_stream(self):
        ds, part, model, bounds = make_world(k_clients=1)
        cfg = RoundConfig(epochs=2, batch_size=16, master_seed=3, lr_schedule=0.05)
        v1 = init_protocol(model, "sflv1", bounds[1], 1, "sgd", 0.05)
        advance(v1, ds, part, cfg, 2)

        ref = model.clone()
        opt = make_optimizer("sgd", 0.05)
        for t in range(2):
            for idx in round_batches(part, 0, 16, 3, t, 2):
                logits = ref.forward(ds.features[idx])
                _, gl = cross_entropy(logits, ds.labels[idx])
                grads, _ = ref.backward(gl)
                opt.step(ref.parameters(), grads)
        assert np.array_equal(v1.global_model().flatten_params(), ref.flatten_params())

    def test_zero_epochs_identity_on_both_halves(self):
        ds, part, model, bounds = make_world()
        cfg = RoundConfig(epochs=0, batch_size=16, master_seed=3, lr_schedule=0.05)
        v1 = init_protocol(model, "sflv1", bounds[0], 4, "sgd", 0.05)
        advance(v1, ds, part, cfg, 2)
        assert np.array_equal(v1.global_model().flatten_params(),
                              model.flatten_params())

    def test_equivalence_survives_lr_schedule(self):
        ds, part, model, bounds = make_world(partition="dirichlet")
        cfg = RoundConfig(epochs=1, batch_size=16, master_seed=3,
                          lr_schedule=[0.08, 0.04, 0.02])
        v1 = init_protocol(model, "sflv1", bounds[1], 4, "sgd", 0.08)
        fed = init_protocol(model, "fedavg", None, 4, "sgd", 0.08)
        for t in range(4):  # one round past the table: last rate persists
            run_round(v1, ds, part, cfg, t)
            run_round(fed, ds, part, cfg, t)
        assert np.array_equal(v1.global_model().flatten_params(),
                              fed.global_model().flatten_params())


class TestRoundConfig:
    def test_scalar_rate(self):
        cfg = RoundConfig(epochs=1, batch_size=8, master_seed=0, lr_schedule=0.3)
        assert cfg.lr_at(0) == cfg.lr_at(100) == 0.3

    def test_table_with_persistence_past_the_end(self):
        cfg = RoundConfig(epochs=1, batch_size=8, master_seed=0,
                          lr_schedule=[0.3, 0.1])
        assert cfg.lr_at(0) == 0.3
        assert cfg.lr_at(1) == 0.1
        assert cfg.lr_at(5) == 0.1

    def test_empty_table_rejected(self):
        cfg = RoundConfig(epochs=1, batch_size=8, master_seed=0, lr_schedule=[])
        with pytest.raises(ValueError):
            cfg.lr_at(0)


class TestSflV2:
    def test_single_client_equals_v1(self):
        ds, part, model, bounds = make_world(k_clients=1)
        cfg = RoundConfig(epochs=2, batch_size=16, master_seed=3, lr_schedule=0.05)
        v1 = init_protocol(model, "sflv1", bounds[1], 1, "sgd", 0.05)
        v2 = init_protocol(model, "sflv2", bounds[1], 1, "sgd", 0.05)
        for t in range(3):
            run_round(v1, ds, part, cfg, t)
            run_round(v2, ds, part, cfg, t)
        assert np.array_equal(v1.global_model().flatten_params(),
                              v2.global_model().flatten_params())

    def test_limit_cut_l_reduces_to_fedavg(self):
        ds, part, model, _ = make_world()  # equal client sizes: no wrap-around
        cfg = RoundConfig(epochs=2, batch_size=16, master_seed=3, lr_schedule=0.05)
        v2 = init_protocol(model, "sflv2", len(model), 4, "sgd", 0.05,
                           allow_limit_cuts=True)
        fed = init_protocol(model, "fedavg", None, 4, "sgd", 0.05)
        for t in range(3):
            run_round(v2, ds, part, cfg, t)
            run_round(fed, ds, part, cfg, t)
            dev = np.max(np.abs(v2.global_model().flatten_params()
                                - fed.global_model().flatten_params()))
            assert dev <= 1e-12

    def test_limit_cut_zero_reduces_to_interleaved_centralized(self):
        ds, part, model, _ = make_world(partition="dirichlet")
        cfg = RoundConfig(epochs=2, batch_size=16, master_seed=3, lr_schedule=0.05)
        v2 = init_protocol(model, "sflv2", 0, 4, "sgd", 0.05, allow_limit_cuts=True)

        # centralized oracle consuming the same permuted interleaved stream
        ref = model.clone()
        opt = make_optimizer("sgd", 0.05)
        for t in range(3):
            run_round(v2, ds, part, cfg, t)
            streams = [round_batches(part, k, 16, 3, t, 2) for k in range(4)]
            tau_max = max(len(s) for s in streams)
            for i in range(tau_max):
                perm = seeds.rng_for(3, seeds.PERMUTE, t, i).permutation(4)
                for k in perm:
                    idx = streams[k][i % len(streams[k])]
                    logits = ref.forward(ds.features[idx])
                    _, gl = cross_entropy(logits, ds.labels[idx])
                    grads, _ = ref.backward(gl)
                    opt.step(ref.parameters(), grads)
            dev = np.max(np.abs(v2.global_model().flatten_params()
                                - ref.flatten_params()))
            assert dev <= 1e-12

    def test_permute_per_round_uses_one_permutation(self):
        ds, part, model, bounds = make_world(partition="dirichlet")
        cfg_step = RoundConfig(epochs=1, batch_size=16, master_seed=3,
                               lr_schedule=0.05, permute_per_round=False)
        cfg_round = RoundConfig(epochs=1, batch_size=16, master_seed=3,
                                lr_schedule=0.05, permute_per_round=True)
        a = init_protocol(model, "sflv2", bounds[0], 4, "sgd", 0.05)
        b = init_protocol(model, "sflv2", bounds[0], 4, "sgd", 0.05)
        advance(a, ds, part, cfg_step, 2)
        advance(b, ds, part, cfg_round, 2)
        # different interleavings visit the shared server in different orders
        assert not np.array_equal(a.global_model().flatten_params(),
                                  b.global_model().flatten_params())

    def test_zero_epochs_identity(self):
        ds, part, model, bounds = make_world()
        cfg = RoundConfig(epochs=0, batch_size=16, master_seed=3, lr_schedule=0.05)
        v2 = init_protocol(model, "sflv2", bounds[0], 4, "sgd", 0.05)
        advance(v2, ds, part, cfg, 2)
        assert np.array_equal(v2.global_model().flatten_params(),
                              model.flatten_params())


class TestVanillaSl:
    def test_single_client_equals_v1(self):
        ds, part, model, bounds = make_world(k_clients=1)
        cfg = RoundConfig(epochs=2, batch_size=16, master_seed=3, lr_schedule=0.05)
        sl = init_protocol(model, "sl", bounds[1], 1, "sgd", 0.05)
        v1 = init_protocol(model, "sflv1", bounds[1], 1, "sgd", 0.05)
        for t in range(3):
            run_round(sl, ds, part, cfg, t)
            run_round(v1, ds, part, cfg, t)
        assert np.array_equal(sl.global_model().flatten_params(),
                              v1.global_model().flatten_params())

    def test_zero_epochs_identity(self):
        ds, part, model, bounds = make_world()
        cfg = RoundConfig(epochs=0, batch_size=16, master_seed=3, lr_schedule=0.05)
        sl = init_protocol(model, "sl", bounds[1], 4, "sgd", 0.05)
        advance(sl, ds, part, cfg, 2)
        assert np.array_equal(sl.global_model().flatten_params(),
                              model.flatten_params())

    def test_relay_preserves_parameter_count(self):
        ds, part, model, bounds = make_world()
        cfg = RoundConfig(epochs=1, batch_size=16, master_seed=3, lr_schedule=0.05)
        sl = init_protocol(model, "sl", bounds[0], 4, "sgd", 0.05)
        before = sl.relay.size
        advance(sl, ds, part, cfg, 2)
        assert sl.relay.size == before
        assert sl.global_model().param_count == model.param_count

    def test_catastrophic_forgetting_direction(self):
        # two clients with disjoint label sets: after the second client's
        # turn, the first client's loss grows relative to right after its own
        # turn, in most seeds
        wins = 0
        for seed in range(5):
            ds = gen_synthetic(4, 8, 40, 2.5, seed=seed)
            first = np.flatnonzero(ds.labels < 2)
            second = np.flatnonzero(ds.labels >= 2)
            part = Partition([first, second])
            model, bounds = build_mlp((8,), (16, 16, 16), 4)
            model.init_params(seed)
            cfg = RoundConfig(epochs=2, batch_size=16, master_seed=seed,
                              lr_schedule=0.05)
            sl = init_protocol(model, "sl", bounds[1], 2, "sgd", 0.05)
            client0_ds = Dataset(ds.features[first], ds.labels[first], 4)
            after_turn = final = None
            for t in range(6):
                sl.relay, _ = run_sl_round([sl.clients[0]], sl.ts, sl.relay,
                                           ds, part, cfg, t)
                after_turn, _ = evaluate(sl.global_model(), client0_ds)
                sl.relay, _ = run_sl_round([sl.clients[1]], sl.ts, sl.relay,
                                           ds, part, cfg, t)
                final, _ = evaluate(sl.global_model(), client0_ds)
            if final > after_turn:
                wins += 1
        assert wins >= 4


class TestCentralized:
    def test_round_runs_and_learns(self):
        ds, part, model, _ = make_world()
        state = init_protocol(model, "centralized", None, 1, "sgd", 0.05)
        cfg = RoundConfig(epochs=2, batch_size=16, master_seed=3, lr_schedule=0.05)
        losses = advance(state, ds, part, cfg, 5)
        assert losses[-1] < losses[0]


class TestCommCost:
    @pytest.mark.parametrize("variant", ["fedavg", "sl", "sflv1", "sflv2"])
    @pytest.mark.parametrize("cut_block", [1, 2, 3])
    def test_closed_form_matches_instrumented_run(self, variant, cut_block):
        # uneven dirichlet partition with short batches stresses wrap-around
        ds, part, model, bounds = make_world(partition="dirichlet", per_class=30,
                                             min_samples=5)
        cut = bounds[cut_block - 1] if variant != "fedavg" else len(model)
        profile = payload_profile(_split_unchecked(model, cut))
        cfg = RoundConfig(epochs=2, batch_size=16, master_seed=3, lr_schedule=0.05)
        state = init_protocol(model, variant,
                              cut if variant != "fedavg" else None,
                              4, "sgd", 0.05)
        predicted = comm_cost(variant, part, profile, cfg.epochs, cfg.batch_size)
        for t in range(2):
            measured = CommLedger.empty(4)
            run_round(state, ds, part, cfg, t, meter=measured)
            assert measured.uplink == predicted.uplink
            assert measured.downlink == predicted.downlink

    def test_fedavg_has_no_activation_traffic(self):
        ds, part, model, _ = make_world()
        profile = payload_profile(_split_unchecked(model, len(model)))
        ledger = comm_cost("fedavg", part, profile, 2, 16)
        for row in ledger.uplink:
            assert row["activation"] == 0
            assert row["weight-sync"] == model.param_count

    def test_hand_arithmetic_full_batches(self):
        # 5 steps of 64 samples at 8 activation elements: 5*64*8 uplink
        # activations plus 5*64 label elements
        ds = gen_synthetic(2, 4, 160, 1.0, seed=0)  # N=320 -> one client D=320
        part = partition_iid(ds, 1, seed=0)
        model, bounds = build_mlp((4,), (8, 8, 8), 2)
        profile = payload_profile(_split_unchecked(model, bounds[0]))
        assert profile.activation_elems == 8
        ledger = comm_cost("sflv2", part, profile, 1, 64)
        assert ledger.uplink[0]["activation"] == 5 * 64 * 8 + 5 * 64
        assert ledger.downlink[0]["activation-gradient"] == 5 * 64 * 8

    def test_v1_sync_at_least_v2__sync(self):
        ds, part, model, bounds = make_world()
        for cut in bounds[:-1]:
            profile = payload_profile(_split_unchecked(model, cut))
            v1 = comm_cost("sflv1", part, profile, 2, 16)
            v2 = comm_cost("sflv2", part, profile, 2, 16)
            for k in range(part.num_clients):
                assert v1.uplink[k]["weight-sync"] >= v2.uplink[k]["weight-sync"]

    def test_rerunning_never_changes_totals(self):
        ds, part, model, bounds = make_world(partition="dirichlet")
        profile = payload_profile(_split_unchecked(model, bounds[0]))
        a = comm_cost("sflv2", part, profile, 2, 16)
        b = comm_cost("sflv2", part, profile, 2, 16)
        assert a == b


class TestEvaluate:
    def test_constant_predictor_on_balanced_binary(self):
        ds = gen_synthetic(2, 4, 50, 1.0, seed=0)
        model, _ = build_mlp((4,), (4,), 2)
        # zero model: logits all equal, argmax ties to class 0
        _, acc = evaluate(model, ds)
        assert acc == 0.5

    def test_matches_per_sample_counting_loop(self):
        ds = gen_synthetic(3, 4, 30, 1.0, seed=1)
        model, _ = build_mlp((4,), (8,), 3)
        model.init_params(2)
        loss, acc = evaluate(model, ds)
        hits = 0
        for i in range(len(ds)):
            logits = model.forward(ds.features[i:i + 1])
            hits += int(np.argmax(logits[0]) == ds.labels[i])
        assert acc == hits / len(ds)

    def test_memorizer_reaches_perfect_train_accuracy(self):
        ds = gen_synthetic(2, 4, 10, 6.0, seed=0)  # trivially separable
        part = partition_iid(ds, 1, seed=0)
        model, _ = build_mlp((4,), (16,), 2)
        model.init_params(0)
        state = init_protocol(model, "centralized", None, 1, "adam", 0.01)
        cfg = RoundConfig(epochs=10, batch_size=8, master_seed=0, lr_schedule=0.01)
        advance(state, ds, part, cfg, 10)
        _, acc = evaluate(state.global_model(), ds)
        assert acc == 1.0
