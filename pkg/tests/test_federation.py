import numpy as np
import pytest

from fedprune import masking
from fedprune.errors import InputDomainError, ProtocolError
from fedprune.federation import (ClientState, PruneConfig, _map, _server_select, expected_ledger, make_clients,
                                 run_centralized, run_fedprllm, run_iterative, run_local_only, run_oneshot,
                                 thread_count)
from fedprune.masking import aggregate_masks, select_final_mask
from fedprune.metrics import score_wanda
from fedprune.model import forward_with_trace
from fedprune.verify import random_setup

DIMS = [6, 10, 8, 7]


def test_config_validation():
    with pytest.raises(InputDomainError):
        PruneConfig(sparsity=1.2)
    with pytest.raises(InputDomainError):
        PruneConfig(clients=0)
    with pytest.raises(InputDomainError):
        PruneConfig(metric="nope")
    assert PruneConfig(strategy="ITERATIVE").strategy.value == "iterative"


def test_client_needs_data():
    with pytest.raises(InputDomainError):
        ClientState(0, np.zeros((0, 4), dtype=int))


def test_client_count_mismatch():
    model, _, shards = random_setup(0, DIMS)
    with pytest.raises(InputDomainError):
        run_oneshot(model, make_clients(shards), PruneConfig(clients=2))


def test_global_model_untouched():
    model, _, shards = random_setup(1, DIMS)
    before = [l.weights.copy() for l in model.layers]
    run_iterative(model, make_clients(shards), PruneConfig(clients=3, scaling=True))
    run_oneshot(model, make_clients(shards), PruneConfig(clients=3, scaling=True))
    assert all(np.array_equal(a, l.weights) for a, l in zip(before, model.layers))


@pytest.mark.parametrize("strategy", ["oneshot", "iterative"])
def test_final_mask_is_vote_of_client_masks(strategy):
    model, _, shards = random_setup(2, DIMS)
    config = PruneConfig(clients=3, strategy=strategy, local_group="row", server_group="column")
    out = run_fedprllm(model, make_clients(shards), config)
    for l, final in enumerate(out.masks):
        agg = aggregate_masks([cm[l] for cm in out.client_masks])
        np.testing.assert_array_equal(agg.votes, out.votes[l].votes)
        np.testing.assert_array_equal(final, select_final_mask(agg, 0.5, "column"))
        assert np.all(out.model.layers[l].weights[final == 1] == 0)


def test_oneshot_first_layer_masks_come_from_embedding_norms():
    model, _, shards = random_setup(3, DIMS)
    out = run_oneshot(model, make_clients(shards), PruneConfig(clients=3))
    for shard, cm in zip(shards, out.client_masks):
        X = model.embed(shard)
        expect = masking.mask_from_scores(score_wanda(model.layers[0].weights,
                                                      np.sqrt((X ** 2).sum(axis=0))), 0.5, "row")
        np.testing.assert_array_equal(cm[0], expect)


def test_pooled_norm_additivity():
    model, samples, shards = random_setup(4, DIMS)
    pooled = np.sum(model.embed(samples) ** 2, axis=0)
    parts = sum(np.sum(model.embed(s) ** 2, axis=0) for s in shards)
    np.testing.assert_allclose(pooled, parts, rtol=1e-12)


def test_client_order_does_not_change_result():
    model, _, shards = random_setup(5, DIMS, m=4, n_samples=8)
    clients = make_clients(shards)
    reordered = [ClientState(c.client_id, c.calibration) for c in clients[::-1]]
    for strategy in ("oneshot", "iterative"):
        config = PruneConfig(clients=4, strategy=strategy, scaling=True)
        a = run_fedprllm(model, clients, config)
        b = run_fedprllm(model, reordered, config)
        assert all(np.array_equal(x, y) for x, y in zip(a.masks, b.masks))
        assert all(np.array_equal(x.weights, y.weights) for x, y in zip(a.model.layers, b.model.layers))


def test_local_only_clients_are_independent():
    model, _, shards = random_setup(6, DIMS)
    config = PruneConfig(clients=3)
    base = run_local_only(model, make_clients(shards), config)
    perturbed = [s.copy() for s in shards]
    perturbed[1] = (perturbed[1] + 1) % 12
    other = run_local_only(model, make_clients(perturbed), config)
    for i in (0, 2):
        assert all(np.array_equal(a, b) for a, b in zip(base[i].masks, other[i].masks))


def test_centralized_matches_layerwise_definition():
    model, samples, _ = random_setup(7, DIMS)
    out = run_centralized(model, samples, PruneConfig())
    # layer 2 is scored on activations of the model pruned up to layer 1
    _, trace = forward_with_trace(out.model, samples)
    W = model.layers[2].weights
    expect = masking.mask_from_scores(score_wanda(W, np.sqrt((trace[2] ** 2).sum(axis=0))), 0.5, "row")
    np.testing.assert_array_equal(out.masks[2], expect)


def test_iterative_clients_score_on_broadcast_model():
    model, _, shards = random_setup(8, DIMS)
    config = PruneConfig(clients=3, strategy="iterative", scaling=True)
    out = run_iterative(model, make_clients(shards), config)
    for shard, cm in zip(shards, out.client_masks):
        _, trace = forward_with_trace(out.model, shard)
        W = model.layers[1].weights
        expect = masking.mask_from_scores(score_wanda(W, np.sqrt((trace[1] ** 2).sum(axis=0))), 0.5, "row")
        np.testing.assert_array_equal(cm[1], expect)


@pytest.mark.parametrize("strategy,scaling", [("oneshot", False), ("oneshot", True),
                                              ("iterative", False), ("iterative", True)])
def test_ledger_closed_form(strategy, scaling):
    model, _, shards = random_setup(9, DIMS)
    out = run_fedprllm(model, make_clients(shards), PruneConfig(clients=3, strategy=strategy, scaling=scaling))
    shapes = [l.weights.shape for l in model.layers]
    exp = expected_ledger(shapes, 3, strategy, scaling)
    assert (out.ledger.uplink_bits, out.ledger.downlink_bits, out.ledger.rounds) == \
        (exp.uplink_bits, exp.downlink_bits, exp.rounds)
    assert out.ledger.uplink_bytes == 3 * sum(16 + masking.packed_size(*s) for s in shapes)


def test_ledger_worked_example():
    led = expected_ledger([(4, 4), (4, 4)], 3, "oneshot", False)
    assert (led.uplink_bits, led.downlink_bits, led.rounds) == (96, 0, 1)
    led = expected_ledger([(4, 4), (4, 4)], 3, "iterative", False)
    assert (led.uplink_bits, led.downlink_bits, led.rounds) == (96, 96, 2)
    led = expected_ledger([(4, 4), (4, 4)], 3, "iterative", True)
    assert led.downlink_bits == 96 + 96 * 2


def test_server_rejects_mismatched_frames():
    model, _, _ = random_setup(10, DIMS)
    wrong_layer = masking.encode_mask_frame(np.zeros(model.layers[1].weights.shape, dtype=np.uint8), 1, 0)
    with pytest.raises(ProtocolError):
        _server_select(model.copy(), 0, [wrong_layer], PruneConfig())
    wrong_shape = masking.encode_mask_frame(np.zeros((2, 2), dtype=np.uint8), 0, 0)
    with pytest.raises(ProtocolError):
        _server_select(model.copy(), 0, [wrong_shape], PruneConfig())


def test_thread_map(monkeypatch):
    assert _map(lambda x: x * 2, [1, 2, 3], threads=3) == [2, 4, 6]
    monkeypatch.setenv("FEDPRUNE_THREADS", "4")
    assert thread_count() == 4
    monkeypatch.setenv("FEDPRUNE_THREADS", "junk")
    assert thread_count() == 1
