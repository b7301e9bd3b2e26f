import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedprune.datagen import (bigram_counts, bigram_loss_and_grads, dump_corpus, fit, generate_corpus,
                              load_corpus, markov_transition, partition, train_reference_model)
from fedprune.errors import FormatError, InputDomainError
from fedprune.evaluation import perplexity
from fedprune.model import init_model


def test_corpus_shape_range_and_seeding():
    a = generate_corpus(16, 10, 20, seed=3)
    b = generate_corpus(16, 10, 20, seed=3)
    c = generate_corpus(16, 10, 20, seed=4)
    assert a.samples.shape == (10, 20)
    assert a.samples.min() >= 0 and a.samples.max() < 16
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


def test_identity_transition_gives_constant_sequences():
    corpus = generate_corpus(5, 20, 12, seed=0, transition=np.eye(5))
    assert np.all(corpus.samples == corpus.samples[:, :1])


def test_bigram_frequencies_follow_the_chain():
    P = markov_transition(6, seed=1, concentration=1.0)
    corpus = generate_corpus(6, 200, 501, seed=1, transition=P)  # 100000 transitions
    counts = bigram_counts(corpus.samples, 6)
    empirical = counts / counts.sum(axis=1, keepdims=True)
    visits = counts.sum(axis=1) / counts.sum()
    tv = 0.5 * np.sum(visits[:, None] * np.abs(empirical - P))
    assert tv <= 0.02


def test_community_blocks_hold_most_mass():
    P = markov_transition(32, seed=0, communities=4, leak=0.02)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    block = np.arange(32) * 4 // 32
    inside = (block[:, None] == block[None, :])
    assert np.all((P * inside).sum(axis=1) >= 0.98 - 1e-12)


def test_corpus_validation():
    with pytest.raises(InputDomainError):
        generate_corpus(1, 4, 4, seed=0)
    with pytest.raises(InputDomainError):
        generate_corpus(4, 4, 4, seed=0, split={"train": 3})
    with pytest.raises(InputDomainError):
        generate_corpus(3, 4, 4, seed=0, transition=np.ones((3, 3)))


def test_splits():
    corpus = generate_corpus(8, 10, 5, seed=0, split={"train": 6, "heldout": 4})
    assert corpus.split("train").shape == (6, 5)
    np.testing.assert_array_equal(corpus.split("heldout"), corpus.samples[6:])
    with pytest.raises(InputDomainError):
        corpus.split("calibration")


def test_corpus_dump_round_trip(tmp_path):
    corpus = generate_corpus(8, 6, 5, seed=2, split={"train": 4, "calibration": 2})
    path = tmp_path / "c.json"
    dump_corpus(corpus, path)
    back = load_corpus(path)
    np.testing.assert_array_equal(back.samples, corpus.samples)
    assert back.vocab_size == 8 and back.seed == 2
    np.testing.assert_array_equal(back.splits["calibration"], [4, 5])
    path.write_text('{"format": "x"}')
    with pytest.raises(FormatError):
        load_corpus(path)


def test_partition_examples():
    shards = partition(np.arange(7), 3, seed=0)
    assert sorted(len(s) for s in shards) == [2, 2, 3]
    shards = partition(np.arange(128), 64, seed=0)
    assert {len(s) for s in shards} == {2}
    with pytest.raises(InputDomainError):
        partition(np.arange(3), 4, seed=0)
    with pytest.raises(InputDomainError):
        partition(np.arange(3), 0, seed=0)


@given(st.integers(1, 200), st.integers(1, 50), st.integers(0, 2**31))
def test_partition_is_a_set_partition(n, m, seed):
    if m > n:
        return
    shards = partition(np.arange(n), m, seed)
    flat = np.concatenate(shards)
    assert sorted(flat.tolist()) == list(range(n))
    sizes = [len(s) for s in shards]
    assert max(sizes) - min(sizes) <= 1
    again = partition(np.arange(n), m, seed)
    assert all(np.array_equal(a, b) for a, b in zip(shards, again))


def test_partition_keeps_rows_intact():
    samples = np.arange(20).reshape(10, 2)
    for shard in partition(samples, 3, seed=1):
        assert np.all(shard[:, 1] == shard[:, 0] + 1)


def test_gradients_match_finite_differences():
    model = init_model([4, 5, 3], vocab_size=6, seed=1)
    corpus = generate_corpus(6, 8, 10, seed=1)
    counts = bigram_counts(corpus.samples, 6)
    _, g_emb, g_layers, g_head = bigram_loss_and_grads(model, counts)
    rng = np.random.default_rng(0)
    eps = 1e-6
    for mat, grad in [(model.embedding, g_emb), (model.layers[0].weights, g_layers[0]),
                      (model.layers[1].weights, g_layers[1]), (model.head, g_head)]:
        for _ in range(5):
            idx = tuple(rng.integers(0, d) for d in mat.shape)
            old = mat[idx]
            mat[idx] = old + eps
            up = bigram_loss_and_grads(model, counts)[0]
            mat[idx] = old - eps
            down = bigram_loss_and_grads(model, counts)[0]
            mat[idx] = old
            assert grad[idx] == pytest.approx((up - down) / (2 * eps), abs=1e-7)


def test_bigram_loss_equals_log_perplexity():
    model = init_model([4, 5, 3], vocab_size=6, seed=2)
    corpus = generate_corpus(6, 5, 9, seed=2)
    loss = bigram_loss_and_grads(model, bigram_counts(corpus.samples, 6))[0]
    assert np.exp(loss) == pytest.approx(perplexity(model, corpus.samples), rel=1e-12)


def test_zero_epochs_returns_init():
    corpus = generate_corpus(8, 6, 10, seed=0, split={"train": 6})
    trained = train_reference_model(corpus, [4, 6, 4], epochs=0, seed=9)
    fresh = init_model([4, 6, 4], 8, seed=9)
    assert all(np.array_equal(a.weights, b.weights) for a, b in zip(trained.layers, fresh.layers))
    np.testing.assert_array_equal(trained.embedding, fresh.embedding)


def test_training_beats_uniform():
    corpus = generate_corpus(16, 40, 32, seed=0, split={"train": 30, "heldout": 10})
    model = train_reference_model(corpus, [16, 32, 16], epochs=300, seed=0)
    assert perplexity(model, corpus.split("heldout")) < 16


def test_fit_losses_decrease_and_relu_only():
    corpus = generate_corpus(8, 10, 16, seed=0)
    counts = bigram_counts(corpus.samples, 8)
    model = init_model([6, 8, 6], 8, seed=0)
    losses = fit(model, counts, 50, 0.5)
    assert losses[-1] < losses[0]
    with pytest.raises(InputDomainError):
        fit(init_model([6, 8, 6], 8, seed=0, nonlinearity="identity"), counts, 1, 0.5)
