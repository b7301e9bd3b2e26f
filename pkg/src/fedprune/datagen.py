"""Synthetic corpora, reference-model training and calibration sharding."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InputDomainError, NumericalError
from .model import PrunableModel, init_model

CORPUS_FORMAT = "fedprune-corpus"


@dataclass
class Corpus:
    vocab_size: int
    samples: np.ndarray  # (n_samples, sample_len) int64
    splits: dict[str, np.ndarray] = field(default_factory=dict)  # name -> sample indices
    seed: int | None = None
    transition: np.ndarray | None = None

    def split(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise InputDomainError(f"corpus has no {name!r} split (have {sorted(self.splits)})")
        return self.samples[self.splits[name]]


def markov_transition(vocab: int, seed: int, concentration: float = 0.3,
                      communities: int = 1, leak: float = 0.0) -> np.ndarray:
    """Seeded row-stochastic matrix with Dirichlet rows.

    Small ``concentration`` gives peaked rows. With ``communities > 1`` the
    vocabulary is cut into contiguous blocks and each row puts ``1 - leak``
    of its mass inside its own block, so a short sequence tends to stay in
    one region of the vocabulary.
    """
    if not 1 <= communities <= vocab or not 0.0 <= leak <= 1.0:
        raise InputDomainError("need 1 <= communities <= vocab and 0 <= leak <= 1")
    rng = np.random.default_rng([seed, 1])
    base = rng.dirichlet(np.full(vocab, concentration), size=vocab)
    if communities == 1:
        return base
    block = np.arange(vocab) * communities // vocab
    inside = np.zeros((vocab, vocab))
    for b in range(communities):
        idx = np.flatnonzero(block == b)
        inside[np.ix_(idx, idx)] = rng.dirichlet(np.full(len(idx), concentration), size=len(idx))
    return (1.0 - leak) * inside + leak * base


def generate_corpus(vocab: int, n_samples: int, sample_len: int, seed: int,
                    split: dict[str, int] | None = None, *,
                    transition: np.ndarray | None = None,
                    concentration: float = 0.3, communities: int = 1,
                    leak: float = 0.0) -> Corpus:
    """Sample ``n_samples`` sequences from a seeded order-1 Markov chain.

    ``split`` maps split names to sample counts (consecutive blocks, in the
    given order); by default every sample is tagged ``calibration``.
    """
    if vocab < 2 or sample_len < 2 or n_samples < 1:
        raise InputDomainError("need vocab >= 2, sample_len >= 2 and n_samples >= 1")
    if transition is None:
        transition = markov_transition(vocab, seed, concentration, communities, leak)
    transition = np.asarray(transition, dtype=np.float64)
    if transition.shape != (vocab, vocab) or np.any(transition < 0) \
            or not np.allclose(transition.sum(axis=1), 1.0):
        raise InputDomainError("transition must be a row-stochastic vocab x vocab matrix")
    split = split or {"calibration": n_samples}
    if sum(split.values()) != n_samples or min(split.values()) < 0:
        raise InputDomainError(f"split counts {split} do not sum to {n_samples}")

    rng = np.random.default_rng([seed, 2])
    cdf = np.cumsum(transition, axis=1)
    tokens = np.empty((n_samples, sample_len), dtype=np.int64)
    tokens[:, 0] = rng.integers(0, vocab, size=n_samples)
    u = rng.random((n_samples, sample_len - 1))
    for t in range(1, sample_len):
        row = cdf[tokens[:, t - 1]]
        nxt = (u[:, t - 1, None] >= row).sum(axis=1)
        tokens[:, t] = np.minimum(nxt, vocab - 1)

    splits, start = {}, 0
    for name, count in split.items():
        splits[name] = np.arange(start, start + count)
        start += count
    return Corpus(vocab, tokens, splits, seed, transition)


def dump_corpus(corpus: Corpus, path: str | Path) -> None:
    doc = {
        "format": CORPUS_FORMAT,
        "vocab": corpus.vocab_size,
        "seed": corpus.seed,
        "samples": corpus.samples.tolist(),
        "splits": {k: v.tolist() for k, v in corpus.splits.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_corpus(path: str | Path) -> Corpus:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CORPUS_FORMAT:
        raise FormatError(f"{path}: not a corpus dump")
    samples = np.array(doc["samples"], dtype=np.int64)
    if samples.size and (samples.min() < 0 or samples.max() >= doc["vocab"]):
        raise FormatError(f"{path}: token outside vocabulary")
    splits = {k: np.array(v, dtype=np.int64) for k, v in doc["splits"].items()}
    return Corpus(doc["vocab"], samples, splits, doc["seed"])


def bigram_counts(samples, vocab: int) -> np.ndarray:
    s = np.asarray(samples)
    counts = np.zeros((vocab, vocab))
    np.add.at(counts, (s[:, :-1].ravel(), s[:, 1:].ravel()), 1.0)
    return counts


def bigram_loss_and_grads(model: PrunableModel, counts: np.ndarray):
    """Mean next-token cross-entropy over a corpus summarised by its bigram counts.

    The model sees one token of context, so the loss over every token
    position equals this count-weighted loss over the vocabulary: a
    full-batch step at the cost of ``vocab`` forward rows.
    Returns ``(loss, grad_embedding, [grad_W_l], grad_head)``.
    """
    n = counts.sum()
    hs, zs = [model.embedding], []
    h = model.embedding
    last = model.num_layers - 1
    for i, layer in enumerate(model.layers):
        z = h @ layer.weights.T
        zs.append(z)
        h = np.maximum(z, 0.0) if i < last else z
        hs.append(h)
    logits = h @ model.head
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    loss = -(counts * logp).sum() / n

    g = (np.exp(logp) * counts.sum(axis=1, keepdims=True) - counts) / n
    g_head = hs[-1].T @ g
    g_h = g @ model.head.T
    g_layers = [None] * model.num_layers
    for i in range(last, -1, -1):
        g_z = g_h if i == last else g_h * (zs[i] > 0)
        g_layers[i] = g_z.T @ hs[i]
        g_h = g_z @ model.layers[i].weights
    return loss, g_h, g_layers, g_head


def fit(model: PrunableModel, counts: np.ndarray, epochs: int, lr: float) -> list[float]:
    """Full-batch gradient descent in place; returns the loss before each step."""
    if model.nonlinearity != "relu":
        raise InputDomainError("training supports the relu nonlinearity only")
    losses = []
    for epoch in range(epochs):
        loss, g_emb, g_layers, g_head = bigram_loss_and_grads(model, counts)
        if not np.isfinite(loss):
            raise NumericalError(f"training diverged at epoch {epoch} (loss={loss}); lower the step size")
        losses.append(float(loss))
        model.embedding -= lr * g_emb
        for layer, g in zip(model.layers, g_layers):
            layer.weights -= lr * g
        model.head -= lr * g_head
    return losses


def train_reference_model(corpus: Corpus, dims: Sequence[int], epochs: int, seed: int,
                          lr: float = 0.5, split: str = "train") -> PrunableModel:
    """Seeded init followed by ``epochs`` of full-batch gradient descent on ``split``."""
    model = init_model(dims, corpus.vocab_size, seed)
    if epochs > 0:
        counts = bigram_counts(corpus.split(split), corpus.vocab_size)
        fit(model, counts, epochs, lr)
        for name, mat in [("embedding", model.embedding), ("head", model.head)] + \
                [(f"layer {l.layer_index}", l.weights) for l in model.layers]:
            if not np.all(np.isfinite(mat)):
                raise NumericalError(f"training produced non-finite {name} weights")
    return model


def partition(samples, m: int, seed: int) -> list[np.ndarray]:
    """Deal a seeded shuffle of ``samples`` round-robin into ``m`` disjoint shards."""
    samples = np.asarray(samples)
    n = len(samples)
    if m < 1:
        raise InputDomainError("need at least one client")
    if m > n:
        raise InputDomainError(f"cannot split {n} samples across {m} clients")
    order = np.random.default_rng([seed, 3]).permutation(n)
    return [samples[order[i::m]] for i in range(m)]
