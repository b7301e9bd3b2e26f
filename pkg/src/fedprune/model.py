"""Layered prunable model: embedding -> dense stack -> linear head.

Matrices are plain float64 numpy arrays. Layer weights are stored as
``(d_out, d_in)`` and applied to row-major activations as ``X @ W.T``, so a
calibration trace entry has shape ``(tokens, d_in)``.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, InputDomainError, ShapeError

CHECKPOINT_FORMAT = "fedprune-model"
CHECKPOINT_VERSION = 1


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def identity(x: np.ndarray) -> np.ndarray:
    return x


NONLINEARITIES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": relu,
    "identity": identity,
}


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate ``a`` as a finite 2-D float64 array and return it."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputDomainError(f"{name} contains non-finite values")
    return m


@dataclass
class LinearLayer:
    weights: np.ndarray
    layer_index: int

    def __post_init__(self):
        self.weights = as_matrix(self.weights, f"layer {self.layer_index} weights")
        if min(self.weights.shape) < 1:
            raise ShapeError(f"layer {self.layer_index} has an empty dimension")

    @property
    def d_out(self) -> int:
        return self.weights.shape[0]

    @property
    def d_in(self) -> int:
        return self.weights.shape[1]


@dataclass
class PrunableModel:
    """Token embedding, prunable dense layers and a fixed output head.

    The nonlinearity follows every layer except the last one, which feeds
    the head directly. Embedding and head are never touched by pruning.
    """

    embedding: np.ndarray
    layers: list[LinearLayer]
    head: np.ndarray
    nonlinearity: str = "relu"
    seed: int | None = None
    _act: Callable[[np.ndarray], np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.embedding = as_matrix(self.embedding, "embedding")
        self.head = as_matrix(self.head, "head")
        if self.nonlinearity not in NONLINEARITIES:
            raise InputDomainError(f"unknown nonlinearity {self.nonlinearity!r}")
        self._act = NONLINEARITIES[self.nonlinearity]
        if not self.layers:
            raise ShapeError("model needs at least one prunable layer")
        width = self.embedding.shape[1]
        for i, layer in enumerate(self.layers):
            if layer.layer_index != i:
                raise ShapeError(f"layer indices must be contiguous from 0, got {layer.layer_index} at {i}")
            if layer.d_in != width:
                raise ShapeError(f"layer {i} expects d_in={layer.d_in}, previous width is {width}")
            width = layer.d_out
        if self.head.shape[0] != width:
            raise ShapeError(f"head expects {self.head.shape[0]} inputs, last layer emits {width}")
        if self.head.shape[1] != self.vocab_size:
            raise ShapeError("head output size must equal vocabulary size")

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> list[int]:
        """Widths ``[d_0, d_1, ..., d_L]`` along the stack."""
        return [self.embedding.shape[1]] + [layer.d_out for layer in self.layers]

    def copy(self) -> "PrunableModel":
        return copy.deepcopy(self)

    def activate(self, x: np.ndarray) -> np.ndarray:
        return self._act(x)

    def embed(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens)
        if ids.size == 0:
            raise InputDomainError("empty token batch")
        if not np.issubdtype(ids.dtype, np.integer):
            raise InputDomainError("token ids must be integers")
        ids = ids.reshape(-1)
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise InputDomainError(f"token id out of range [0, {self.vocab_size})")
        return self.embedding[ids]

    def forward(self, tokens) -> np.ndarray:
        logits, _ = forward_with_trace(self, tokens)
        return logits


def init_model(dims: Sequence[int], vocab_size: int, seed: int, nonlinearity: str = "relu") -> PrunableModel:
    """Seeded Gaussian init scaled by 1/sqrt(fan_in).

    ``dims`` is ``[d_0, d_1, ..., d_L]``: the embedding width followed by the
    output width of each prunable layer.
    """
    if len(dims) < 2:
        raise ShapeError("dims needs an embedding width and at least one layer width")
    if vocab_size < 2 or min(dims) < 1:
        raise InputDomainError("vocab_size must be >= 2 and all dims >= 1")
    rng = np.random.default_rng(seed)
    embedding = rng.standard_normal((vocab_size, dims[0]))
    layers = [
        LinearLayer(rng.standard_normal((d_out, d_in)) / np.sqrt(d_in), i)
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:]))
    ]
    head = rng.standard_normal((dims[-1], vocab_size)) / np.sqrt(dims[-1])
    return PrunableModel(embedding, layers, head, nonlinearity=nonlinearity, seed=seed)


def forward_with_trace(model: PrunableModel, tokens) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run the full model and record the input fed to every prunable layer.

    ``tokens`` may have any shape; it is flattened row-major, one activation
    row per token.
    """
    x = model.embed(tokens)
    trace = []
    for layer in model.layers:
        trace.append(x)
        x = forward_partial(model, x, layer.layer_index)
    return x @ model.head, trace


def forward_partial(model: PrunableModel, trace_entry: np.ndarray, from_layer: int) -> np.ndarray:
    """Push ``trace_entry`` through layer ``from_layer`` only."""
    if not 0 <= from_layer < model.num_layers:
        raise InputDomainError(f"layer index {from_layer} out of range")
    layer = model.layers[from_layer]
    x = np.asarray(trace_entry, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.d_in:
        raise ShapeError(f"layer {from_layer} expects (tokens, {layer.d_in}), got {x.shape}")
    out = x @ layer.weights.T
    if from_layer < model.num_layers - 1:
        out = model.activate(out)
    return out


def apply_mask_inplace(layer: LinearLayer, mask: np.ndarray) -> None:
    """Zero the entries marked 1 in ``mask``; other entries are left untouched."""
    mask = np.asarray(mask)
    if mask.shape != layer.weights.shape:
        raise ShapeError(f"mask shape {mask.shape} != weight shape {layer.weights.shape}")
    layer.weights[mask.astype(bool)] = 0.0


def save_model(model: PrunableModel, path: str | Path) -> None:
    """Write a JSON checkpoint.

    Layout::

        {"format": "fedprune-model", "version": 1, "seed": int | null,
         "nonlinearity": "relu", "dims": [d_0, ..., d_L], "vocab_size": V,
         "embedding": [[...]], "layers": [[[...]], ...], "head": [[...]]}

    Floats are written with ``repr`` precision, so a save/load round trip is
    bit-exact.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "nonlinearity": model.nonlinearity,
        "dims": model.dims,
        "vocab_size": model.vocab_size,
        "embedding": model.embedding.tolist(),
        "layers": [layer.weights.tolist() for layer in model.layers],
        "head": model.head.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path: str | Path) -> PrunableModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    model = PrunableModel(
        embedding=np.array(doc["embedding"], dtype=np.float64),
        layers=[LinearLayer(np.array(w, dtype=np.float64), i) for i, w in enumerate(doc["layers"])],
        head=np.array(doc["head"], dtype=np.float64),
        nonlinearity=doc["nonlinearity"],
        seed=doc["seed"],
    )
    if model.dims != doc["dims"]:
        raise FormatError(f"{path}: dims field disagrees with stored weights")
    return model
