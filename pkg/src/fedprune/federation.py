"""Federated mask-vote pruning: clients, server rounds, baselines, accounting.

Clients run in-process, but every mask that crosses the client/server
boundary is serialised to a packed frame and decoded on the other side, so
the byte counts in :class:`CommLedger` are measured, not estimated.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import masking
from .errors import InputDomainError, ProtocolError
from .masking import AggregatedMask, ComparisonGroup
from .metrics import Metric, compute_scores
from .model import PrunableModel, apply_mask_inplace, forward_partial

THREADS_ENV = "FEDPRUNE_THREADS"


class Strategy(str, Enum):
    ONESHOT = "oneshot"
    ITERATIVE = "iterative"

    @classmethod
    def parse(cls, name) -> "Strategy":
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("-", "").replace("_", "")
        try:
            return cls(key)
        except ValueError:
            raise InputDomainError(f"unknown strategy {name!r}; expected oneshot or iterative") from None


@dataclass
class PruneConfig:
    sparsity: float = 0.5
    metric: Metric = Metric.WANDA
    local_group: ComparisonGroup = ComparisonGroup.ROW
    server_group: ComparisonGroup = ComparisonGroup.LAYER
    strategy: Strategy = Strategy.ONESHOT
    scaling: bool = False
    clients: int = 1
    seed: int = 0
    ria_alpha: float = 0.5
    sparsegpt_lambda: str = "mean_diag"

    def __post_init__(self):
        self.metric = Metric.parse(self.metric)
        self.local_group = ComparisonGroup.parse(self.local_group)
        self.server_group = ComparisonGroup.parse(self.server_group)
        self.strategy = Strategy.parse(self.strategy)
        self.scaling = bool(self.scaling)
        if not 0.0 <= self.sparsity <= 1.0:
            raise InputDomainError(f"sparsity must lie in [0, 1], got {self.sparsity}")
        if int(self.clients) != self.clients or self.clients < 1:
            raise InputDomainError(f"client count must be a positive integer, got {self.clients}")


@dataclass
class ClientState:
    client_id: int
    calibration: np.ndarray  # private token samples, (n_samples, sample_len)
    model_copy: PrunableModel | None = None

    def __post_init__(self):
        self.calibration = np.asarray(self.calibration)
        if self.calibration.size == 0:
            raise InputDomainError(f"client {self.client_id} has no calibration data")


@dataclass
class CommLedger:
    """Payload bits follow the closed forms; bytes include frame headers and padding."""

    uplink_bits: int = 0
    downlink_bits: int = 0
    rounds: int = 0
    uplink_bytes: int = 0
    downlink_bytes: int = 0


@dataclass
class PruneOutcome:
    model: PrunableModel
    masks: list[np.ndarray]
    votes: list[AggregatedMask] | None = None
    ledger: CommLedger | None = None
    client_masks: list[list[np.ndarray]] | None = None  # [client][layer]


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _map(fn: Callable, items: Sequence, threads: int | None = None) -> list:
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def layer_mask(model: PrunableModel, layer_index: int, activations: np.ndarray,
               config: PruneConfig) -> np.ndarray:
    """Score one layer from its calibration inputs and select the local mask."""
    W = model.layers[layer_index].weights
    scores = compute_scores(config.metric, W, activations, ria_alpha=config.ria_alpha,
                            sparsegpt_lambda=config.sparsegpt_lambda)
    return masking.mask_from_scores(scores, config.sparsity, config.local_group)


def prune_layerwise(model: PrunableModel, calibration, config: PruneConfig) -> list[np.ndarray]:
    """Score, mask and prune ``model`` in place, one layer at a time.

    Layer ``l + 1`` is scored on activations that already pass through the
    pruned layer ``l``.
    """
    x = model.embed(calibration)
    masks = []
    for layer in model.layers:
        mask = layer_mask(model, layer.layer_index, x, config)
        apply_mask_inplace(layer, mask)
        masks.append(mask)
        x = forward_partial(model, x, layer.layer_index)
    return masks


def client_local_masks_oneshot(client: ClientState, config: PruneConfig) -> list[np.ndarray]:
    """All of a client's layer masks, propagating through its own pruned copy."""
    if client.model_copy is None:
        raise InputDomainError(f"client {client.client_id} has no model copy")
    return prune_layerwise(client.model_copy, client.calibration, config)


def _check_clients(global_model: PrunableModel, clients: Sequence[ClientState], config: PruneConfig):
    if len(clients) != config.clients:
        raise InputDomainError(f"config expects {config.clients} clients, got {len(clients)}")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise InputDomainError("client ids must be unique")
    for c in clients:
        c.model_copy = global_model.copy()


def _server_select(global_model: PrunableModel, layer_index: int, frames: Sequence[bytes],
                   config: PruneConfig) -> tuple[np.ndarray, AggregatedMask]:
    """Decode client uploads for one layer, vote, and prune the global layer."""
    layer = global_model.layers[layer_index]
    masks = []
    for frame in frames:
        idx, cid, mask = masking.decode_mask_frame(frame)
        if idx != layer_index or mask.shape != layer.weights.shape:
            raise ProtocolError(
                f"client {cid} sent layer {idx} mask {mask.shape}; server expects layer "
                f"{layer_index} {layer.weights.shape}"
            )
        masks.append(mask)
    agg = masking.aggregate_masks(masks)
    final = masking.select_final_mask(agg, config.sparsity, config.server_group)
    apply_mask_inplace(layer, final)
    if config.scaling:
        layer.weights = masking.scale_retained(layer.weights, agg, final)
    return final, agg


def run_oneshot(global_model: PrunableModel, clients: Sequence[ClientState], config: PruneConfig,
                threads: int | None = None) -> PruneOutcome:
    """Clients prune all layers locally and upload every mask in a single round."""
    _check_clients(global_model, clients, config)
    ledger = CommLedger(rounds=1)

    def local(client):
        masks = client_local_masks_oneshot(client, config)
        return masks, [masking.encode_mask_frame(mk, l, client.client_id) for l, mk in enumerate(masks)]

    uploads = _map(local, list(clients), threads)
    for _, frames in uploads:
        for frame, layer in zip(frames, global_model.layers):
            ledger.uplink_bits += layer.weights.size
            ledger.uplink_bytes += len(frame)

    pruned = global_model.copy()
    finals, votes = [], []
    for l in range(pruned.num_layers):
        final, agg = _server_select(pruned, l, [frames[l] for _, frames in uploads], config)
        finals.append(final)
        votes.append(agg)
    return PruneOutcome(pruned, finals, votes, ledger, [masks for masks, _ in uploads])


def run_iterative(global_model: PrunableModel, clients: Sequence[ClientState], config: PruneConfig,
                  threads: int | None = None) -> PruneOutcome:
    """One upload/aggregate/broadcast round per layer.

    Clients overwrite their copy of each layer with the broadcast mask (and,
    with scaling on, the broadcast vote counts) before propagating.
    """
    _check_clients(global_model, clients, config)
    m = config.clients
    ledger = CommLedger()
    pruned = global_model.copy()
    acts = _map(lambda c: c.model_copy.embed(c.calibration), list(clients), threads)
    client_masks = [[] for _ in clients]
    finals, votes = [], []

    for l, layer in enumerate(pruned.layers):
        ledger.rounds += 1

        def local(i):
            c = clients[i]
            mask = layer_mask(c.model_copy, l, acts[i], config)
            return mask, masking.encode_mask_frame(mask, l, c.client_id)

        uploads = _map(local, range(len(clients)), threads)
        for i, (mask, frame) in enumerate(uploads):
            client_masks[i].append(mask)
            ledger.uplink_bits += layer.weights.size
            ledger.uplink_bytes += len(frame)

        final, agg = _server_select(pruned, l, [f for _, f in uploads], config)
        finals.append(final)
        votes.append(agg)

        mask_frame = masking.encode_mask_frame(final, l, masking.SERVER_ID)
        votes_frame = masking.encode_votes_frame(agg.votes, m, l) if config.scaling else None
        ledger.downlink_bits += m * layer.weights.size
        ledger.downlink_bytes += m * len(mask_frame)
        if votes_frame is not None:
            ledger.downlink_bits += m * layer.weights.size * masking.vote_width(m)
            ledger.downlink_bytes += m * len(votes_frame)

        def receive(i):
            c = clients[i]
            _, _, mask = masking.decode_mask_frame(mask_frame)
            local_layer = c.model_copy.layers[l]
            apply_mask_inplace(local_layer, mask)
            if votes_frame is not None:
                _, v = masking.decode_votes_frame(votes_frame, m)
                local_layer.weights = masking.scale_retained(local_layer.weights, AggregatedMask(v, m), mask)
            return forward_partial(c.model_copy, acts[i], l)

        acts = _map(receive, range(len(clients)), threads)

    return PruneOutcome(pruned, finals, votes, ledger, client_masks)


def run_fedprllm(global_model: PrunableModel, clients: Sequence[ClientState], config: PruneConfig,
                 threads: int | None = None) -> PruneOutcome:
    runner = run_oneshot if config.strategy is Strategy.ONESHOT else run_iterative
    return runner(global_model, clients, config, threads)


def run_centralized(global_model: PrunableModel, pooled_calibration, config: PruneConfig) -> PruneOutcome:
    """Single pruner with every calibration sample (the upper-bound baseline)."""
    pruned = global_model.copy()
    masks = prune_layerwise(pruned, pooled_calibration, config)
    return PruneOutcome(pruned, masks)


def run_local_only(global_model: PrunableModel, clients: Sequence[ClientState], config: PruneConfig,
                   threads: int | None = None) -> list[PruneOutcome]:
    """Every client prunes its own copy with its own shard; nothing is shared."""
    return _map(lambda c: run_centralized(global_model, c.calibration, config), list(clients), threads)


def make_clients(shards: Sequence[np.ndarray]) -> list[ClientState]:
    return [ClientState(i, shard) for i, shard in enumerate(shards)]


def expected_ledger(layer_shapes: Sequence[tuple[int, int]], m: int, strategy, scaling: bool) -> CommLedger:
    """Closed-form payload accounting (bits only; bytes left at 0)."""
    entries = sum(r * c for r, c in layer_shapes)
    if Strategy.parse(strategy) is Strategy.ONESHOT:
        return CommLedger(uplink_bits=m * entries, downlink_bits=0, rounds=1)
    down = m * entries * (1 + (masking.vote_width(m) if scaling else 0))
    return CommLedger(uplink_bits=m * entries, downlink_bits=down, rounds=len(layer_shapes))
