"""Quality measures for pruned models and the report/CSV schema."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .errors import InputDomainError, ShapeError
from .federation import CommLedger
from .model import PrunableModel, forward_with_trace

CSV_COLUMNS = [
    "method", "metric", "local_group", "server_group", "strategy", "scaling",
    "s", "m", "samples", "seed",
    "perplexity", "mean_recon_error", "uplink_bits", "downlink_bits", "rounds", "wall_time",
]


def perplexity(model: PrunableModel, heldout) -> float:
    """exp of the mean natural-log NLL of each next token given the current one."""
    seqs = np.asarray(heldout)
    if seqs.ndim == 1:
        seqs = seqs[None, :]
    if seqs.ndim != 2 or seqs.shape[0] == 0 or seqs.shape[1] < 2:
        raise InputDomainError("held-out batch needs at least one sequence of length >= 2")
    logits, _ = forward_with_trace(model, seqs[:, :-1])
    targets = seqs[:, 1:].reshape(-1)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(len(targets)), targets]
    return float(np.exp(nll.mean()))


def reconstruction_error(W, W_pruned, X) -> float:
    """``||(W - W_pruned) X^T||_F^2`` with X laid out as (tokens, d_in)."""
    W = np.asarray(W, dtype=np.float64)
    Wp = np.asarray(W_pruned, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if W.shape != Wp.shape or X.ndim != 2 or X.shape[1] != W.shape[1]:
        raise ShapeError(f"cannot compare W {W.shape}, W_pruned {Wp.shape} on X {X.shape}")
    diff = X @ (W - Wp).T
    return float(np.sum(diff * diff))


def realized_sparsity(model: PrunableModel) -> list[float]:
    return [float(np.count_nonzero(l.weights == 0) / l.weights.size) for l in model.layers]


def layer_recon_errors(dense: PrunableModel, pruned: PrunableModel, calibration) -> list[float]:
    """Per-layer error on the inputs each pruned layer actually receives."""
    _, trace = forward_with_trace(pruned, calibration)
    return [reconstruction_error(d.weights, p.weights, x)
            for d, p, x in zip(dense.layers, pruned.layers, trace)]


@dataclass
class PruneReport:
    method: str
    config: dict
    perplexity: float
    per_layer_recon_error: list[float]
    realized_sparsity_per_layer: list[float]
    comm: CommLedger = field(default_factory=CommLedger)
    wall_time: float = 0.0
    samples: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def mean_recon_error(self) -> float:
        return float(np.mean(self.per_layer_recon_error))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_recon_error"] = self.mean_recon_error
        return d

    def csv_row(self) -> dict:
        c = dict(self.config)
        if self.method != "fedprllm":
            c.update(server_group="", strategy="", scaling="")
        return {
            "method": self.method,
            "metric": c.get("metric", ""),
            "local_group": c.get("local_group", ""),
            "server_group": c.get("server_group", ""),
            "strategy": c.get("strategy", ""),
            "scaling": c.get("scaling", ""),
            "s": c.get("sparsity", ""),
            "m": c.get("clients", ""),
            "samples": self.samples,
            "seed": c.get("seed", ""),
            "perplexity": _fmt(self.perplexity),
            "mean_recon_error": _fmt(self.mean_recon_error),
            "uplink_bits": self.comm.uplink_bits,
            "downlink_bits": self.comm.downlink_bits,
            "rounds": self.comm.rounds,
            "wall_time": f"{self.wall_time:.4f}",
        }


def _fmt(x: float) -> str:
    return repr(float(x)) if math.isfinite(x) else str(x)


def write_csv(rows: Iterable[dict], fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)


def csv_text(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()
