"""Mask selection under comparison groups, vote aggregation, and wire frames.

Masks are ``uint8`` matrices with 1 marking a pruned weight. Within every
comparison group exactly ``floor(s * group_size)`` entries are selected;
ties go to the entry with the smaller row-major index.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import FormatError, InputDomainError, ShapeError

MASK_DTYPE = np.uint8

# header: layer_index, rows, cols, client_id (u32 little-endian each)
FRAME_HEADER = struct.Struct("<IIII")
SERVER_ID = 0xFFFFFFFF


class ComparisonGroup(str, Enum):
    LAYER = "layer"
    ROW = "row"
    COLUMN = "column"

    @classmethod
    def parse(cls, name) -> "ComparisonGroup":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise InputDomainError(
                f"unknown comparison group {name!r}; expected layer, row or column"
            ) from None


@dataclass
class AggregatedMask:
    votes: np.ndarray
    m: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.votes.shape


def prune_count(sparsity: float, group_size: int) -> int:
    """Entries to prune in a group of ``group_size``.

    The 1e-9 guard stops products like ``0.29 * 100`` (28.999...) from
    losing an entry to binary rounding.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise InputDomainError(f"sparsity must lie in [0, 1], got {sparsity}")
    return min(group_size, math.floor(sparsity * group_size + 1e-9))


def _select_lowest(keys: np.ndarray, sparsity: float, group: ComparisonGroup) -> np.ndarray:
    # stable argsort == ascending-index tie-break within each group
    group = ComparisonGroup.parse(group)
    rows, cols = keys.shape
    mask = np.zeros(keys.shape, dtype=MASK_DTYPE)
    if group is ComparisonGroup.LAYER:
        k = prune_count(sparsity, rows * cols)
        order = np.argsort(keys, axis=None, kind="stable")[:k]
        mask.flat[order] = 1
    elif group is ComparisonGroup.ROW:
        k = prune_count(sparsity, cols)
        order = np.argsort(keys, axis=1, kind="stable")[:, :k]
        np.put_along_axis(mask, order, 1, axis=1)
    else:
        k = prune_count(sparsity, rows)
        order = np.argsort(keys, axis=0, kind="stable")[:k, :]
        np.put_along_axis(mask, order, 1, axis=0)
    return mask


def mask_from_scores(scores, sparsity: float, group) -> np.ndarray:
    """Prune the lowest-scoring entries of every comparison group."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"scores must be 2-D, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise InputDomainError("scores contain non-finite values")
    return _select_lowest(s, sparsity, group)


def aggregate_masks(masks: Sequence[np.ndarray]) -> AggregatedMask:
    if len(masks) == 0:
        raise InputDomainError("cannot aggregate an empty mask sequence")
    shape = np.shape(masks[0])
    votes = np.zeros(shape, dtype=np.int64)
    for i, mk in enumerate(masks):
        mk = np.asarray(mk)
        if mk.shape != shape:
            raise ShapeError(f"mask {i} has shape {mk.shape}, expected {shape}")
        if mk.size and not np.isin(mk, (0, 1)).all():
            raise InputDomainError(f"mask {i} is not binary")
        votes += mk.astype(np.int64)
    return AggregatedMask(votes, len(masks))


def select_final_mask(agg: AggregatedMask, sparsity: float, group) -> np.ndarray:
    """Prune the most-voted entries of every comparison group."""
    return _select_lowest(-agg.votes, sparsity, group)


def scale_retained(W_pruned, agg: AggregatedMask, final) -> np.ndarray:
    """Shrink each weight by the fraction of clients that wanted to keep it: ``W * (m - votes) / m``."""
    W = np.asarray(W_pruned, dtype=np.float64)
    final = np.asarray(final)
    if W.shape != agg.shape or final.shape != W.shape:
        raise ShapeError(f"shapes disagree: weights {W.shape}, votes {agg.shape}, mask {final.shape}")
    out = W * ((agg.m - agg.votes) / agg.m)
    out[final.astype(bool)] = 0.0
    return out


def pack_mask(mask) -> bytes:
    """Row-major, MSB-first bit packing with a zero-padded final byte."""
    bits = np.asarray(mask)
    if bits.size and (bits.min() < 0 or bits.max() > 1):
        raise InputDomainError("mask values must be 0 or 1")
    return np.packbits(bits.astype(MASK_DTYPE).ravel(), bitorder="big").tobytes()


def packed_size(rows: int, cols: int, width: int = 1) -> int:
    return (rows * cols * width + 7) // 8


def unpack_mask(data: bytes, rows: int, cols: int) -> np.ndarray:
    n = rows * cols
    if len(data) != packed_size(rows, cols):
        raise FormatError(f"{rows}x{cols} mask needs {packed_size(rows, cols)} bytes, got {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="big")
    if bits[n:].any():
        raise FormatError("non-zero padding bits in packed mask")
    return bits[:n].reshape(rows, cols).astype(MASK_DTYPE)


def vote_width(m: int) -> int:
    """Bits per vote entry, ``ceil(log2(m + 1))``."""
    if m < 1:
        raise InputDomainError("client count must be >= 1")
    return int(m).bit_length()


def pack_votes(votes, m: int) -> bytes:
    """Fixed-width unsigned vote counts, row-major, MSB-first, zero-padded."""
    v = np.asarray(votes, dtype=np.int64)
    if v.size and (v.min() < 0 or v.max() > m):
        raise InputDomainError(f"vote counts must lie in [0, {m}]")
    w = vote_width(m)
    shifts = np.arange(w - 1, -1, -1)
    bits = (v.ravel()[:, None] >> shifts) & 1
    return np.packbits(bits.astype(np.uint8).ravel(), bitorder="big").tobytes()


def unpack_votes(data: bytes, rows: int, cols: int, m: int) -> np.ndarray:
    w = vote_width(m)
    n = rows * cols
    if len(data) != packed_size(rows, cols, w):
        raise FormatError(f"{rows}x{cols} votes at {w} bits need {packed_size(rows, cols, w)} bytes")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")
    if bits[n * w:].any():
        raise FormatError("non-zero padding bits in packed votes")
    weights = 1 << np.arange(w - 1, -1, -1)
    votes = bits[: n * w].reshape(n, w).astype(np.int64) @ weights
    if votes.size and votes.max() > m:
        raise FormatError(f"decoded vote exceeds client count {m}")
    return votes.reshape(rows, cols)


def encode_frame(payload: bytes, layer_index: int, rows: int, cols: int, client_id: int) -> bytes:
    return FRAME_HEADER.pack(layer_index, rows, cols, client_id) + payload


def decode_header(frame: bytes) -> tuple[int, int, int, int]:
    if len(frame) < FRAME_HEADER.size:
        raise FormatError(f"frame shorter than {FRAME_HEADER.size}-byte header")
    return FRAME_HEADER.unpack_from(frame)


def encode_mask_frame(mask, layer_index: int, client_id: int) -> bytes:
    rows, cols = np.shape(mask)
    return encode_frame(pack_mask(mask), layer_index, rows, cols, client_id)


def decode_mask_frame(frame: bytes) -> tuple[int, int, np.ndarray]:
    """Return ``(layer_index, client_id, mask)``."""
    layer_index, rows, cols, client_id = decode_header(frame)
    return layer_index, client_id, unpack_mask(frame[FRAME_HEADER.size:], rows, cols)


def encode_votes_frame(votes, m: int, layer_index: int) -> bytes:
    rows, cols = np.shape(votes)
    return encode_frame(pack_votes(votes, m), layer_index, rows, cols, SERVER_ID)


def decode_votes_frame(frame: bytes, m: int) -> tuple[int, np.ndarray]:
    layer_index, rows, cols, _ = decode_header(frame)
    return layer_index, unpack_votes(frame[FRAME_HEADER.size:], rows, cols, m)
