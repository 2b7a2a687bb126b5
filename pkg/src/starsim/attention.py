"""Exact causal attention, partial attention with log-sum-exp statistics,
and the merge rule that combines per-host partials into global attention.

A partial is the pair (locally-normalized output, per-row log softmax
denominator). Merging partials over a key split reproduces the attention
over the full key set: with s_new = LSE(lse_1..lse_H) per row,

    out_new = sum_h exp(lse_h - s_new) * out_h

which is the denominator-weighted average of the local outputs, carried in
log domain so it never overflows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .numerics import Tensor2D


@dataclass(frozen=True)
class AttnScale:
    """Score scaling 1/sqrt(head_dim)."""

    head_dim: int
    scale: float

    def __post_init__(self):
        if self.head_dim < 1:
            raise ConfigError(f"head_dim must be >= 1, got {self.head_dim}")
        if abs(self.scale - 1.0 / math.sqrt(self.head_dim)) > 1e-12:
            raise ConfigError(
                f"scale {self.scale} != 1/sqrt({self.head_dim}) beyond 1e-12"
            )

    @classmethod
    def for_dim(cls, head_dim: int) -> "AttnScale":
        return cls(head_dim, 1.0 / math.sqrt(head_dim))


@dataclass(frozen=True, eq=False)
class PartialAttention:
    """A host's locally-normalized attention output plus its per-row LSE.

    `lse[i]` is log(sum_k exp(score_ik)); stored in float64 so merges stay
    stable regardless of build precision.
    """

    out: Tensor2D
    lse: np.ndarray

    def __post_init__(self):
        lse = np.asarray(self.lse, dtype=np.float64).reshape(-1).copy()
        lse.flags.writeable = False
        object.__setattr__(self, "lse", lse)
        if self.out.rows != lse.size:
            raise ShapeError(f"out has {self.out.rows} rows but lse has {lse.size}")
        if not np.isfinite(lse).all():
            raise DomainError("non-finite log-sum-exp in partial attention")


def _check_qkv(q: Tensor2D, k: Tensor2D, v: Tensor2D) -> None:
    if k.rows != v.rows:
        raise ShapeError(f"k has {k.rows} rows but v has {v.rows}")
    if q.cols != k.cols:
        raise ShapeError(f"q cols {q.cols} != k cols {k.cols}")


def _causal_keep(l_q: int, l_k: int, q_offset: int) -> np.ndarray:
    # row i of q sits at absolute index q_offset + i and sees keys <= that
    return np.arange(l_k)[None, :] <= (q_offset + np.arange(l_q))[:, None]


def _attend(qa: np.ndarray, ka: np.ndarray, va: np.ndarray, keep):
    """Masked softmax attention; returns (out, lse) as arrays.

    Rows with zero attendable keys get a zero output row and lse = -inf;
    callers decide whether that is an error.
    """
    scale = 1.0 / math.sqrt(qa.shape[1])
    z = (qa @ ka.T) * qa.dtype.type(scale)
    if keep is None:
        m = z.max(axis=1, keepdims=True)
        p = np.exp(z - m)
        s = p.sum(axis=1)
        lse = m[:, 0].astype(np.float64) + np.log(s.astype(np.float64))
        out = (p / s[:, None]) @ va
        return out, lse
    any_keep = keep.any(axis=1)
    m = np.where(keep, z, -np.inf).max(axis=1, keepdims=True)
    p = np.zeros_like(z)
    p[keep] = np.exp((z - m)[keep])
    s = p.sum(axis=1)
    out = np.zeros((qa.shape[0], va.shape[1]), dtype=np.result_type(qa, va))
    lse = np.full(qa.shape[0], -np.inf)
    if any_keep.any():
        out[any_keep] = (p[any_keep] / s[any_keep, None]) @ va
        lse[any_keep] = m[any_keep, 0].astype(np.float64) + np.log(
            s[any_keep].astype(np.float64)
        )
    return out, lse


def causal_attention(
    q: Tensor2D, k: Tensor2D, v: Tensor2D, q_offset: int = 0
) -> Tensor2D:
    """softmax(q k^T / sqrt(d), causal) v, with q starting q_offset rows into k."""
    _check_qkv(q, k, v)
    if q_offset + q.rows > k.rows:
        raise ShapeError(
            f"q rows [{q_offset}, {q_offset + q.rows}) extend past {k.rows} keys"
        )
    keep = _causal_keep(q.rows, k.rows, q_offset)
    if not keep.any(axis=1).all():
        raise DomainError(f"q_offset {q_offset} leaves a query row with no keys")
    out, _ = _attend(q.a, k.a, v.a, keep)
    return Tensor2D(out)


def partial_attention(
    q: Tensor2D, k: Tensor2D, v: Tensor2D, mask="full", q_offset: int = 0
) -> PartialAttention:
    """Local attention plus its softmax denominator statistics.

    `mask` is "full" (every key visible — the steady state when a host's
    cache holds only past tokens), "causal", or an explicit boolean matrix
    with True marking attendable cells.
    """
    _check_qkv(q, k, v)
    if isinstance(mask, str):
        if mask == "full":
            keep = None
        elif mask == "causal":
            keep = _causal_keep(q.rows, k.rows, q_offset)
        else:
            raise ConfigError(f"unknown mask kind {mask!r}")
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != (q.rows, k.rows):
            raise ShapeError(f"mask shape {keep.shape} != ({q.rows}, {k.rows})")
    if k.rows == 0:
        raise DomainError("partial attention over an empty key set")
    if keep is not None and not keep.any(axis=1).all():
        raise DomainError("query row with every key masked")
    out, lse = _attend(q.a, k.a, v.a, keep)
    return PartialAttention(Tensor2D(out), lse)


def merge_partials(parts: Sequence[PartialAttention]) -> PartialAttention:
    """Fold per-host partials into the partial over the union of their keys.

    The fold order is the given sequence order; results for permuted inputs
    agree only up to floating-point tolerance.
    """
    if len(parts) == 0:
        raise DomainError("merge of zero partials")
    shape = parts[0].out.shape
    for p in parts[1:]:
        if p.out.shape != shape:
            raise ShapeError(f"partial shapes differ: {shape} vs {p.out.shape}")
    if len(parts) == 1:
        return parts[0]
    lse = np.stack([p.lse for p in parts])  # (H, l_q)
    outs = np.stack([p.out.a for p in parts])  # (H, l_q, d)
    s_new = np.logaddexp.reduce(lse, axis=0)
    w = np.exp(lse - s_new[None, :])
    merged = (w[:, :, None] * outs).sum(axis=0)
    return PartialAttention(Tensor2D(merged.astype(outs.dtype)), s_new)


def streaming_causal_attention(
    q: Tensor2D, k: Tensor2D, v: Tensor2D, tile: int, q_offset: int = 0
) -> Tensor2D:
    """Causal attention computed over key tiles, folded with the merge rule.

    Equal to :func:`causal_attention` for every tile size; with tile equal
    to the key count it reduces to a single pass.
    """
    if tile < 1:
        raise ConfigError(f"tile must be >= 1, got {tile}")
    _check_qkv(q, k, v)
    if q_offset + q.rows > k.rows:
        raise ShapeError(
            f"q rows [{q_offset}, {q_offset + q.rows}) extend past {k.rows} keys"
        )
    l_q, l_k = q.rows, k.rows
    acc = np.zeros((l_q, v.cols), dtype=np.result_type(q.a, v.a))
    acc_lse = np.full(l_q, -np.inf)
    for t0 in range(0, l_k, tile):
        t1 = min(t0 + tile, l_k)
        keep = np.arange(t0, t1)[None, :] <= (q_offset + np.arange(l_q))[:, None]
        if not keep.any():
            continue
        out_t, lse_t = _attend(q.a, k.a[t0:t1], v.a[t0:t1], keep)
        s_new = np.logaddexp(acc_lse, lse_t)
        live = s_new > -np.inf
        w_old = np.zeros(l_q)
        w_tile = np.zeros(l_q)
        w_old[live] = np.exp(acc_lse[live] - s_new[live])
        w_tile[live] = np.exp(lse_t[live] - s_new[live])
        acc = w_old[:, None] * acc + w_tile[:, None] * out_t
        acc_lse = s_new
    if not np.isfinite(acc_lse).all():
        raise DomainError(f"q_offset {q_offset} leaves a query row with no keys")
    return Tensor2D(acc.astype(q.dtype))
