"""Ground-truth oracle, analytic compute/communication models, and metrics.

The oracle is a deliberately naive float64 double-loop attention — it shares
no code with the vectorized kernel it checks. The compute models count
score pairs (one (query, key) dot product each, per head) and communicated
scalars, which is how the blockwise scheme's linear scaling and its
aggregation traffic are compared against a KV-circulating ring baseline
without touching wall clocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blocking import BlockPlan
from .errors import ConfigError, ShapeError
from .numerics import Tensor2D


def global_oracle(
    q: Tensor2D, k: Tensor2D, v: Tensor2D, q_offset: int = 0, causal: bool = True
) -> Tensor2D:
    """Exact attention in float64 via explicit per-row loops.

    Keep this slow and obvious: it is the reference everything else is
    measured against, so it must not share arithmetic with the fast path.
    """
    if k.rows != v.rows:
        raise ShapeError(f"k has {k.rows} rows but v has {v.rows}")
    if q.cols != k.cols:
        raise ShapeError(f"q cols {q.cols} != k cols {k.cols}")
    qq = [[float(x) for x in row] for row in q.a]
    kk = [[float(x) for x in row] for row in k.a]
    vv = [[float(x) for x in row] for row in v.a]
    d = q.cols
    scale = 1.0 / math.sqrt(d)
    out = []
    for i, qrow in enumerate(qq):
        limit = min(q_offset + i + 1, len(kk)) if causal else len(kk)
        if limit <= 0:
            raise ShapeError(f"query row {i} at offset {q_offset} has no keys")
        scores = [
            sum(qrow[t] * kk[j][t] for t in range(d)) * scale for j in range(limit)
        ]
        m = max(scores)
        exps = [math.exp(x - m) for x in scores]
        denom = sum(exps)
        row = [
            sum(exps[j] * vv[j][c] for j in range(limit)) / denom
            for c in range(len(vv[0]))
        ]
        out.append(row)
    return Tensor2D(np.array(out, dtype=np.float64))


@dataclass(frozen=True)
class FlopReport:
    """Score-pair and communicated-scalar counts, split by phase.

    Score pairs are counted once per head position pair (identical across
    heads); comm_scalars count every head's payload.
    """

    phase1_pairs: int
    phase2_pairs: int
    phase1_comm: int
    phase2_comm: int

    def __post_init__(self):
        for name in ("phase1_pairs", "phase2_pairs", "phase1_comm", "phase2_comm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} cannot be negative")

    @property
    def score_pairs(self) -> int:
        return self.phase1_pairs + self.phase2_pairs

    @property
    def comm_scalars(self) -> int:
        return self.phase1_comm + self.phase2_comm

    def to_json(self) -> dict:
        return {
            "score_pairs": self.score_pairs,
            "comm_scalars": self.comm_scalars,
            "phase1_pairs": self.phase1_pairs,
            "phase2_pairs": self.phase2_pairs,
            "phase1_comm": self.phase1_comm,
            "phase2_comm": self.phase2_comm,
        }


def _query_phase_pairs(L: int, l_q: int, n_generated: int) -> int:
    # query row i sees L + i + 1 keys; each generated token sees one more
    total = sum(L + i + 1 for i in range(l_q))
    total += sum(L + l_q + t + 1 for t in range(n_generated))
    return total


def ring_model(L: int, H: int, d: int, heads: int = 1) -> FlopReport:
    """Exact ring baseline: full causal pairs, KV shards circulated H-1 times.

    Each of the H hosts forwards its K and V shard to its neighbour H-1
    times, so every host sees every key. L is padded up to a multiple of H
    for the shard size (comm accounting only; the score count uses real L).
    """
    if H < 1:
        raise ConfigError(f"ring needs >= 1 host, got {H}")
    if L < 1:
        raise ConfigError(f"ring needs L >= 1, got {L}")
    shard = -(-L // H)
    comm = H * (H - 1) * 2 * shard * d * heads
    return FlopReport(
        phase1_pairs=L * (L + 1) // 2,
        phase2_pairs=0,
        phase1_comm=comm,
        phase2_comm=0,
    )


def star_model(
    L: int,
    b: int,
    anchor_len: int | None = None,
    d: int = 0,
    heads: int = 1,
    l_q: int = 0,
    n_generated: int = 0,
    hosts: int | None = None,
) -> FlopReport:
    """Analytic two-phase cost: blockwise causal pairs plus aggregation traffic.

    Phase-1 pairs come from per-block enumeration (the last block may be
    ragged, the first carries no anchor). Phase-2 communication is one
    d-vector plus one scalar per token per head from each non-query host.
    """
    if b < 1 or L < 1:
        raise ConfigError(f"star model needs L >= 1 and b >= 1, got L={L}, b={b}")
    if b > L:
        raise ConfigError(f"block size {b} exceeds context length {L}")
    a_len = b if anchor_len is None else anchor_len
    if a_len > b:
        raise ConfigError(f"anchor_len {a_len} exceeds block size {b}")
    n = -(-L // b)
    pairs = 0
    for i in range(n):
        own = min(b, L - i * b)
        m = own if i == 0 else own + a_len
        pairs += m * (m + 1) // 2
    H = n if hosts is None else hosts
    comm = (H - 1) * (l_q + n_generated) * (d + 1) * heads
    return FlopReport(
        phase1_pairs=pairs,
        phase2_pairs=_query_phase_pairs(L, l_q, n_generated),
        phase1_comm=0,
        phase2_comm=comm,
    )


def global_pairs(L: int, l_q: int = 0, n_generated: int = 0) -> int:
    """Causal score pairs for a single-host global pass over the same job."""
    return L * (L + 1) // 2 + _query_phase_pairs(L, l_q, n_generated)


@dataclass(frozen=True)
class DivergenceReport:
    """Elementwise gap between two same-shape outputs."""

    max_abs: float
    mean_abs: float
    cosine_per_row_min: float

    def to_json(self) -> dict:
        return {
            "max_abs": self.max_abs,
            "mean_abs": self.mean_abs,
            "cosine_per_row_min": self.cosine_per_row_min,
        }


def divergence(a: Tensor2D, b: Tensor2D) -> DivergenceReport:
    if a.shape != b.shape:
        raise ShapeError(f"divergence of mismatched shapes {a.shape} vs {b.shape}")
    aa = a.a.astype(np.float64)
    bb = b.a.astype(np.float64)
    diff = np.abs(aa - bb)
    cosines = []
    for ra, rb in zip(aa, bb):
        na, nb = np.linalg.norm(ra), np.linalg.norm(rb)
        if na == 0.0 and nb == 0.0:
            cosines.append(1.0)
        elif na == 0.0 or nb == 0.0:
            cosines.append(0.0)
        else:
            cosines.append(float(np.dot(ra, rb) / (na * nb)))
    return DivergenceReport(
        max_abs=float(diff.max()),
        mean_abs=float(diff.mean()),
        cosine_per_row_min=min(cosines),
    )


PROFILE_MODES = ("global", "blockwise_no_anchor", "blockwise_anchor")


def _profile_softmax(scores: np.ndarray, sink_boost: float, keep: np.ndarray):
    z = scores.copy()
    if sink_boost:
        # emulate the trained-model habit of dumping mass on the first
        # visible position of each softmax window
        z[:, 0] += sink_boost
    m = np.where(keep, z, -np.inf).max(axis=1, keepdims=True)
    p = np.zeros_like(z)
    p[keep] = np.exp((z - m)[keep])
    return p / p.sum(axis=1, keepdims=True)


def attention_mass_profile(
    q: Tensor2D,
    k: Tensor2D,
    plan: BlockPlan,
    mode: str,
    anchor_len: int | None = None,
    sink_boost: float = 0.0,
) -> np.ndarray:
    """Total attention probability per key position, summed over query rows.

    Modes: "global" (one causal softmax over everything),
    "blockwise_no_anchor" (each block attends only itself), and
    "blockwise_anchor" (each later block is prefixed with the sequence
    head; the prefix columns keep positions [0, anchor_len), so their mass
    accumulates at the sequence start — exactly the columns whose KVs get
    dropped). `sink_boost` adds a planted logit to the first column of
    every softmax window to make sink formation visible with random data.

    Each query row contributes total mass 1, so the profile sums to the
    number of query rows.
    """
    if mode not in PROFILE_MODES:
        raise ConfigError(f"unknown profile mode {mode!r}")
    if q.rows != k.rows or q.rows != plan.context_len:
        raise ShapeError(
            f"profile needs q/k rows == plan length; got {q.rows}, {k.rows}, "
            f"{plan.context_len}"
        )
    L = plan.context_len
    scale = 1.0 / math.sqrt(q.cols)
    qa = q.a.astype(np.float64)
    ka = k.a.astype(np.float64)
    a_len = plan.block_size if anchor_len is None else anchor_len
    mass = np.zeros(L)

    if mode == "global":
        scores = (qa @ ka.T) * scale
        keep = np.tril(np.ones((L, L), dtype=bool))
        mass += _profile_softmax(scores, sink_boost, keep).sum(axis=0)
        return mass

    for i in range(plan.num_blocks):
        start, end = plan.block_span(i)
        own = slice(start, end)
        if mode == "blockwise_no_anchor" or i == 0:
            cols = np.arange(start, end)
        else:
            cols = np.concatenate([np.arange(a_len), np.arange(start, end)])
        scores = (qa[own] @ ka[cols].T) * scale
        n_anchor = len(cols) - (end - start)
        local = np.arange(len(cols))[None, :]
        keep = local <= (n_anchor + np.arange(end - start))[:, None]
        probs = _profile_softmax(scores, sink_boost, keep)
        np.add.at(mass, cols, probs.sum(axis=0))
    return mass
