"""Context partitioning, anchor-augmented blocks, and per-host KV caches.

A context of L tokens is cut into ceil(L/b) contiguous blocks. Every block
after the first is prefixed with an anchor whose content and position IDs
are configurable; the anchor soaks up the attention spike that otherwise
forms at each block start, and its KV rows are dropped from the cache so
only the block's own tokens are ever attended to later.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import causal_attention
from .errors import ConfigError, DomainError, ShapeError
from .numerics import Prng, RopeConfig, Tensor2D, matmul, rope_apply

CONTENT_MODES = (
    "first_block",
    "none",
    "previous_block",
    "random_tokens",
    "shuffled_first_block",
    "constant_token",
)
POSITION_MODES = ("first_block", "previous_block", "random_sampled")


@dataclass(frozen=True)
class BlockPlan:
    """Partition of [0, L) into contiguous blocks, each owned by one host."""

    context_len: int
    block_size: int
    num_blocks: int
    num_hosts: int
    host_assignment: tuple[int, ...]  # block index -> host index

    def block_span(self, i: int) -> tuple[int, int]:
        start = i * self.block_size
        return start, min(start + self.block_size, self.context_len)

    def blocks_of(self, host: int) -> list[int]:
        return [i for i, h in enumerate(self.host_assignment) if h == host]


def partition(
    L: int, b: int, num_hosts: int | None = None, allow_idle: bool = False
) -> BlockPlan:
    """Split an L-token context into ceil(L/b) blocks over the given hosts.

    Default host count is one per block. Blocks are handed out in contiguous
    balanced runs; more hosts than blocks is a config error unless idle
    hosts are explicitly allowed.
    """
    if L < 1:
        raise ConfigError(f"context length must be >= 1, got {L}")
    if b < 1:
        raise ConfigError(f"block size must be >= 1, got {b}")
    n = -(-L // b)
    H = n if num_hosts is None else num_hosts
    if H < 1:
        raise ConfigError(f"host count must be >= 1, got {H}")
    if H > n and not allow_idle:
        raise ConfigError(f"{H} hosts for {n} blocks; pass allow_idle to permit")
    assignment = tuple(min(i * H // n, H - 1) for i in range(n))
    return BlockPlan(L, b, n, H, assignment)


@dataclass(frozen=True)
class AnchorSpec:
    """How each block after the first is prefixed and positioned.

    content_mode picks the anchor tokens, position_mode their position IDs.
    anchor_len defaults to the block size; constant_token_id feeds the
    constant_token mode and token_range bounds random_tokens draws.
    """

    content_mode: str = "first_block"
    position_mode: str = "first_block"
    anchor_len: int | None = None
    constant_token_id: int = 0
    token_range: int = 256

    def __post_init__(self):
        if self.content_mode not in CONTENT_MODES:
            raise ConfigError(f"unknown anchor content_mode {self.content_mode!r}")
        if self.position_mode not in POSITION_MODES:
            raise ConfigError(f"unknown anchor position_mode {self.position_mode!r}")
        if self.anchor_len is not None and self.anchor_len < 1:
            raise ConfigError(f"anchor_len must be >= 1, got {self.anchor_len}")
        if self.token_range < 1:
            raise ConfigError(f"token_range must be >= 1, got {self.token_range}")

    def to_config(self) -> dict:
        return {
            "content_mode": self.content_mode,
            "position_mode": self.position_mode,
            "anchor_len": self.anchor_len,
            "constant_token_id": self.constant_token_id,
            "token_range": self.token_range,
        }

    @classmethod
    def from_config(cls, doc: dict) -> "AnchorSpec":
        known = {
            "content_mode",
            "position_mode",
            "anchor_len",
            "constant_token_id",
            "token_range",
        }
        for key in doc:
            if key not in known:
                raise ConfigError(f"unknown anchor field '{key}'")
        return cls(**doc)


@dataclass(frozen=True)
class AugmentedBlock:
    """One block plus its anchor prefix, carrying explicit position IDs."""

    token_ids: tuple[int, ...]
    position_ids: tuple[int, ...]
    anchor_prefix_len: int
    block_index: int

    def __post_init__(self):
        if len(self.token_ids) != len(self.position_ids):
            raise ShapeError(
                f"{len(self.token_ids)} tokens vs {len(self.position_ids)} positions"
            )

    @property
    def own_len(self) -> int:
        return len(self.token_ids) - self.anchor_prefix_len

    @property
    def own_positions(self) -> tuple[int, ...]:
        return self.position_ids[self.anchor_prefix_len :]


@dataclass(frozen=True, eq=False)
class KVCache:
    """Retained key/value rows with their global position IDs."""

    keys: Tensor2D
    values: Tensor2D
    positions: tuple[int, ...]
    host: int = 0

    def __post_init__(self):
        if not (self.keys.rows == self.values.rows == len(self.positions)):
            raise ShapeError(
                f"cache rows disagree: keys {self.keys.rows}, values "
                f"{self.values.rows}, positions {len(self.positions)}"
            )

    def append(self, keys: Tensor2D, values: Tensor2D, positions) -> "KVCache":
        """New cache with extra rows appended (caches themselves are immutable)."""
        if keys.rows != values.rows or keys.rows != len(tuple(positions)):
            raise ShapeError("appended keys/values/positions disagree in length")
        return KVCache(
            Tensor2D(np.concatenate([self.keys.a, keys.a])),
            Tensor2D(np.concatenate([self.values.a, values.a])),
            self.positions + tuple(positions),
            self.host,
        )

    @classmethod
    def concat(cls, caches: list["KVCache"], host: int) -> "KVCache":
        return cls(
            Tensor2D(np.concatenate([c.keys.a for c in caches])),
            Tensor2D(np.concatenate([c.values.a for c in caches])),
            sum((c.positions for c in caches), ()),
            host,
        )


def _anchor_tokens(spec: AnchorSpec, tokens, start: int, a_len: int, prng: Prng):
    if spec.content_mode == "first_block":
        return tuple(tokens[:a_len])
    if spec.content_mode == "previous_block":
        return tuple(tokens[start - a_len : start])
    if spec.content_mode == "shuffled_first_block":
        return tuple(prng.shuffle(tokens[:a_len]))
    if spec.content_mode == "random_tokens":
        return tuple(prng.randint_below(spec.token_range) for _ in range(a_len))
    if spec.content_mode == "constant_token":
        return (spec.constant_token_id,) * a_len
    raise ConfigError(f"unsupported content_mode {spec.content_mode!r}")


def _anchor_positions(spec: AnchorSpec, start: int, a_len: int, prng: Prng):
    if spec.position_mode == "first_block":
        return tuple(range(a_len))
    if spec.position_mode == "previous_block":
        return tuple(range(start - a_len, start))
    if spec.position_mode == "random_sampled":
        return tuple(prng.sample_sorted(start, a_len))
    raise ConfigError(f"unsupported position_mode {spec.position_mode!r}")


def augment(
    plan: BlockPlan, tokens, spec: AnchorSpec, prng: Prng | None = None
) -> list[AugmentedBlock]:
    """Build the anchor-augmented view of every block.

    Block 0 is never prefixed; its tokens keep positions [0, b). Later
    blocks get an anchor prefix chosen by `spec`, while their own tokens
    always keep their global position IDs. Random modes draw from `prng`
    in ascending block order, so a fixed seed fixes the layout.
    """
    tokens = list(tokens)
    if len(tokens) != plan.context_len:
        raise ConfigError(
            f"{len(tokens)} tokens for a plan covering {plan.context_len}"
        )
    a_len = plan.block_size if spec.anchor_len is None else spec.anchor_len
    if a_len > plan.block_size:
        raise ConfigError(f"anchor_len {a_len} exceeds block size {plan.block_size}")
    prng = prng or Prng(0)
    blocks = []
    for i in range(plan.num_blocks):
        start, end = plan.block_span(i)
        own = tuple(tokens[start:end])
        own_pos = tuple(range(start, end))
        if i == 0 or spec.content_mode == "none":
            blocks.append(AugmentedBlock(own, own_pos, 0, i))
            continue
        ank = _anchor_tokens(spec, tokens, start, a_len, prng)
        ank_pos = _anchor_positions(spec, start, a_len, prng)
        blocks.append(AugmentedBlock(ank + own, ank_pos + own_pos, a_len, i))
    return blocks


def encode_block(
    block: AugmentedBlock,
    embedding: Tensor2D,
    wq: Tensor2D,
    wk: Tensor2D,
    wv: Tensor2D,
    rope: RopeConfig,
    host: int = 0,
) -> KVCache:
    """Run one attention channel over an augmented block; keep only own-block KVs.

    The whole block (anchor rows included) participates as queries, but the
    cache that comes out carries solely the block's own suffix, rotated at
    its recorded global positions.
    """
    for t in block.token_ids:
        if not 0 <= t < embedding.rows:
            raise DomainError(f"token id {t} outside embedding table of {embedding.rows}")
    x = Tensor2D(embedding.a[list(block.token_ids)])
    q = rope_apply(matmul(x, wq), block.position_ids, rope)
    k = rope_apply(matmul(x, wk), block.position_ids, rope)
    v = matmul(x, wv)
    causal_attention(q, k, v)  # anchor-row outputs are computed then dropped
    lo = block.anchor_prefix_len
    return KVCache(
        Tensor2D(k.a[lo:]), Tensor2D(v.a[lo:]), block.own_positions, host
    )


def sparsity_pattern(plan: BlockPlan, spec: AnchorSpec) -> np.ndarray:
    """Block-granular attention mask: n context rows plus one query row.

    Each context block sees itself plus whichever block its anchor content
    comes from; the query row sees everything.
    """
    n = plan.num_blocks
    pat = np.zeros((n + 1, n + 1), dtype=bool)
    for i in range(n):
        pat[i, i] = True
        if i == 0:
            continue
        if spec.content_mode in ("first_block", "shuffled_first_block"):
            pat[i, 0] = True
        elif spec.content_mode == "previous_block":
            pat[i, i - 1] = True
    pat[n, :] = True
    return pat
