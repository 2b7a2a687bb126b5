"""Simulated host fleet running two-phase distributed attention.

Phase 1 encodes anchor-augmented context blocks independently per host and
records zero inter-host traffic. Phase 2 broadcasts the query, gathers each
host's (output, log-sum-exp) partial at a designated query host, merges
them in ascending host order, and generates tokens; only the query host's
cache grows. Every simulated transfer lands in an append-only ledger.

Hosts keep one KV cache per (layer, head) channel; the plain protocol
operations work on single-channel hosts, the model path fans out across
channels through the same merge core.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .blocking import AnchorSpec, AugmentedBlock, BlockPlan, KVCache, augment
from .attention import causal_attention, merge_partials, partial_attention
from .errors import ConfigError, ShapeError
from .numerics import Prng, Tensor2D
from .toy_model import ModelWeights, embed, layer_step, logits_from

QUERY_BROADCAST = "query_broadcast"
PARTIAL_OUT = "partial_out"
PARTIAL_LSE = "partial_lse"
KV_SHIFT = "kv_shift"
AGGREGATION_KINDS = (PARTIAL_OUT, PARTIAL_LSE)

# anchor randomness must not collide with the weight-init stream
_ANCHOR_SALT = 0xA17C4B10C4ED5EED


@dataclass(frozen=True)
class LedgerEntry:
    phase: int
    src: int
    dst: int
    kind: str
    scalar_count: int


class CommLedger:
    """Append-only record of simulated inter-host transfers."""

    def __init__(self):
        self.entries: list[LedgerEntry] = []

    def append(self, phase: int, src: int, dst: int, kind: str, count: int) -> None:
        self.entries.append(LedgerEntry(phase, src, dst, kind, count))

    def total(self, kinds=None, phase: int | None = None) -> int:
        return sum(
            e.scalar_count
            for e in self.entries
            if (kinds is None or e.kind in kinds)
            and (phase is None or e.phase == phase)
        )

    def phase_entries(self, phase: int) -> list[LedgerEntry]:
        return [e for e in self.entries if e.phase == phase]

    def to_csv(self) -> str:
        lines = ["phase,src,dst,kind,scalar_count"]
        lines += [
            f"{e.phase},{e.src},{e.dst},{e.kind},{e.scalar_count}"
            for e in self.entries
        ]
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            f.write(self.to_csv())


@dataclass
class Host:
    """One simulated host: its index, role, and per-channel KV caches."""

    index: int
    channels: list[KVCache] = field(default_factory=list)
    role: str = "context"


def set_query_host(hosts: list[Host], index: int) -> list[Host]:
    """Designate exactly one query host; everyone else reverts to context."""
    if not 0 <= index < len(hosts):
        raise ConfigError(f"query host index {index} out of range for {len(hosts)} hosts")
    for h in hosts:
        h.role = "query" if h.index == index else "context"
    return hosts


def _query_host(hosts: list[Host]) -> Host:
    marked = [h for h in hosts if h.role == "query"]
    if not marked:
        # documented default: the last host coordinates
        set_query_host(hosts, len(hosts) - 1)
        return hosts[-1]
    if len(marked) > 1:
        raise ConfigError(f"{len(marked)} hosts marked as query host")
    return marked[0]


def _encode_block_channels(weights: ModelWeights, block: AugmentedBlock):
    """Forward one augmented block through the stack, grabbing suffix KVs."""
    cfg = weights.config
    lo = block.anchor_prefix_len
    grabbed: list[list[tuple[np.ndarray, np.ndarray]]] = []
    x = embed(weights, block.token_ids)
    for lw in weights.layers:
        per_head: list[tuple[np.ndarray, np.ndarray]] = []

        def attend(h, qh, kh, vh):
            per_head.append((kh[lo:], vh[lo:]))
            return causal_attention(Tensor2D(qh), Tensor2D(kh), Tensor2D(vh)).a

        x = layer_step(x, lw, cfg, block.position_ids, attend)
        grabbed.append(per_head)
    return grabbed


def run_phase1(
    tokens,
    plan: BlockPlan,
    spec: AnchorSpec,
    weights: ModelWeights,
    prng: Prng | None = None,
    workers: int = 1,
) -> list[Host]:
    """Encode all context blocks host-locally; no ledger entries are produced.

    Block encodes are independent, so `workers` may fan them out on a thread
    pool; results are assembled in block order either way.
    """
    cfg = weights.config
    prng = prng or Prng(cfg.seed ^ _ANCHOR_SALT)
    blocks = augment(plan, tokens, spec, prng)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            encoded = list(pool.map(lambda b: _encode_block_channels(weights, b), blocks))
    else:
        encoded = [_encode_block_channels(weights, b) for b in blocks]

    hosts = [Host(i) for i in range(plan.num_hosts)]
    for host in hosts:
        mine = plan.blocks_of(host.index)
        for li in range(cfg.layers):
            for h in range(cfg.heads):
                parts = [
                    KVCache(
                        Tensor2D(encoded[bi][li][h][0]),
                        Tensor2D(encoded[bi][li][h][1]),
                        blocks[bi].own_positions,
                        host.index,
                    )
                    for bi in mine
                ]
                if not parts:
                    host.channels.append(
                        KVCache(
                            Tensor2D(np.zeros((0, cfg.head_dim))),
                            Tensor2D(np.zeros((0, cfg.head_dim))),
                            (),
                            host.index,
                        )
                    )
                elif len(parts) == 1:
                    host.channels.append(parts[0])
                else:
                    host.channels.append(KVCache.concat(parts, host.index))
    return hosts


def _gather_merge(
    hosts: list[Host],
    channel: int,
    q: Tensor2D,
    own_tail: int,
    ledger: CommLedger | None,
    delta: list[LedgerEntry] | None,
) -> np.ndarray:
    """Per-host partials merged in ascending host order; meters the transfers."""
    hq = _query_host(hosts)
    if own_tail not in (0, q.rows):
        raise ShapeError(f"own_tail must be 0 or the query length, got {own_tail}")
    parts = []
    for host in hosts:
        cache = host.channels[channel]
        if cache.keys.rows == 0:
            continue
        if host is hq and own_tail:
            lk = cache.keys.rows
            keep = np.ones((q.rows, lk), dtype=bool)
            tail = np.arange(own_tail)[None, :] <= np.arange(q.rows)[:, None]
            keep[:, lk - own_tail :] = tail
            parts.append(partial_attention(q, cache.keys, cache.values, keep))
        else:
            parts.append(partial_attention(q, cache.keys, cache.values, "full"))
        if host is not hq:
            d = cache.values.cols
            for kind, count in ((PARTIAL_OUT, q.rows * d), (PARTIAL_LSE, q.rows)):
                entry = LedgerEntry(2, host.index, hq.index, kind, count)
                if ledger is not None:
                    ledger.entries.append(entry)
                if delta is not None:
                    delta.append(entry)
    if not parts:
        raise ConfigError("every host cache is empty; nothing to attend to")
    return merge_partials(parts).out.a


def run_phase2_step(hosts: list[Host], q, own_tail: int = 0, ledger: CommLedger | None = None):
    """One distributed global-attention step over the hosts' cached KVs.

    `q` is a single query block (one channel) or a sequence of per-channel
    query blocks. Returns (merged output in the same form, ledger delta).
    The query host's partial — including any KVs appended to its cache — is
    local; every other host contributes one output plus one log-sum-exp
    vector, which is what the ledger meters.
    """
    if not hosts:
        raise ConfigError("phase 2 requires at least one host")
    single = isinstance(q, Tensor2D)
    qs = [q] if single else list(q)
    n_ch = min(len(h.channels) for h in hosts)
    if len(qs) > n_ch:
        raise ShapeError(f"{len(qs)} query channels but hosts expose {n_ch}")
    delta: list[LedgerEntry] = []
    outs = [
        Tensor2D(_gather_merge(hosts, c, qc, own_tail, ledger, delta))
        for c, qc in enumerate(qs)
    ]
    return (outs[0] if single else outs), delta


@dataclass
class DecodeSession:
    """State carried across autoregressive steps."""

    hosts: list[Host]
    weights: ModelWeights
    ledger: CommLedger
    context_len: int
    query_len: int
    next_position: int
    last_logits: np.ndarray
    generated: list[int] = field(default_factory=list)


def _phase2_forward(
    hosts: list[Host],
    weights: ModelWeights,
    token_ids,
    positions,
    own_tail: int,
    ledger: CommLedger,
) -> Tensor2D:
    """Run query/generated tokens through the stack with distributed attention.

    Per layer and head, the freshly projected K/V rows are appended to the
    query host's cache before the gather, mirroring the cache-update-then-
    attend order of the decode loop.
    """
    cfg = weights.config
    hq = _query_host(hosts)
    x = embed(weights, token_ids)
    for li, lw in enumerate(weights.layers):

        def attend(h, qh, kh, vh):
            ch = li * cfg.heads + h
            hq.channels[ch] = hq.channels[ch].append(
                Tensor2D(kh), Tensor2D(vh), positions
            )
            return _gather_merge(hosts, ch, Tensor2D(qh), own_tail, ledger, None)

        x = layer_step(x, lw, cfg, positions, attend)
    return logits_from(weights, x)


def start_session(
    weights: ModelWeights,
    tokens,
    plan: BlockPlan,
    spec: AnchorSpec,
    hosts: list[Host] | None = None,
    prng: Prng | None = None,
    ledger: CommLedger | None = None,
    workers: int = 1,
) -> tuple[Tensor2D, DecodeSession]:
    """Phase 1 over the context portion, then query encoding under phase 2.

    `tokens[:plan.context_len]` is the context; the rest is the query, which
    must be non-empty. Returns the query-position logits and a session ready
    for decoding.
    """
    L = plan.context_len
    query = list(tokens[L:])
    if len(tokens) < L:
        raise ConfigError(f"{len(tokens)} tokens for a context of {L}")
    if not query:
        raise ConfigError("query portion is empty; nothing to encode in phase 2")
    if hosts is None:
        hosts = run_phase1(tokens[:L], plan, spec, weights, prng=prng, workers=workers)
    ledger = ledger if ledger is not None else CommLedger()
    hq = _query_host(hosts)
    for h in hosts:
        if h is not hq:
            ledger.append(2, hq.index, h.index, QUERY_BROADCAST, len(query))
    positions = range(L, L + len(query))
    logits = _phase2_forward(hosts, weights, query, positions, len(query), ledger)
    session = DecodeSession(
        hosts=hosts,
        weights=weights,
        ledger=ledger,
        context_len=L,
        query_len=len(query),
        next_position=L + len(query),
        last_logits=logits.a[-1],
    )
    return logits, session


def forward_star(
    weights: ModelWeights,
    tokens,
    plan: BlockPlan,
    spec: AnchorSpec,
    hosts: list[Host] | None = None,
    **kwargs,
) -> Tensor2D:
    """Logits for the query positions under the two-phase path."""
    logits, _ = start_session(weights, tokens, plan, spec, hosts=hosts, **kwargs)
    return logits


def decode(session: DecodeSession, n_tokens: int, greedy: bool = True) -> list[int]:
    """Generate tokens autoregressively; each step is a phase-2 step with one row.

    Greedy only (argmax, ties to the lowest token id); the new token id is
    broadcast so every host can project the next step's query against it.
    """
    if not greedy:
        raise ConfigError("only greedy decoding is supported")
    weights = session.weights
    hq = _query_host(session.hosts)
    new_tokens: list[int] = []
    for _ in range(n_tokens):
        t = int(np.argmax(session.last_logits))
        new_tokens.append(t)
        session.generated.append(t)
        for h in session.hosts:
            if h is not hq:
                session.ledger.append(2, hq.index, h.index, QUERY_BROADCAST, 1)
        logits = _phase2_forward(
            session.hosts,
            weights,
            [t],
            [session.next_position],
            0,
            session.ledger,
        )
        session.last_logits = logits.a[-1]
        session.next_position += 1
    return new_tokens
