"""Minimal seeded byte-level decoder LM used to drive both attention paths.

Architecture (pinned so runs are reproducible across machines):

* embedding  E in R^{vocab x d_model}, tied to the output projection
* per layer: pre-norm RMS (learned gain), multi-head attention with rotary
  embeddings on q and k, residual add; pre-norm RMS, SiLU feed-forward
  (d_model -> ff_mult*d_model -> d_model), residual add
* logits = rms_norm(x) @ E^T

All weights are uniform draws in [-1/sqrt(d_model), 1/sqrt(d_model)] from a
single splitmix64 stream in declaration order; RMS gains are 1 plus a
uniform perturbation of 0.1. Weights are untrained — everything downstream
checks equivalences and invariants, never task accuracy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError
from .numerics import Prng, RopeConfig, Tensor2D, default_dtype, prng_fill, rope_apply
from .attention import causal_attention

_MASK64 = (1 << 64) - 1
_RMS_EPS = 1e-6
_GAIN_JITTER = 0.1

MAGIC = b"STARTOYW"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    heads: int
    layers: int
    vocab: int = 256
    ff_mult: int = 2
    seed: int = 0
    rope_theta: float = 10000.0

    def __post_init__(self):
        for name in ("d_model", "heads", "layers", "vocab", "ff_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model {name} must be >= 1")
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"heads ({self.heads}) must divide d_model ({self.d_model})"
            )
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.head_dim, self.rope_theta)


@dataclass(frozen=True, eq=False)
class LayerWeights:
    wq: Tensor2D
    wk: Tensor2D
    wv: Tensor2D
    wo: Tensor2D
    w1: Tensor2D
    w2: Tensor2D
    attn_gain: np.ndarray
    ffn_gain: np.ndarray


@dataclass(frozen=True, eq=False)
class ModelWeights:
    config: ModelConfig
    embedding: Tensor2D
    layers: tuple[LayerWeights, ...]
    final_gain: np.ndarray


def _gain(prng: Prng, d: int) -> np.ndarray:
    g = 1.0 + prng_fill(prng, 1, d, _GAIN_JITTER).data
    g = np.ascontiguousarray(g)
    g.flags.writeable = False
    return g


def init_model(cfg: ModelConfig) -> ModelWeights:
    """Deterministic weights from cfg.seed; draw order is declaration order."""
    prng = Prng(cfg.seed)
    d, ff = cfg.d_model, cfg.ff_mult * cfg.d_model
    s = 1.0 / np.sqrt(d)
    embedding = prng_fill(prng, cfg.vocab, d, s)
    layers = []
    for _ in range(cfg.layers):
        layers.append(
            LayerWeights(
                wq=prng_fill(prng, d, d, s),
                wk=prng_fill(prng, d, d, s),
                wv=prng_fill(prng, d, d, s),
                wo=prng_fill(prng, d, d, s),
                w1=prng_fill(prng, d, ff, s),
                w2=prng_fill(prng, ff, d, s),
                attn_gain=_gain(prng, d),
                ffn_gain=_gain(prng, d),
            )
        )
    return ModelWeights(cfg, embedding, tuple(layers), _gain(prng, d))


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + _RMS_EPS) * gain.astype(x.dtype)


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


AttendFn = Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def embed(weights: ModelWeights, tokens) -> np.ndarray:
    """Embedding rows for a token sequence (validates the vocab range)."""
    ids = list(tokens)
    if not ids:
        raise DomainError("cannot embed an empty token sequence")
    for t in ids:
        if not 0 <= t < weights.config.vocab:
            raise DomainError(
                f"token id {t} out of range for vocab {weights.config.vocab}"
            )
    return weights.embedding.a[ids]


def layer_step(
    x: np.ndarray,
    lw: LayerWeights,
    cfg: ModelConfig,
    positions,
    attend: AttendFn,
) -> np.ndarray:
    """Advance hidden states through one layer, delegating attention.

    `attend(head, q, k, v)` receives the head's rotated queries/keys and raw
    values for this token batch and returns the attention output rows. Both
    the blockwise and the global path run through this same code, so their
    arithmetic agrees wherever their inputs do.
    """
    hd, rope = cfg.head_dim, cfg.rope
    xn = _rms_norm(x, lw.attn_gain)
    qf, kf, vf = xn @ lw.wq.a, xn @ lw.wk.a, xn @ lw.wv.a
    outs = []
    for h in range(cfg.heads):
        sl = slice(h * hd, (h + 1) * hd)
        qh = rope_apply(Tensor2D(qf[:, sl]), positions, rope).a
        kh = rope_apply(Tensor2D(kf[:, sl]), positions, rope).a
        outs.append(attend(h, qh, kh, vf[:, sl]))
    x = x + np.concatenate(outs, axis=1) @ lw.wo.a
    xn2 = _rms_norm(x, lw.ffn_gain)
    return x + _silu(xn2 @ lw.w1.a) @ lw.w2.a


def logits_from(weights: ModelWeights, x: np.ndarray) -> Tensor2D:
    """Tied output projection over normalized hidden states."""
    return Tensor2D(_rms_norm(x, weights.final_gain) @ weights.embedding.a.T)


def forward_global(weights: ModelWeights, tokens) -> Tensor2D:
    """Standard causal forward pass; positions 0..len-1; returns len x vocab logits."""
    x = embed(weights, tokens)
    positions = range(len(x))

    def attend(_h, qh, kh, vh):
        return causal_attention(Tensor2D(qh), Tensor2D(kh), Tensor2D(vh)).a

    for lw in weights.layers:
        x = layer_step(x, lw, weights.config, positions, attend)
    return logits_from(weights, x)


def greedy_decode_global(weights: ModelWeights, tokens, n_steps: int) -> list[int]:
    """Reference decode: full re-encode each step, argmax with lowest-id ties."""
    cur = list(tokens)
    out = []
    for _ in range(n_steps):
        logits = forward_global(weights, cur)
        t = int(np.argmax(logits.a[-1]))
        out.append(t)
        cur.append(t)
    return out


def _matrices(weights: ModelWeights):
    yield weights.embedding.a
    for lw in weights.layers:
        for m in (lw.wq, lw.wk, lw.wv, lw.wo, lw.w1, lw.w2):
            yield m.a
        yield lw.attn_gain
        yield lw.ffn_gain
    yield weights.final_gain


_HEADER = "<8sIBIIIIIQd"  # magic, version, scalar bytes, dims, seed, rope theta


def save_weights(weights: ModelWeights, path) -> None:
    """Flat binary dump: header then row-major little-endian matrices."""
    cfg = weights.config
    itemsize = weights.embedding.a.dtype.itemsize
    header = struct.pack(
        _HEADER,
        MAGIC,
        FORMAT_VERSION,
        itemsize,
        cfg.vocab,
        cfg.d_model,
        cfg.heads,
        cfg.layers,
        cfg.ff_mult,
        cfg.seed,
        cfg.rope_theta,
    )
    with open(path, "wb") as f:
        f.write(header)
        code = "<f4" if itemsize == 4 else "<f8"
        for m in _matrices(weights):
            f.write(np.ascontiguousarray(m, dtype=code).tobytes())


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as f:
        blob = f.read()
    head_len = struct.calcsize(_HEADER)
    magic, version, itemsize, vocab, d, heads, layers, ff_mult, seed, theta = (
        struct.unpack(_HEADER, blob[:head_len])
    )
    if magic != MAGIC:
        raise ConfigError(f"not a starsim weights file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported weights format version {version}")
    cfg = ModelConfig(
        d_model=d, heads=heads, layers=layers, vocab=vocab,
        ff_mult=ff_mult, seed=seed, rope_theta=theta,
    )
    code = np.dtype("<f4") if itemsize == 4 else np.dtype("<f8")
    off = head_len

    def take(rows: int, cols: int) -> np.ndarray:
        nonlocal off
        count = rows * cols
        arr = np.frombuffer(blob, dtype=code, count=count, offset=off).copy()
        off += count * itemsize
        return arr.reshape(rows, cols)

    emb = Tensor2D(take(vocab, d))
    ff = ff_mult * d
    lws = []
    for _ in range(layers):
        wq, wk, wv, wo = (Tensor2D(take(d, d)) for _ in range(4))
        w1, w2 = Tensor2D(take(d, ff)), Tensor2D(take(ff, d))
        ag, fg = take(1, d).reshape(-1), take(1, d).reshape(-1)
        ag.flags.writeable = False
        fg.flags.writeable = False
        lws.append(LayerWeights(wq, wk, wv, wo, w1, w2, ag, fg))
    final = take(1, d).reshape(-1)
    final.flags.writeable = False
    if off != len(blob):
        raise ConfigError(f"weights file has {len(blob) - off} trailing bytes")
    return ModelWeights(cfg, emb, tuple(lws), final)
