"""Batch front-end: compare | bench | ablate | profile | decode.

One JSON config document drives every command; a few flags (--seed, --out,
--workers) override its top-level fields. All outputs are deterministic
byte-for-byte for a fixed config: JSON reports use sorted keys, CSVs use
'.' decimals and LF line endings, floats are printed with repr so they
round-trip exactly.

Exit codes: 0 success, 1 tolerance failure (where one applies), 2 config
error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, sim
from .blocking import AnchorSpec, partition
from .errors import ConfigError, StarSimError
from .numerics import Prng, Tensor2D, prng_fill, set_default_dtype
from .toy_model import ModelConfig, forward_global, greedy_decode_global, init_model

_CTX_SALT = 0xC0417E875EED5EED
_QRY_SALT = 0x0E5710785EED5EED
_ANCHOR_SALT = 0xA17C4B10C4ED5EED
_PROFILE_SALT = 0x9801F17E5EED5EED

MODES = ("star", "global", "ring-model")

# Anchor builds drive the ablation harness; each entry overrides only the
# content/position modes and inherits sizing from the config's anchor block.
ABLATION_STRATEGIES = {
    "no_anchor": ("none", "first_block"),
    "first_first": ("first_block", "first_block"),
    "pos_random_sampled": ("first_block", "random_sampled"),
    "pos_previous_block": ("first_block", "previous_block"),
    "content_constant_token": ("constant_token", "first_block"),
    "content_random_tokens": ("random_tokens", "first_block"),
    "content_shuffled_first_block": ("shuffled_first_block", "first_block"),
    "previous_block_anchor": ("previous_block", "previous_block"),
}


@dataclass
class ExperimentConfig:
    model: ModelConfig
    sequence_len: int
    block_size: int
    anchor: AnchorSpec
    hosts: int | None
    context_tokens: list[int]
    query_tokens: list[int]
    n_generate: int
    mode: str
    seed: int
    out: str
    tolerance: float
    workers: int
    precision: str
    bench_sweep: list[dict] = field(default_factory=list)
    ablate_strategies: list[str] = field(default_factory=list)
    profile_sink_boost: float = 0.0


def _require(doc: dict, allowed: set[str], where: str) -> None:
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown config field '{where}{key}'")


def _int_field(doc: dict, name: str, default, minimum: int | None = None):
    val = doc.get(name, default)
    if val is None:
        return None
    if not isinstance(val, int) or isinstance(val, bool):
        raise ConfigError(f"config field '{name}' must be an integer")
    if minimum is not None and val < minimum:
        raise ConfigError(f"config field '{name}' must be >= {minimum}")
    return val


def _tokens_from(doc: dict, text_key: str, tokens_key: str, vocab: int):
    if tokens_key in doc:
        toks = doc[tokens_key]
        if not isinstance(toks, list) or not all(
            isinstance(t, int) and 0 <= t < vocab for t in toks
        ):
            raise ConfigError(f"config field '{tokens_key}' must be ids in [0, {vocab})")
        return list(toks)
    if text_key in doc:
        raw = doc[text_key]
        if not isinstance(raw, str):
            raise ConfigError(f"config field '{text_key}' must be a string")
        toks = list(raw.encode("utf-8"))
        if any(t >= vocab for t in toks):
            raise ConfigError(f"config field '{text_key}' encodes outside vocab {vocab}")
        return toks
    return None


def build_experiment(doc: dict, overrides: dict | None = None) -> ExperimentConfig:
    """Validate a raw config document into an ExperimentConfig."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    doc = dict(doc)
    for key, val in (overrides or {}).items():
        if val is not None:
            doc[key] = val
    _require(
        doc,
        {
            "model", "sequence_len", "block_size", "anchor", "hosts",
            "context_text", "context_tokens", "query_text", "query_tokens",
            "query_len", "n_generate", "mode", "seed", "out", "tolerance",
            "workers", "precision", "bench", "ablate", "profile",
        },
        "",
    )

    model_doc = doc.get("model", {})
    _require(
        model_doc,
        {"vocab", "d_model", "heads", "layers", "ff_mult", "seed", "rope_theta"},
        "model.",
    )
    try:
        model = ModelConfig(
            d_model=model_doc.get("d_model", 32),
            heads=model_doc.get("heads", 2),
            layers=model_doc.get("layers", 2),
            vocab=model_doc.get("vocab", 256),
            ff_mult=model_doc.get("ff_mult", 2),
            seed=model_doc.get("seed", 0),
            rope_theta=model_doc.get("rope_theta", 10000.0),
        )
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from exc

    seed = _int_field(doc, "seed", 0)
    vocab = model.vocab

    context = _tokens_from(doc, "context_text", "context_tokens", vocab)
    L = _int_field(doc, "sequence_len", None, minimum=1)
    if context is not None:
        if L is not None and L != len(context):
            raise ConfigError(
                f"sequence_len {L} disagrees with supplied context of {len(context)}"
            )
        L = len(context)
    elif L is None:
        raise ConfigError("config needs 'sequence_len' or explicit context tokens")
    else:
        ctx_prng = Prng(seed ^ _CTX_SALT)
        context = [ctx_prng.randint_below(vocab) for _ in range(L)]

    query = _tokens_from(doc, "query_text", "query_tokens", vocab)
    if query is None:
        q_len = _int_field(doc, "query_len", 8, minimum=1)
        qry_prng = Prng(seed ^ _QRY_SALT)
        query = [qry_prng.randint_below(vocab) for _ in range(q_len)]
    elif "query_len" in doc and doc["query_len"] != len(query):
        raise ConfigError("query_len disagrees with supplied query tokens")
    if not query:
        raise ConfigError("query must be non-empty")

    block_size = _int_field(doc, "block_size", max(1, L // 4), minimum=1)
    anchor = AnchorSpec.from_config(doc.get("anchor", {}))
    hosts = _int_field(doc, "hosts", None, minimum=1)
    mode = doc.get("mode", "star")
    if mode not in MODES:
        raise ConfigError(f"config field 'mode' must be one of {MODES}, got {mode!r}")
    precision = doc.get("precision", "float32")
    if precision not in ("float32", "float64"):
        raise ConfigError("config field 'precision' must be 'float32' or 'float64'")
    tolerance = doc.get("tolerance", 1e-5)
    if not isinstance(tolerance, (int, float)) or tolerance <= 0:
        raise ConfigError("config field 'tolerance' must be a positive number")

    bench_doc = doc.get("bench", {})
    _require(bench_doc, {"sweep"}, "bench.")
    sweep = bench_doc.get("sweep", [])
    for i, point in enumerate(sweep):
        _require(point, {"L", "b", "H"}, f"bench.sweep[{i}].")
        if "L" not in point or "b" not in point:
            raise ConfigError(f"bench.sweep[{i}] needs 'L' and 'b'")

    ablate_doc = doc.get("ablate", {})
    _require(ablate_doc, {"strategies"}, "ablate.")
    strategies = ablate_doc.get("strategies", list(ABLATION_STRATEGIES))
    for name in strategies:
        if name not in ABLATION_STRATEGIES:
            raise ConfigError(
                f"unknown ablation strategy '{name}'; known: "
                f"{', '.join(ABLATION_STRATEGIES)}"
            )

    profile_doc = doc.get("profile", {})
    _require(profile_doc, {"sink_boost"}, "profile.")
    sink_boost = profile_doc.get("sink_boost", 0.0)
    if not isinstance(sink_boost, (int, float)):
        raise ConfigError("config field 'profile.sink_boost' must be a number")

    return ExperimentConfig(
        model=model,
        sequence_len=L,
        block_size=block_size,
        anchor=anchor,
        hosts=hosts,
        context_tokens=context,
        query_tokens=query,
        n_generate=_int_field(doc, "n_generate", 0, minimum=0),
        mode=mode,
        seed=seed,
        out=doc.get("out", "."),
        tolerance=float(tolerance),
        workers=_int_field(doc, "workers", 1, minimum=1),
        precision=precision,
        bench_sweep=sweep,
        ablate_strategies=list(strategies),
        profile_sink_boost=float(sink_boost),
    )


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path: Path, header: str, rows: list[str]) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(row + "\n")


def _anchor_for_strategy(base: AnchorSpec, name: str) -> AnchorSpec:
    content, position = ABLATION_STRATEGIES[name]
    return AnchorSpec(
        content_mode=content,
        position_mode=position,
        anchor_len=base.anchor_len,
        constant_token_id=base.constant_token_id,
        token_range=base.token_range,
    )


def _star_vs_global(cfg: ExperimentConfig, anchor: AnchorSpec):
    weights = init_model(cfg.model)
    tokens = cfg.context_tokens + cfg.query_tokens
    plan = partition(cfg.sequence_len, cfg.block_size, cfg.hosts)
    star_logits = sim.forward_star(
        weights, tokens, plan, anchor,
        prng=Prng(cfg.seed ^ _ANCHOR_SALT), workers=cfg.workers,
    )
    global_logits = forward_global(weights, tokens)
    query_rows = Tensor2D(global_logits.a[cfg.sequence_len :])
    return plan, star_logits, query_rows


def cmd_compare(cfg: ExperimentConfig) -> int:
    """Two-phase vs global logits on identical inputs; JSON divergence report."""
    plan, star_logits, global_rows = _star_vs_global(cfg, cfg.anchor)
    div = baselines.divergence(star_logits, global_rows)
    exact_regime = plan.num_blocks <= 2
    within = div.max_abs <= cfg.tolerance
    star_next = int(np.argmax(star_logits.a[-1]))
    global_next = int(np.argmax(global_rows.a[-1]))
    report = {
        "sequence_len": cfg.sequence_len,
        "block_size": cfg.block_size,
        "num_blocks": plan.num_blocks,
        "anchor": cfg.anchor.to_config(),
        "tolerance": cfg.tolerance,
        "exact_regime": exact_regime,
        "within_tolerance": within,
        "divergence": div.to_json(),
        "greedy_next": {
            "star": star_next,
            "global": global_next,
            "match": star_next == global_next,
        },
    }
    path = _out_dir(cfg) / "compare.json"
    _write_json(path, report)
    print(f"compare: max_abs={div.max_abs!r} n_blocks={plan.num_blocks} -> {path}")
    return 0 if (not exact_regime or within) else 1


def cmd_bench(cfg: ExperimentConfig) -> int:
    """Analytic cost rows for each sweep point (no simulation involved)."""
    if not cfg.bench_sweep:
        raise ConfigError("bench.sweep is empty")
    d, heads = cfg.model.head_dim, cfg.model.heads
    l_q, n_gen = len(cfg.query_tokens), cfg.n_generate
    rows = []
    for point in cfg.bench_sweep:
        L, b = point["L"], point["b"]
        H = point.get("H")
        star = baselines.star_model(
            L, b, d=d, heads=heads, l_q=l_q, n_generated=n_gen, hosts=H
        )
        n_hosts = H if H is not None else -(-L // b)
        ring = baselines.ring_model(L, n_hosts, d, heads)
        gpairs = L * (L + 1) // 2
        ratio = star.phase1_pairs / gpairs
        rows.append(
            f"{L},{b},{n_hosts},{star.phase1_pairs},{gpairs},"
            f"{star.phase2_comm},{ring.phase1_comm},{ratio!r}"
        )
    path = _out_dir(cfg) / "bench.csv"
    _write_csv(path, "L,b,H,star_pairs,global_pairs,star_comm,ring_comm,pair_ratio", rows)
    print(f"bench: {len(rows)} rows -> {path}")
    return 0


def cmd_ablate(cfg: ExperimentConfig) -> int:
    """Divergence of each anchor strategy against the global reference."""
    rows = []
    for name in cfg.ablate_strategies:
        anchor = _anchor_for_strategy(cfg.anchor, name)
        _, star_logits, global_rows = _star_vs_global(cfg, anchor)
        div = baselines.divergence(star_logits, global_rows)
        rows.append(
            f"{name},{div.max_abs!r},{div.mean_abs!r},{div.cosine_per_row_min!r}"
        )
    path = _out_dir(cfg) / "ablate.csv"
    _write_csv(path, "strategy,max_abs,mean_abs,cosine_per_row_min", rows)
    print(f"ablate: {len(rows)} strategies -> {path}")
    return 0


def cmd_profile(cfg: ExperimentConfig) -> int:
    """Attention-mass profiles over one synthetic Q/K for all three modes."""
    L, d = cfg.sequence_len, cfg.model.head_dim
    prng = Prng(cfg.seed ^ _PROFILE_SALT)
    q = prng_fill(prng, L, d, 1.0)
    k = prng_fill(prng, L, d, 1.0)
    plan = partition(L, cfg.block_size, cfg.hosts)
    out = _out_dir(cfg)
    paths = []
    for mode in baselines.PROFILE_MODES:
        mass = baselines.attention_mass_profile(
            q, k, plan, mode, sink_boost=cfg.profile_sink_boost
        )
        rows = [f"{pos},{float(m)!r}" for pos, m in enumerate(mass)]
        path = out / f"profile_{mode}.csv"
        _write_csv(path, "position,mass", rows)
        paths.append(str(path))
    print(f"profile: wrote {', '.join(paths)}")
    return 0


def cmd_decode(cfg: ExperimentConfig) -> int:
    """Generate tokens (two-phase or global path) and dump the ledger."""
    weights = init_model(cfg.model)
    tokens = cfg.context_tokens + cfg.query_tokens
    out = _out_dir(cfg)
    if cfg.mode == "ring-model":
        raise ConfigError("mode 'ring-model' is analytic only; use the bench command")
    if cfg.mode == "global":
        generated = greedy_decode_global(weights, tokens, cfg.n_generate)
        ledger_csv = None
    else:
        plan = partition(cfg.sequence_len, cfg.block_size, cfg.hosts)
        _, session = sim.start_session(
            weights, tokens, plan, cfg.anchor,
            prng=Prng(cfg.seed ^ _ANCHOR_SALT), workers=cfg.workers,
        )
        generated = sim.decode(session, cfg.n_generate)
        session.ledger.write_csv(out / "ledger.csv")
        ledger_csv = "ledger.csv"
    text = bytes(t for t in generated if 32 <= t < 127).decode("ascii")
    report = {
        "mode": cfg.mode,
        "generated": generated,
        "printable_text": text,
        "ledger_csv": ledger_csv,
    }
    _write_json(out / "decode.json", report)
    print(f"decode: {len(generated)} tokens -> {out / 'decode.json'}")
    return 0


def _resolve_workers(args, doc: dict) -> int | None:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("STARSIM_WORKERS")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"STARSIM_WORKERS must be an integer, got {env!r}") from exc
    return None  # fall through to the config file / default


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="starsim",
        description="two-phase block-sparse attention simulator",
    )
    parser.add_argument("command", choices=["compare", "bench", "ablate", "profile", "decode"])
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--workers", type=int, default=None,
                        help="worker threads (else $STARSIM_WORKERS, else config)")
    args = parser.parse_args(argv)

    try:
        try:
            with open(args.config) as f:
                doc = json.load(f)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        overrides = {
            "seed": args.seed,
            "out": args.out,
            "workers": _resolve_workers(args, doc),
        }
        cfg = build_experiment(doc, overrides)
        set_default_dtype(cfg.precision)
        handler = {
            "compare": cmd_compare,
            "bench": cmd_bench,
            "ablate": cmd_ablate,
            "profile": cmd_profile,
            "decode": cmd_decode,
        }[args.command]
        return handler(cfg)
    except StarSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
