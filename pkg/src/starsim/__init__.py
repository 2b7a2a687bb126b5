"""Two-phase block-sparse attention simulator with exact distributed merging."""

from .attention import (
    AttnScale,
    PartialAttention,
    causal_attention,
    merge_partials,
    partial_attention,
    streaming_causal_attention,
)
from .baselines import (
    DivergenceReport,
    FlopReport,
    attention_mass_profile,
    divergence,
    global_oracle,
    global_pairs,
    ring_model,
    star_model,
)
from .blocking import (
    AnchorSpec,
    AugmentedBlock,
    BlockPlan,
    KVCache,
    augment,
    encode_block,
    partition,
    sparsity_pattern,
)
from .errors import ConfigError, DomainError, ShapeError, StarSimError
from .numerics import (
    Prng,
    RopeConfig,
    Tensor2D,
    default_dtype,
    log_sum_exp,
    matmul,
    precision,
    prng_fill,
    rope_apply,
    set_default_dtype,
    softmax_rows,
)
from .sim import (
    CommLedger,
    DecodeSession,
    Host,
    decode,
    forward_star,
    run_phase1,
    run_phase2_step,
    set_query_host,
    start_session,
)
from .toy_model import (
    ModelConfig,
    ModelWeights,
    forward_global,
    greedy_decode_global,
    init_model,
    load_weights,
    save_weights,
)

__version__ = "0.1.0"
