"""KV-channel pruning for small decoder-only transformers (C++ core)."""

from ._kvprune import (  # noqa: F401
    Checkpoint,
    Error,
    ModelConfig,
    ScaleMode,
    allocate_ppl_based,
    allocate_rank_based,
    allocate_uniform,
    content_hash,
    decode,
    encode,
    eval_ppl,
    forward,
    generate,
    init_checkpoint,
    kv_bytes,
    load_checkpoint,
    prune_l1,
    run_cli,
    save_checkpoint,
)
