"""tinfer: a desk-scale decoder-transformer inference engine.

Independently toggleable optimizations — KV caching, half precision,
embedding pruning, operator fusion, memory-reuse planning, length-sorted
dynamic batching, and a four-stage concurrent pipeline — plus a benchmark
harness that times them as a cumulative ablation ladder.
"""

from .errors import (
    BindingError,
    CapacityError,
    ConfigError,
    CorrectnessError,
    DimensionError,
    FormatError,
    GraphError,
    NumericError,
    ParameterError,
    PlanError,
    PositionError,
    PrecisionError,
    TinferError,
    VocabError,
)
from .tensor import DType, Tensor, cast, gemm, layer_norm, softmax_rows
from .model import (
    KVCache,
    Model,
    ModelConfig,
    batched_greedy_decode,
    cast_model,
    decode_step,
    embed,
    forward_full,
    greedy_decode,
    init_random,
    load_model,
    reference_config,
    save_model,
)
from .tokenizer import Tokenizer, Vocab, build, read_vocab, write_vocab
from .pruning import (
    PrunedVocabMap,
    build_pruned_vocab,
    prune_position_embedding,
    prune_token_embedding,
    prune_vocab,
    scan_frequencies,
)
from .graphopt import (
    ArenaPlan,
    Node,
    OpGraph,
    TensorInfo,
    analyze_lifetimes,
    execute,
    fuse_horizontal,
    fuse_vertical,
    optimize,
    plan_memory,
    reference_block_graph,
)
from .pipeline import (
    BatchPlan,
    PipelineSettings,
    StageStats,
    WorkItem,
    plan_batches,
    run_pipeline,
    run_sequential,
)
from .bench import BenchOptions, BenchReport, emit_report, gen_dataset, gen_vocab, run_ablation

__version__ = "0.1.0"
