"""relfuse: ensemble decoding across heterogeneous tokenizer vocabularies.

Models that share no tokenizer still share most of the text they talk
about.  relfuse maps each model's next-token distribution into a common
anchor-relative space, averages there, and searches back onto one
model's vocabulary to pick the next token.
"""

from __future__ import annotations

from .backends import (
    ModelBackend,
    NGramModel,
    RemoteBackend,
    TableModel,
    build_embeddings,
    cooccurrence_ppmi,
    ngram_from_text,
    remote_backend,
    serve_connection,
    serve_socket,
    serve_stdio,
    train_ngram,
)
from .decode import (
    DecodeTrace,
    EnsembleSession,
    TraceStep,
    ensemble_step,
    generate,
    load_trace,
    save_trace,
    score_option,
)
from .errors import (
    ArgumentError,
    BackendError,
    ConfigError,
    NumericError,
    RelfuseError,
)
from .fusion import (
    AbsoluteDistribution,
    EnsembleConfig,
    aggregate,
    inverse_transform,
    kl_gradient,
    kl_loss,
    to_relative,
)
from .harness import (
    EvalItem,
    ExperimentSetup,
    ablate_normalization,
    build_setup,
    evaluate,
    load_dataset,
    run_report,
    save_dataset,
    select_main_model,
    sweep_anchor_count,
    sweep_eta,
    sweep_steps,
    write_report,
)
from .relspace import (
    EmbeddingTable,
    NeighborStats,
    RelativeMatrix,
    build_relative_matrix,
    consistency,
    load_embeddings,
    load_relative_matrix,
    nn_distance_histogram,
    normalize_rows,
    save_embeddings,
    save_relative_matrix,
)
from .vocab import (
    AnchorSet,
    GreedyTokenizer,
    Token,
    Vocabulary,
    canonicalize,
    common_tokens,
    load_vocabulary,
    parse_anchor_strategy,
    save_vocabulary,
    select_anchors,
)

__version__ = "0.1.0"

__all__ = [
    "AbsoluteDistribution",
    "AnchorSet",
    "ArgumentError",
    "BackendError",
    "ConfigError",
    "DecodeTrace",
    "EmbeddingTable",
    "EnsembleConfig",
    "EnsembleSession",
    "EvalItem",
    "ExperimentSetup",
    "GreedyTokenizer",
    "ModelBackend",
    "NGramModel",
    "NeighborStats",
    "NumericError",
    "RelativeMatrix",
    "RelfuseError",
    "RemoteBackend",
    "TableModel",
    "Token",
    "TraceStep",
    "Vocabulary",
    "__version__",
    "ablate_normalization",
    "aggregate",
    "build_embeddings",
    "build_relative_matrix",
    "build_setup",
    "canonicalize",
    "common_tokens",
    "consistency",
    "cooccurrence_ppmi",
    "ensemble_step",
    "evaluate",
    "generate",
    "inverse_transform",
    "kl_gradient",
    "kl_loss",
    "load_dataset",
    "load_embeddings",
    "load_relative_matrix",
    "load_trace",
    "load_vocabulary",
    "ngram_from_text",
    "nn_distance_histogram",
    "normalize_rows",
    "parse_anchor_strategy",
    "remote_backend",
    "run_report",
    "save_dataset",
    "save_embeddings",
    "save_relative_matrix",
    "save_trace",
    "save_vocabulary",
    "score_option",
    "select_anchors",
    "select_main_model",
    "serve_connection",
    "serve_socket",
    "serve_stdio",
    "sweep_anchor_count",
    "sweep_eta",
    "sweep_steps",
    "train_ngram",
    "write_report",
]
