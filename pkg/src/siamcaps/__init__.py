"""Siamese capsule-network back-end for speaker verification."""

from .capsbackend import (
    BackendConfig,
    BackendParams,
    RoutingState,
    dynamic_routing,
    init_params,
    normalize_parts,
    pair_embeddings,
    parameter_count,
    primary_capsule_stage,
    score,
)
from .embedio import (
    EmbeddingRecord,
    EmbeddingStore,
    SynthSpec,
    cosine_score,
    generate_synthetic,
    import_csv,
    read_store,
    write_store,
)
from .evaluator import ScoreRecord, TrialRecord, compute_eer, det_points, read_trials, score_trials
from .trainer import TrainConfig, Triplet, cyclical_lr, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
