"""Unsupervised cross-modality label association on embedding vectors.

Two modalities are clustered independently, a shared encoder with one
classifier head per modality is warmed up on those clusters, and training then
alternates between optimal-transport label assignment across modalities,
neighbour-consistency label refinement and a consistency-regularised update.
"""

from .config import RunConfig, load_config
from .data import (
    KMeansLabeler,
    ModalityDataset,
    PseudoLabeling,
    SynthConfig,
    cluster_init,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .evaluation import RetrievalReport, compute_metrics, evaluate, retrieve
from .exceptions import (
    ConfigError,
    ConvergenceWarning,
    DataError,
    EvaluationError,
    ParseError,
    TrainingError,
    XModalError,
)
from .losses import LossWeights
from .model import ModelParams, SgdConfig, forward, grad_check, load_checkpoint, save_checkpoint
from .neighbor import NclrConfig, inconsistency_scores, knn, refine_labels, split_clean_noisy
from .trainer import CrossModalReID, TrainConfig, epoch_refresh, fit_pipeline, train_stage1, train_stage2
from .transport import SinkhornAssigner, TransportConfig, dual_assign, hard_assign, ot_objective, sinkhorn_plan

__version__ = "0.1.0"

__all__ = [
    "cluster_init",
    "compute_metrics",
    "ConfigError",
    "ConvergenceWarning",
    "CrossModalReID",
    "DataError",
    "dual_assign",
    "epoch_refresh",
    "evaluate",
    "EvaluationError",
    "fit_pipeline",
    "forward",
    "generate_dataset",
    "grad_check",
    "hard_assign",
    "inconsistency_scores",
    "KMeansLabeler",
    "knn",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "LossWeights",
    "ModalityDataset",
    "ModelParams",
    "NclrConfig",
    "ot_objective",
    "ParseError",
    "PseudoLabeling",
    "refine_labels",
    "RetrievalReport",
    "retrieve",
    "RunConfig",
    "save_checkpoint",
    "save_dataset",
    "SgdConfig",
    "sinkhorn_plan",
    "SinkhornAssigner",
    "split_clean_noisy",
    "SynthConfig",
    "train_stage1",
    "train_stage2",
    "TrainConfig",
    "TrainingError",
    "TransportConfig",
    "XModalError",
]
