"""Semi-supervised object placement on synthetic scenes with an analytic rationality oracle."""

from .config import ConfigError, ExperimentConfig, load_config
from .data import (
    DatasetFormatError,
    DatasetSplit,
    PairRecord,
    build_splits,
    build_validation,
    init_pseudo_labels,
    load_split,
    save_split,
    similarity_label,
)
from .evaluation import (
    evaluate_splits,
    f1_and_balanced_accuracy,
    oracle_plausibility_accuracy,
    placement_diversity,
    top_k_sample,
)
from .model import (
    FOPA_STYLE,
    SOPA_STYLE,
    Heatmap,
    ModelStack,
    extract_features,
    grad_reverse,
    heatmap,
    load_checkpoint,
    predict_domain,
    predict_rationality,
    predict_similarity,
    save_checkpoint,
)
from .scene import Placement, Scene, SceneSpec, generate_scene, oracle_label, oracle_labels, rasterize_pair, sample_placements
from .training import (
    DivergenceError,
    LossWeights,
    TrainState,
    correct_labels,
    loss_dom,
    loss_sim,
    loss_sup,
    make_state,
    run_ssl,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DatasetFormatError",
    "DatasetSplit",
    "DivergenceError",
    "ExperimentConfig",
    "FOPA_STYLE",
    "Heatmap",
    "LossWeights",
    "ModelStack",
    "PairRecord",
    "Placement",
    "SOPA_STYLE",
    "Scene",
    "SceneSpec",
    "TrainState",
    "build_splits",
    "build_validation",
    "correct_labels",
    "evaluate_splits",
    "extract_features",
    "f1_and_balanced_accuracy",
    "generate_scene",
    "grad_reverse",
    "heatmap",
    "init_pseudo_labels",
    "load_checkpoint",
    "load_config",
    "load_split",
    "loss_dom",
    "loss_sim",
    "loss_sup",
    "make_state",
    "oracle_label",
    "oracle_labels",
    "oracle_plausibility_accuracy",
    "placement_diversity",
    "predict_domain",
    "predict_rationality",
    "predict_similarity",
    "rasterize_pair",
    "run_ssl",
    "sample_placements",
    "save_checkpoint",
    "save_split",
    "similarity_label",
    "top_k_sample",
    "train_step",
    "__version__",
]
