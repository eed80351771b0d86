"""Label-noise-robust training with meta-learned soft labels."""

from .data import (
    Dataset,
    NoiseSpec,
    UnlabeledLabelError,
    inject_feature_dependent,
    inject_uniform,
    load_dataset,
    make_synthetic,
    mark_unlabeled,
    save_dataset,
    split_dataset,
)
from .engine import Tensor, grad, no_grad, softmax
from .harness import (
    TrainConfig,
    baseline_ce,
    build_dataset,
    clone_extractor,
    evaluate,
    run_experiment,
    warmup_phase,
)
from .meta import (
    FeatureExtractor,
    SoftLabeler,
    conventional_step,
    extract_features,
    generate_soft_labels,
    meta_loss,
    meta_step,
    similarity_matrix,
    virtual_update,
)
from .nn import Mlp, cce_loss, entropy_loss, init_mlp, kl_loss, one_hot

__version__ = "0.1.0"

__all__ = [
    "Dataset", "NoiseSpec", "UnlabeledLabelError", "Tensor", "TrainConfig",
    "FeatureExtractor", "SoftLabeler", "Mlp",
    "make_synthetic", "split_dataset", "inject_uniform",
    "inject_feature_dependent", "mark_unlabeled", "save_dataset",
    "load_dataset", "grad", "no_grad", "softmax", "cce_loss", "kl_loss",
    "entropy_loss", "init_mlp", "one_hot", "extract_features",
    "generate_soft_labels", "virtual_update", "meta_loss", "meta_step",
    "similarity_matrix", "conventional_step", "baseline_ce", "build_dataset",
    "clone_extractor", "evaluate", "run_experiment", "warmup_phase",
]
