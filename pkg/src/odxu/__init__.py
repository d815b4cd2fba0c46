"""Payload-byte intrusion detection toolkit.

A staged pipeline over raw packet payload bytes: an autoencoder compresses
1500-byte payloads to a small latent vector, a clustering head organizes
the latent space, a gradient-boosted tree classifier labels traffic, and a
second "metamodel" classifier predicts when the first one is wrong.  The
transfer harness adapts a trained pipeline to new traffic under six
fine-tune/retrain recipes, and the evaluation suite scores everything,
including detection of attack classes never seen in training.
"""

from .data import (
    PAYLOAD_WIDTH,
    Dataset,
    PayloadRecord,
    SplitPlan,
    load_cache,
    load_csv,
    rebalance,
    save_cache,
    split_indices,
    synth_generate,
    take_portion,
)
from .dec import ClusteringHead, cluster_purity, train_embedded_clustering
from .evaluation import (
    auroc,
    classification_metrics,
    emit_report,
    osr_eval,
    tp_at_tn,
)
from .exceptions import (
    CheckpointError,
    DataFormatError,
    OdxuError,
    StageError,
    TrainingDivergedError,
)
from .gbt import GradientBoostedTrees, classical_ig, tree_shap_single
from .nn import Autoencoder, FcnnClassifier, TrainConfig
from .stopping import EarlyStop, early_stop_check
from .transfer import (
    Action,
    ScenarioSpec,
    enumerate_cases,
    run_grid,
    run_scenario,
)
from .uq import Metamodel, build_meta_set, confidence_scores, entropy_scores

__version__ = "0.1.0"

__all__ = [
    "PAYLOAD_WIDTH", "Dataset", "PayloadRecord", "SplitPlan",
    "load_cache", "load_csv", "rebalance", "save_cache", "split_indices",
    "synth_generate", "take_portion",
    "ClusteringHead", "cluster_purity", "train_embedded_clustering",
    "auroc", "classification_metrics", "emit_report", "osr_eval", "tp_at_tn",
    "CheckpointError", "DataFormatError", "OdxuError", "StageError",
    "TrainingDivergedError",
    "GradientBoostedTrees", "classical_ig", "tree_shap_single",
    "Autoencoder", "FcnnClassifier", "TrainConfig",
    "EarlyStop", "early_stop_check",
    "Action", "ScenarioSpec", "enumerate_cases", "run_grid", "run_scenario",
    "Metamodel", "build_meta_set", "confidence_scores", "entropy_scores",
    "__version__",
]
