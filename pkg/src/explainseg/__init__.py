"""Weakly supervised lesion pseudo-labels from an iteratively explained slice classifier."""
from .attribution import AttributionConfig, Reference, attribute, integrated_gradients
from .classifier import ClassifierParams, MiniVolumeDataset, TrainConfig, predict_proba, train
from .clustering import Cluster, ClusterSet, connected_components, hysteresis_cluster
from .errors import ExplainSegError
from .evaluation import MetricsReport, auc_roc, evaluate_dataset, match_clusters, prf
from .phantom import PhantomConfig, generate_dataset, generate_phantom
from .pipeline import PipelineConfig, generate_pseudolabels, iexplain_minivolume
from .volume import MiniVolume, Volume, extract_minivolume, hu_window

__version__ = "0.1.0"

__all__ = [
    "AttributionConfig", "Reference", "attribute", "integrated_gradients",
    "ClassifierParams", "MiniVolumeDataset", "TrainConfig", "predict_proba", "train",
    "Cluster", "ClusterSet", "connected_components", "hysteresis_cluster",
    "ExplainSegError", "MetricsReport", "auc_roc", "evaluate_dataset", "match_clusters", "prf",
    "PhantomConfig", "generate_dataset", "generate_phantom",
    "PipelineConfig", "generate_pseudolabels", "iexplain_minivolume",
    "MiniVolume", "Volume", "extract_minivolume", "hu_window",
]
