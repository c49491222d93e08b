"""
divscan package

Feature diversity of network weights, the Calibrated Imagenet Score,
transferability statistics, representation metrics, boosted-tree feature
importance and a toy Controlled Label Injection trainer.
"""

from .config import TOOL_VERSION, Settings
from .diversity import ClusterParams, DiversityReport, cluster_diversity, model_diversity, spectral_diversity
from .errors import BundleIOError, DivscanError, NumericalError, ValidationError
from .gbdt_importance import GbdtConfig, ImportanceVector, fit, importance, importance_table, predict
from .repr_metrics import ActivationMatrix, ClassMetrics, cka_abstraction_score, cka_linear, cka_minibatch, class_metrics
from .tensor_io import AccuracyTable, EmbeddingSet, LayerTensor, TensorBundle, load_bundle, write_bundle
from .toytrain import InjectionConfig, SyntheticTask, ToyModel, controlled_label_injection, make_task
from .transfer_stats import CorrelationReport, TransferScores, cis, correlate, transfer_scores

__version__ = TOOL_VERSION

__all__ = [
    'Settings',
    'ClusterParams',
    'DiversityReport',
    'cluster_diversity',
    'spectral_diversity',
    'model_diversity',
    'DivscanError',
    'ValidationError',
    'BundleIOError',
    'NumericalError',
    'GbdtConfig',
    'ImportanceVector',
    'fit',
    'predict',
    'importance',
    'importance_table',
    'ActivationMatrix',
    'ClassMetrics',
    'cka_linear',
    'cka_minibatch',
    'cka_abstraction_score',
    'class_metrics',
    'AccuracyTable',
    'EmbeddingSet',
    'LayerTensor',
    'TensorBundle',
    'load_bundle',
    'write_bundle',
    'InjectionConfig',
    'SyntheticTask',
    'ToyModel',
    'controlled_label_injection',
    'make_task',
    'CorrelationReport',
    'TransferScores',
    'cis',
    'correlate',
    'transfer_scores',
]
