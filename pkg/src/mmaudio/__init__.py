"""Acoustic representation learning from machine-labelled video audio.

Log-mel frontend, VGGish-family CNNs on a small NumPy engine, machine
annotation of videos, and transfer evaluation on frozen embeddings.
"""

from .annotate import LabelVocabulary, VideoAnnotation, VideoRecord, annotate_corpus, shard
from .evaluation import TransferClassifier, mean_average_precision, roc_auc, run_protocol, top_n
from .frontend import LogMelExtractor, Waveform, log_mel, standardize
from .models import Network, build_variant, count_flops, count_parameters, infer_shapes
from .train import TrainConfig, VGGishEstimator, run_training

__version__ = "0.1.0"

__all__ = [
    "LabelVocabulary",
    "LogMelExtractor",
    "Network",
    "TrainConfig",
    "TransferClassifier",
    "VGGishEstimator",
    "VideoAnnotation",
    "VideoRecord",
    "Waveform",
    "annotate_corpus",
    "build_variant",
    "count_flops",
    "count_parameters",
    "infer_shapes",
    "log_mel",
    "mean_average_precision",
    "roc_auc",
    "run_protocol",
    "run_training",
    "shard",
    "standardize",
    "top_n",
]
