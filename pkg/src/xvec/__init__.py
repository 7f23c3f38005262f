"""Speaker embedding toolkit: an x-vector network with statistics,
attention and multi-head attention pooling, trained and evaluated on
synthetic data with known informative frames."""

from .data import Dataset, SynthConfig, Utterance, gen_synthetic, load_dataset, read_features, write_features
from .errors import ConfigError, DataError, FormatError, TrainingError, XvecError
from .evaluation import (
    MetricsReport,
    Trial,
    attention_trajectory,
    compute_eer,
    compute_metrics,
    compute_min_dcf,
    gate_correlation,
    make_trials,
    score_trials,
)
from .model import ForwardTrace, FrameLayerSpec, Model, ModelConfig, build_model, load_model, save_model
from .train import GradCheckReport, TrainConfig, TrainReport, check_model_gradients, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "Dataset",
    "FormatError",
    "ForwardTrace",
    "FrameLayerSpec",
    "GradCheckReport",
    "MetricsReport",
    "Model",
    "ModelConfig",
    "SynthConfig",
    "TrainConfig",
    "TrainReport",
    "TrainingError",
    "Trial",
    "Utterance",
    "XvecError",
    "attention_trajectory",
    "build_model",
    "check_model_gradients",
    "compute_eer",
    "compute_metrics",
    "compute_min_dcf",
    "gate_correlation",
    "gen_synthetic",
    "load_dataset",
    "load_model",
    "make_trials",
    "read_features",
    "save_model",
    "score_trials",
    "train",
    "write_features",
    "__version__",
]
