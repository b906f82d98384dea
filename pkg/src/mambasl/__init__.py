"""MambaSL: single-layer selective state-space classifier for
multivariate time series, with a full train/evaluate/ablate engine."""

from .config import BlockConfig, ModelConfig, SsmConfig, TrainConfig
from .data import (TimeSeriesDataset, batch_iter, fit_normalizer, parse_ts,
                   parse_ts_file, write_ts)
from .errors import (CheckpointError, DataError, MambaSLError, NumericError,
                     SchemaError, TsParseError)
from .estimator import MambaSLClassifier
from .metrics import average_rank, wilcoxon_signed_rank
from .model import init_params, kernel_size, model_forward, param_count, predict
from .training import evaluate, radam_step, softmax_cross_entropy, train

__version__ = "0.1.0"

__all__ = [
    "BlockConfig", "ModelConfig", "SsmConfig", "TrainConfig",
    "TimeSeriesDataset", "batch_iter", "fit_normalizer", "parse_ts",
    "parse_ts_file", "write_ts",
    "MambaSLError", "TsParseError", "DataError", "SchemaError",
    "NumericError", "CheckpointError",
    "MambaSLClassifier",
    "average_rank", "wilcoxon_signed_rank",
    "init_params", "kernel_size", "model_forward", "param_count", "predict",
    "evaluate", "radam_step", "softmax_cross_entropy", "train",
    "__version__",
]
