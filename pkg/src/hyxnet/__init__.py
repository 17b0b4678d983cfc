"""Graph-free DNS tunnel detection with an exponential-forget xLSTM classifier."""

from .encoder import FeatureScaler, bucketize, fit_scaler, tokenize, transform
from .ingest import DnsEvent, FeatureSchema, LabelMap, parse_dataset, parse_log_line, split_events
from .model import HyxnetConfig, Prediction, count_params, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "DnsEvent",
    "FeatureScaler",
    "FeatureSchema",
    "HyxnetConfig",
    "LabelMap",
    "Prediction",
    "bucketize",
    "count_params",
    "fit_scaler",
    "load_checkpoint",
    "parse_dataset",
    "parse_log_line",
    "save_checkpoint",
    "split_events",
    "tokenize",
    "transform",
]
