"""Objective quality prediction for time-scale modified audio."""

__version__ = "0.1.0"

from .audio_io import AudioSignal, load_audio, load_pair, prepare, truncate_active
from .errors import AudioError, DataError, FeatureError, NumericError, SchemaError, TsmQualError
from .net import load_model, predict, save_model, train
from .pipeline import FEATURE_NAMES, FeatureConfig, extract_features
from .spectral import AlignmentMode, stft

__all__ = [
    "AlignmentMode", "AudioError", "AudioSignal", "DataError", "FEATURE_NAMES",
    "FeatureConfig", "FeatureError", "NumericError", "SchemaError", "TsmQualError",
    "extract_features", "load_audio", "load_model", "load_pair", "predict", "prepare",
    "save_model", "stft", "train", "truncate_active",
]
