"""Prediction backends: remote chat-completions, planted mock, and the shared cache."""

from .cache import PredictionCache, cache_key
from .config import BackendConfig, MockParams
from .core import Backend, make_backend
from .extract import extract_label, label_scores_from_logprobs, softmax
from .mock import mock_predict

__all__ = [
    "Backend",
    "BackendConfig",
    "MockParams",
    "PredictionCache",
    "cache_key",
    "extract_label",
    "label_scores_from_logprobs",
    "make_backend",
    "mock_predict",
    "softmax",
]
