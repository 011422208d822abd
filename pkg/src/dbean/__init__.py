"""Bidirectional Elman network with dynamic attention and test-time adaptation,
plus bag-of-words, TFIDF and bag-of-means baselines for news topic classification."""
from .kernels import BACKEND, available_backends
from .model import ModelParams, backward_batch, forward, forward_batch, make_batch, predict_proba
from .report import ClassificationReport, fingerprint
from .tensor import NumericError, ShapeError
from .text import DataError, Vocabulary, bpe_encode, bpe_train, clean_text, encode_example, pad_truncate
from .trainer import CheckpointError, TrainConfig, TrainState, evaluate, fit, load_checkpoint, save_checkpoint
from .ttt import AdaptConfig, adapt_and_classify, adapt_evaluate

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "available_backends",
    "ModelParams", "backward_batch", "forward", "forward_batch", "make_batch", "predict_proba",
    "ClassificationReport", "fingerprint",
    "NumericError", "ShapeError", "DataError", "CheckpointError",
    "Vocabulary", "bpe_encode", "bpe_train", "clean_text", "encode_example", "pad_truncate",
    "TrainConfig", "TrainState", "evaluate", "fit", "load_checkpoint", "save_checkpoint",
    "AdaptConfig", "adapt_and_classify", "adapt_evaluate",
]
