"""Semantic-ID inverted indexing with learned quantized multi-vector tokens.

Typical flow: train a touch head (quantizer) and a rank head, build an
inverted index from document SIDs, then search by SID-union retrieval
followed by late-interaction ranking.
"""

from .errors import ConfigError, LoadError, UnidexError, ValidationError
from .index import InvertedIndex, build_index, load_index, save_index
from .pipeline import SearchEngine, evaluate, mrr_at_k, recall_at_k
from .quantizer import QuantizerConfig, QuantizerHead, init_head, load_checkpoint, save_checkpoint
from .synthetic import BenchmarkConfig, ClusteredBenchmark
from .trainer import LossConfig, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BenchmarkConfig",
    "ClusteredBenchmark",
    "ConfigError",
    "InvertedIndex",
    "LoadError",
    "LossConfig",
    "QuantizerConfig",
    "QuantizerHead",
    "SearchEngine",
    "TrainConfig",
    "UnidexError",
    "ValidationError",
    "build_index",
    "evaluate",
    "init_head",
    "load_checkpoint",
    "load_index",
    "mrr_at_k",
    "recall_at_k",
    "save_checkpoint",
    "save_index",
    "train",
]
