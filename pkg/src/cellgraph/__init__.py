"""Nucleus-type classification over cell graphs, trained on a synthetic
histology-like corpus, on top of a small self-contained autodiff engine."""

__version__ = "0.1.0"

from .config import ModelConfig, TrainConfig
from .data import CorpusConfig, Sample, generate_corpus, generate_sample, read_corpus, split, write_corpus
from .graphs import CellGraph, LinkMarkers, build_knn_graph, link_markers, normalized_laplacian
from .metrics import confusion_matrix, fscores
from .tensor import Tape, Tensor

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "CorpusConfig",
    "Sample",
    "generate_corpus",
    "generate_sample",
    "read_corpus",
    "split",
    "write_corpus",
    "CellGraph",
    "LinkMarkers",
    "build_knn_graph",
    "link_markers",
    "normalized_laplacian",
    "confusion_matrix",
    "fscores",
    "Tape",
    "Tensor",
    "__version__",
]
