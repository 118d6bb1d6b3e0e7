"""Graph search networks: multi-label image classification that propagates
detector evidence over a small, greedily expanded part of a knowledge graph."""

from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    GsnnError,
    NumericError,
    ParseError,
    StateError,
    VersionError,
)
from .kgraph import KnowledgeGraph, build_graph, fuse_taxonomy, load_graph, save_graph
from .pipeline import BaselineModel, Example, GsnnModel, TrainConfig, predict, train
from .search import GsnnConfig, run_dense_ggnn, run_gsnn

__version__ = "0.1.0"

__all__ = [
    "BaselineModel", "ConfigError", "DimensionError", "DomainError", "Example", "GsnnConfig", "GsnnError",
    "GsnnModel", "KnowledgeGraph", "NumericError", "ParseError", "StateError", "TrainConfig", "VersionError",
    "build_graph", "fuse_taxonomy", "load_graph", "predict", "run_dense_ggnn", "run_gsnn", "save_graph", "train",
]
