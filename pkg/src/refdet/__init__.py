"""Reference-based unsupervised category-aware object detection at desk scale."""
from ._accel import backend
from .assignment import MatchIndexPairs, PseudoAnnotation, QueryPrediction, hungarian_match
from .config import Config, load_config
from .encoder import ToyEmbedder
from .losses import expected_fs_loss, fs_loss
from .maskcut import maskcut

__version__ = "0.1.0"

__all__ = ["Config", "MatchIndexPairs", "PseudoAnnotation", "QueryPrediction", "ToyEmbedder", "backend",
           "expected_fs_loss", "fs_loss", "hungarian_match", "load_config", "maskcut"]
