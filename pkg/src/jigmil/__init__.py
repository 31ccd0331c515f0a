"""jigmil: spatially-aware multiple-instance learning on bags of patch
embeddings, with graph-attention refinement, attention pooling, a spatial
location auxiliary task, and EM-style calibration of its weight."""

__version__ = "0.1.0"

from .config import TrainConfig
from .data import Manifest, PatchBag, SynthSpec, generate_synthetic_dataset
from .graph import SlideGraph, build_slide_graph
from .model import Model, init_model, load_model, save_model
from .trainer import cross_validate, evaluate, roc_auc, train

__all__ = [
    "Manifest",
    "Model",
    "PatchBag",
    "SlideGraph",
    "SynthSpec",
    "TrainConfig",
    "__version__",
    "build_slide_graph",
    "cross_validate",
    "evaluate",
    "generate_synthetic_dataset",
    "init_model",
    "load_model",
    "roc_auc",
    "save_model",
    "train",
]
