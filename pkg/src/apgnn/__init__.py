"""Session-aware next-item recommendation with personalised graph neural
networks and dot-product attention over a user's past sessions."""
from .data import SessionCorpus, TrainingInstance, make_instances, split_sessions
from .errors import ContractError, DataError, NumericError, ShapeError
from .graph import BehaviorGraph, build_graph
from .model import APGNN
from .pgnn import AblationFlags, ParameterSet
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "APGNN",
    "AblationFlags",
    "BehaviorGraph",
    "ContractError",
    "DataError",
    "NumericError",
    "ParameterSet",
    "SessionCorpus",
    "ShapeError",
    "TrainConfig",
    "Trainer",
    "TrainingInstance",
    "build_graph",
    "load_checkpoint",
    "make_instances",
    "save_checkpoint",
    "split_sessions",
    "train",
]
