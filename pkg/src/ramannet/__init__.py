"""RamanNet: windowed dense blocks, triplet-regularized embeddings and evaluation protocols for Raman spectra."""

__version__ = "0.1.0"

from .data import LabeledDataset, SplitPlan, TripletBatch, load_dataset, make_splits, sample_triplets
from .model import ModelConfig, RamanNet, count_parameters, load_checkpoint, save_checkpoint, split_windows
from .train import TrainConfig, evaluate, run_protocol, train_one

__all__ = [
    "LabeledDataset",
    "ModelConfig",
    "RamanNet",
    "SplitPlan",
    "TrainConfig",
    "TripletBatch",
    "count_parameters",
    "evaluate",
    "load_checkpoint",
    "load_dataset",
    "make_splits",
    "run_protocol",
    "sample_triplets",
    "save_checkpoint",
    "split_windows",
    "train_one",
]
