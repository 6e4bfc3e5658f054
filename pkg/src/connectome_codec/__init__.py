"""Connectome subgraph codec: VAE compression of 100-node directed
subgraphs, Shapley attribution of latent dimensions to graph statistics,
and controlled generation via a contribution dynamic program or CMA-ES.
"""

from . import control, data, errors, explain, metrics, model, stats, surrogate, training
from .data import ConnectomeTable, Dataset, SubgraphSample, build_dataset, load_connectome, synth_connectome
from .model import GraphCodec, ModelConfig, discretize, load_checkpoint, save_checkpoint
from .stats import FeatureVector, feature_vector, generation_mmd_report, mmd
from .surrogate import SurrogateSet, make_surrogates, train_surrogates
from .training import TrainConfig, evaluate_reconstruction, train_1_2n

__all__ = [
    "ConnectomeTable",
    "Dataset",
    "FeatureVector",
    "GraphCodec",
    "ModelConfig",
    "SubgraphSample",
    "SurrogateSet",
    "TrainConfig",
    "build_dataset",
    "control",
    "data",
    "discretize",
    "errors",
    "evaluate_reconstruction",
    "explain",
    "feature_vector",
    "generation_mmd_report",
    "load_checkpoint",
    "load_connectome",
    "make_surrogates",
    "metrics",
    "mmd",
    "model",
    "save_checkpoint",
    "stats",
    "surrogate",
    "synth_connectome",
    "train_1_2n",
    "train_surrogates",
    "training",
]

__version__ = "0.1.0"
