"""Bayesian nonparametric autoregressive models for recurrent gap times."""
from .data import GapTimeDataset, SubjectRecord, load_csv, write_csv
from .model import DependenceSpec, Hyperparameters, ModelConfig
from .sampler import SamplerConfig, run_chain, run_chains
from .store import DrawStore

__version__ = "0.1.0"

__all__ = [
    "DependenceSpec", "DrawStore", "GapTimeDataset", "Hyperparameters", "ModelConfig",
    "SamplerConfig", "SubjectRecord", "load_csv", "run_chain", "run_chains", "write_csv",
]
