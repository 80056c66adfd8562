"""Recommender with per-item regression and graphical-lasso user profiles."""
from .data import Dataset, load_dataset, synth_generate, temporal_split
from .glasso import glasso_fit
from .upg import UpgModel, fit_upg, online_update, predict

__all__ = [
    "Dataset", "load_dataset", "synth_generate", "temporal_split", "glasso_fit",
    "UpgModel", "fit_upg", "online_update", "predict",
]
__version__ = "0.1.0"
