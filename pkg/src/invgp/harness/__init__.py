"""Experiment harness: configs, data, checkpoints, training, CLI."""

from .config import ExperimentConfig
from .data import Dataset, load_idx, make_rotated

__all__ = ["Dataset", "ExperimentConfig", "load_idx", "make_rotated"]
