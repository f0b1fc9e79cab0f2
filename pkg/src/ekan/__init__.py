"""Equivariant Kolmogorov-Arnold networks over matrix groups, with plain KAN, MLP and EMLP baselines."""

from .groups import GroupSpec, builtin, sample_element
from .models import build_emlp, build_kan, build_mlp, build_model, load_checkpoint, save_checkpoint
from .reps import RepSpec, parse_rep
from .solver import solve
from .train import TrainConfig, fit

__all__ = [
    "GroupSpec",
    "RepSpec",
    "TrainConfig",
    "build_emlp",
    "build_kan",
    "build_mlp",
    "build_model",
    "builtin",
    "fit",
    "load_checkpoint",
    "parse_rep",
    "sample_element",
    "save_checkpoint",
    "solve",
]

__version__ = "0.1.0"
