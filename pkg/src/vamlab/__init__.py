"""Decision-aware model losses on tabular Markov reward processes."""

from ._accel import USE_NUMBA, backend_name
from .mdp import GarnetSpec, TabularMRP, TransitionDataset, exact_value, generate_garnet, sample_transitions
from .models import LowRankModel
from .valuelearn import TrainSchedule, value_error

__all__ = [
    "USE_NUMBA",
    "backend_name",
    "GarnetSpec",
    "TabularMRP",
    "TransitionDataset",
    "LowRankModel",
    "TrainSchedule",
    "exact_value",
    "generate_garnet",
    "sample_transitions",
    "value_error",
]

__version__ = "0.1.0"
