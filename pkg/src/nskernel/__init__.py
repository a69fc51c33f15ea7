"""Low-rank neural influence kernels for spatio-temporal point processes."""

from .errors import (ConfigurationError, DomainError, DominationError, InfeasibleError, NSKernelError,
                     NumericalError, ShapeError)
from .grids import GridSpec
from .likelihood import grad_objective, log_likelihood, log_likelihoods, objective
from .model import EventSequence, KernelModel, init_model, intensity, kernel_eval
from .simulate import Dataset, SimConfig, TrueKernel, TrueModel, generate_dataset, thinning_sample
from .trainer import TrainConfig, TrainState, train, train_test_split

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DomainError", "DominationError", "InfeasibleError", "NSKernelError",
    "NumericalError", "ShapeError", "GridSpec", "grad_objective", "log_likelihood", "log_likelihoods",
    "objective", "EventSequence", "KernelModel", "init_model", "intensity", "kernel_eval", "Dataset",
    "SimConfig", "TrueKernel", "TrueModel", "generate_dataset", "thinning_sample", "TrainConfig",
    "TrainState", "train", "train_test_split",
]
