"""Dataset condensation by gradient matching, class-wise and class-collective."""

from . import augment, autodiff, condenser, data, evaluation, io, kernels, models, rng, toy
from .autodiff import Var, grad
from .condenser import CondenseConfig, SyntheticSet, condense

__version__ = "0.1.0"

__all__ = ["augment", "autodiff", "condenser", "data", "evaluation", "io", "kernels", "models", "rng",
           "toy", "Var", "grad", "CondenseConfig", "SyntheticSet", "condense"]
