"""Sphere-constrained, direction-preserving Adam with baselines and a harness."""

from .tensor import Tape, Tensor, backward, finite_difference_check
from .nn import MLP, BatchNorm, BnSoftmaxHead, DenseUnitLayer, softmax_cross_entropy
from .optim import SGD, Adam, LrSchedule, NDAdam, ParamGroup, project_to_sphere

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "finite_difference_check",
    "MLP",
    "BatchNorm",
    "BnSoftmaxHead",
    "DenseUnitLayer",
    "softmax_cross_entropy",
    "SGD",
    "Adam",
    "LrSchedule",
    "NDAdam",
    "ParamGroup",
    "project_to_sphere",
]

__version__ = "0.1.0"
