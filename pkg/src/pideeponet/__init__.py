"""Physics-informed DeepONets in numpy.

Submodules: ``autodiff`` (tape + second-order jets), ``nn`` (MLPs, Fourier
features, Adam), ``deeponet`` (model, datasets, checkpoints), ``pde``
(residual losses for the four benchmarks), ``datagen`` (random inputs and
reference solvers) and ``harness`` (config, training, evaluation).
"""
from . import autodiff, datagen, deeponet, harness, nn, pde
from .deeponet import DeepOnetParams, deeponet_eval
from .harness import TrainConfig, evaluate, generate, predict, preset, train

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "datagen",
    "deeponet",
    "harness",
    "nn",
    "pde",
    "DeepOnetParams",
    "deeponet_eval",
    "TrainConfig",
    "evaluate",
    "generate",
    "predict",
    "preset",
    "train",
]
