"""Equilibrium spiking transformer encoders: simulation, implicit training,
distillation and energy estimates."""
__version__ = "0.1.0"

from .kernels import BACKEND
from .neuron import LifParams, NeuronState
from .model import ModelConfig, ModelParams, init_params, load_checkpoint, save_checkpoint
from .equilibrium import ConvergenceCriterion, EquilibriumRecord, SurrogateNet, simulate_to_equilibrium, surrogate_forward
from .gradients import ImplicitSolveConfig, gradcheck, loss_gradients

__all__ = [
    "BACKEND", "LifParams", "NeuronState", "ModelConfig", "ModelParams", "init_params",
    "load_checkpoint", "save_checkpoint", "ConvergenceCriterion", "EquilibriumRecord", "SurrogateNet",
    "simulate_to_equilibrium", "surrogate_forward", "ImplicitSolveConfig", "gradcheck", "loss_gradients",
]
