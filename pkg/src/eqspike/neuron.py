"""Discrete-time LIF/IF neurons with reset by subtraction.

Per step: ``u <- gamma*u + I``; a neuron spikes where ``u > v_th`` and then
``u <- u - v_th``. The average spiking rate (ASR) is the leak-weighted mean
``sum_tau gamma^(t-tau) s[tau] / sum_tau gamma^(t-tau)``, kept as a running
numerator/denominator pair.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numerics import DimensionError


@dataclass(frozen=True)
class LifParams:
    v_th: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not self.v_th > 0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")

    @property
    def is_if(self) -> bool:
        return self.gamma == 1.0


@dataclass
class NeuronState:
    u: np.ndarray
    last_spikes: np.ndarray
    asr_num: np.ndarray
    asr_den: float = 0.0
    t: int = 0
    spike_count: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def zeros(cls, shape, count_spikes: bool = False) -> "NeuronState":
        shape = tuple(shape)
        return cls(
            u=np.zeros(shape),
            last_spikes=np.zeros(shape),
            asr_num=np.zeros(shape),
            spike_count=np.zeros(shape) if count_spikes else None,
        )

    @property
    def shape(self):
        return self.u.shape

    def asr(self) -> np.ndarray:
        return asr(self)


def as_spikes(x: np.ndarray) -> np.ndarray:
    """Validate that ``x`` is a binary spike tensor and return it as float64."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all((x == 0.0) | (x == 1.0)):
        raise kernels.SpikeValueError("spike tensor has non-binary entries")
    return x


def lif_step(state: NeuronState, input_current: np.ndarray, params: LifParams):
    """Advance membrane potentials one step; returns ``(state, spikes)``.

    Biases belong in ``input_current``. The state is updated in place.
    """
    input_current = np.asarray(input_current, dtype=np.float64)
    if input_current.shape != state.u.shape:
        raise DimensionError(f"current shape {input_current.shape} != state shape {state.u.shape}")
    v = params.gamma * state.u
    v = v + input_current
    fired = v > params.v_th
    spikes = fired.astype(np.float64)
    state.u = np.where(fired, v - params.v_th, v)
    state.last_spikes = spikes
    state.t += 1
    if state.spike_count is not None:
        state.spike_count += spikes
    return state, spikes


def asr_update(state: NeuronState, spikes: np.ndarray, gamma: float) -> NeuronState:
    spikes = as_spikes(spikes)
    if spikes.shape != state.asr_num.shape:
        raise DimensionError("spike shape does not match neuron state")
    state.asr_num = gamma * state.asr_num + spikes
    state.asr_den = gamma * state.asr_den + 1.0
    return state


def asr(state: NeuronState) -> np.ndarray:
    if state.t < 1 or state.asr_den <= 0.0:
        raise ValueError("ASR is undefined before the first time step")
    return state.asr_num / state.asr_den


def step(state: NeuronState, input_current: np.ndarray, params: LifParams) -> np.ndarray:
    """``lif_step`` followed by ``asr_update`` via the fused kernel."""
    if input_current.shape != state.u.shape:
        raise DimensionError(f"current shape {input_current.shape} != state shape {state.u.shape}")
    spikes = kernels.lif_update(state.u, input_current, state.asr_num, params.gamma, params.v_th)
    state.asr_den = params.gamma * state.asr_den + 1.0
    state.last_spikes = spikes
    state.t += 1
    if state.spike_count is not None:
        state.spike_count += spikes
    return spikes
