"""Spiking self-attention and its steady-state surrogate.

At each time step the query is real-valued, ``Q = S_x W_Q``. Keys and
values come from LIF layers driven by ``S_x W_K`` and ``S_x W_V``. The
attention current is ``pi(s * Q S_K^T) S_V``, which feeds the attention
output neurons.

Every product with a spike operand uses an accumulate-only kernel from
:mod:`eqspike.kernels`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import numerics as nx
from .neuron import LifParams, NeuronState, step

PI_MODES = ("softmax", "identity")


@dataclass
class AttentionParams:
    w_q: object
    w_k: object
    w_v: object
    b_k: object
    b_v: object
    n_heads: int
    pi_mode: str = "softmax"

    def __post_init__(self):
        d_emb = nx.value_of(self.w_q).shape[1]
        if self.n_heads < 1 or d_emb % self.n_heads:
            raise nx.DimensionError(f"{d_emb} features do not split into {self.n_heads} heads")
        if self.pi_mode not in PI_MODES:
            raise ValueError(f"pi_mode must be one of {PI_MODES}")

    @property
    def d_k(self) -> int:
        return nx.value_of(self.w_q).shape[1] // self.n_heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.d_k)


def split_heads(x, n_heads: int):
    """(..., N, D) -> (..., H, N, D/H); works on arrays and tape nodes."""
    shape = nx.value_of(x).shape
    d = shape[-1] // n_heads
    y = nx.reshape(x, shape[:-1] + (n_heads, d))
    axes = list(range(len(shape) + 1))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return nx.transpose(y, axes)


def merge_heads(x):
    """(..., H, N, d) -> (..., N, H*d)."""
    shape = nx.value_of(x).shape
    axes = list(range(len(shape)))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    y = nx.transpose(x, axes)
    return nx.reshape(y, shape[:-3] + (shape[-2], shape[-3] * shape[-1]))


def _pi(scores, mode: str):
    return nx.softmax_rows(scores) if mode == "softmax" else scores


def spiking_attention_step(input_spikes: np.ndarray, params: AttentionParams,
                           key_state: NeuronState, value_state: NeuronState, lif: LifParams):
    """One time step; returns ``(attention current, pre-pi scaled scores)``.

    ``input_spikes`` has shape (..., N_s, D_emb). Scores have shape
    (..., H, N_s, N_s).
    """
    if key_state is None or value_state is None:
        raise ValueError("key/value neuron states must be initialized")
    q = kernels.spike_matmul(input_spikes, params.w_q)
    s_k = step(key_state, kernels.spike_matmul(input_spikes, params.w_k) + params.b_k, lif)
    s_v = step(value_state, kernels.spike_matmul(input_spikes, params.w_v) + params.b_v, lif)
    qh = split_heads(q, params.n_heads)
    kh = split_heads(s_k, params.n_heads)
    vh = split_heads(s_v, params.n_heads)
    scores = params.scale * kernels.real_matmul_spike_t(qh, kh)
    weights = _pi(scores, params.pi_mode)
    current = merge_heads(kernels.real_matmul_spike(weights, vh))
    return current, scores


def surrogate_scores(a_x, a_k, params: AttentionParams):
    """Scaled pre-pi scores ``s * (a_x W_Q) a_k^T`` per head."""
    qh = split_heads(nx.matmul(a_x, params.w_q), params.n_heads)
    kh = split_heads(a_k, params.n_heads)
    return nx.scale(nx.matmul(qh, nx.swap_last(kh)), params.scale)


def vanilla_attention(a_x, a_k, a_v, params: AttentionParams):
    """``pi(s * (a_x W_Q) a_k^T) a_v`` with heads merged."""
    weights = _pi(surrogate_scores(a_x, a_k, params), params.pi_mode)
    return merge_heads(nx.matmul(weights, split_heads(a_v, params.n_heads)))


def _check_rate(x, what):
    v = nx.value_of(x)
    if v.size and (v.min() < -1e-9 or v.max() > 1 + 1e-9):
        raise ValueError(f"{what} must be a rate in [0, 1]")


def surrogate_attention(a_x, a_k, a_v, params: AttentionParams, v_th: float, bias):
    """Steady-state rate of the attention output neurons.

    ``clip01((pi(s * (a_x W_Q) a_k^T) a_v + bias) / v_th)``
    """
    for x, what in ((a_x, "a_x"), (a_k, "a_k"), (a_v, "a_v")):
        _check_rate(x, what)
    attn = vanilla_attention(a_x, a_k, a_v, params)
    return nx.clip01(nx.scale(nx.add(attn, bias), 1.0 / v_th))
