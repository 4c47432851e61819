"""Pure-numpy fallback for the compiled kernels.

Sums run over the contraction index in ascending order, one slice at a time,
so results match the compiled backend bit for bit.
"""
import numpy as np


class SpikeValueError(ValueError):
    pass


def _check_binary(spikes):
    if not np.all((spikes == 0.0) | (spikes == 1.0)):
        raise SpikeValueError("spike operand is not binary")


def spike_matmul(spikes, weight):
    spikes = np.ascontiguousarray(spikes, dtype=np.float64)
    weight = np.ascontiguousarray(weight, dtype=np.float64)
    if spikes.shape[1] != weight.shape[0]:
        raise ValueError(f"inner dimensions differ: {spikes.shape[1]} vs {weight.shape[0]}")
    _check_binary(spikes)
    on = spikes == 1.0
    out = np.zeros((spikes.shape[0], weight.shape[1]))
    for k in range(spikes.shape[1]):
        out += np.where(on[:, k, None], weight[k], 0.0)
    return out


def bmm_real_spike_t(real, spikes):
    real = np.ascontiguousarray(real, dtype=np.float64)
    spikes = np.ascontiguousarray(spikes, dtype=np.float64)
    if spikes.shape[0] != real.shape[0] or spikes.shape[2] != real.shape[2]:
        raise ValueError("batched operand shapes differ")
    _check_binary(spikes)
    on = spikes == 1.0
    out = np.zeros((real.shape[0], real.shape[1], spikes.shape[1]))
    for k in range(real.shape[2]):
        out += np.where(on[:, None, :, k], real[:, :, k, None], 0.0)
    return out


def bmm_real_spike(real, spikes):
    real = np.ascontiguousarray(real, dtype=np.float64)
    spikes = np.ascontiguousarray(spikes, dtype=np.float64)
    if spikes.shape[0] != real.shape[0] or spikes.shape[1] != real.shape[2]:
        raise ValueError("batched operand shapes differ")
    _check_binary(spikes)
    on = spikes == 1.0
    out = np.zeros((real.shape[0], real.shape[1], spikes.shape[2]))
    for k in range(real.shape[2]):
        out += np.where(on[:, None, k, :], real[:, :, k, None], 0.0)
    return out


def lif_update(u, current, asr_num, gamma, v_th):
    if current.shape != u.shape or asr_num.shape != u.shape:
        raise ValueError("state and current sizes differ")
    v = gamma * u
    v = v + current
    fired = v > v_th
    spikes = fired.astype(np.float64)
    u[...] = np.where(fired, v - v_th, v)
    asr_num[...] = gamma * asr_num + spikes
    return spikes
