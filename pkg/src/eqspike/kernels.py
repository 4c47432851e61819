"""Hot-loop kernels with backend selection at import.

The compiled extension is used when it imports cleanly; setting
``EQSPIKE_PURE_PYTHON=1`` forces the numpy fallback. Both backends share
one summation order, so switching backends never changes results.

Every product with a spike operand goes through one of the ``*_spike*``
functions here. They only add, and they reject non-binary operands.
:data:`op_counter` tallies the accumulates they perform.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _kernels_py

_backend = _kernels_py
BACKEND = "python"
if os.environ.get("EQSPIKE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        pass
    else:
        _backend = _compiled
        BACKEND = "cython"

SpikeValueError = _kernels_py.SpikeValueError


@dataclass
class OpCounter:
    """Instrumentation for spike-operand products."""

    accumulates: int = 0
    multiplies: int = 0
    enabled: bool = False

    def reset(self) -> None:
        self.accumulates = 0
        self.multiplies = 0


op_counter = OpCounter()


def _c(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def spike_matmul(spikes: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """``spikes @ weight`` for ``spikes`` of shape (..., K) and ``weight`` (K, N)."""
    lead = spikes.shape[:-1]
    flat = _c(spikes).reshape(-1, spikes.shape[-1])
    out = _backend.spike_matmul(flat, _c(weight))
    if op_counter.enabled:
        op_counter.accumulates += int(flat.sum()) * weight.shape[1]
    return out.reshape(*lead, weight.shape[1])


def real_matmul_spike_t(real: np.ndarray, spikes: np.ndarray) -> np.ndarray:
    """``real @ swapaxes(spikes)`` over matching leading batch dims."""
    lead = real.shape[:-2]
    r = _c(real).reshape(-1, *real.shape[-2:])
    s = _c(spikes).reshape(-1, *spikes.shape[-2:])
    out = _backend.bmm_real_spike_t(r, s)
    if op_counter.enabled:
        op_counter.accumulates += int(s.sum()) * real.shape[-2]
    return out.reshape(*lead, real.shape[-2], spikes.shape[-2])


def real_matmul_spike(real: np.ndarray, spikes: np.ndarray) -> np.ndarray:
    """``real @ spikes`` over matching leading batch dims."""
    lead = real.shape[:-2]
    r = _c(real).reshape(-1, *real.shape[-2:])
    s = _c(spikes).reshape(-1, *spikes.shape[-2:])
    out = _backend.bmm_real_spike(r, s)
    if op_counter.enabled:
        op_counter.accumulates += int(s.sum()) * real.shape[-2]
    return out.reshape(*lead, real.shape[-2], spikes.shape[-1])


def lif_update(u: np.ndarray, current: np.ndarray, asr_num: np.ndarray,
               gamma: float, v_th: float) -> np.ndarray:
    """One LIF step on contiguous arrays, in place on ``u`` and ``asr_num``."""
    spikes = _backend.lif_update(u.reshape(-1), _c(current).reshape(-1),
                                 asr_num.reshape(-1), float(gamma), float(v_th))
    return spikes.reshape(u.shape)


def use_backend(name: str) -> None:
    """Switch backend at runtime (benchmarks and cross-backend tests)."""
    global _backend, BACKEND
    if name == "python":
        _backend, BACKEND = _kernels_py, "python"
    elif name == "cython":
        from . import _kernels as compiled  # type: ignore[attr-defined]

        _backend, BACKEND = compiled, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")
