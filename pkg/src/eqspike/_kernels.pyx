# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled accumulate-only kernels.

Every sum runs over the contraction index in ascending order starting from
+0.0, which is the order the numpy fallback uses, so both backends produce
bit-identical results.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


from eqspike._kernels_py import SpikeValueError


def spike_matmul(const double[:, ::1] spikes, const double[:, ::1] weight):
    """``spikes @ weight`` where ``spikes`` is binary; adds rows of ``weight``."""
    cdef Py_ssize_t m_dim = spikes.shape[0], k_dim = spikes.shape[1]
    cdef Py_ssize_t n_dim = weight.shape[1]
    if weight.shape[0] != k_dim:
        raise ValueError(f"inner dimensions differ: {k_dim} vs {weight.shape[0]}")
    out_arr = np.zeros((m_dim, n_dim), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t m, k, n
    cdef double s
    for m in range(m_dim):
        for k in range(k_dim):
            s = spikes[m, k]
            if s == 1.0:
                for n in range(n_dim):
                    out[m, n] += weight[k, n]
            elif s != 0.0:
                raise SpikeValueError("spike operand is not binary")
    return out_arr


def bmm_real_spike_t(const double[:, :, ::1] real, const double[:, :, ::1] spikes):
    """Batched ``real @ spikes^T`` with a binary right operand."""
    cdef Py_ssize_t g_dim = real.shape[0], m_dim = real.shape[1], k_dim = real.shape[2]
    cdef Py_ssize_t n_dim = spikes.shape[1]
    if spikes.shape[0] != g_dim or spikes.shape[2] != k_dim:
        raise ValueError("batched operand shapes differ")
    out_arr = np.zeros((g_dim, m_dim, n_dim), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t g, m, n, k
    cdef double s
    for g in range(g_dim):
        for n in range(n_dim):
            for k in range(k_dim):
                s = spikes[g, n, k]
                if s == 1.0:
                    for m in range(m_dim):
                        out[g, m, n] += real[g, m, k]
                elif s != 0.0:
                    raise SpikeValueError("spike operand is not binary")
    return out_arr


def bmm_real_spike(const double[:, :, ::1] real, const double[:, :, ::1] spikes):
    """Batched ``real @ spikes`` with a binary right operand."""
    cdef Py_ssize_t g_dim = real.shape[0], m_dim = real.shape[1], k_dim = real.shape[2]
    cdef Py_ssize_t n_dim = spikes.shape[2]
    if spikes.shape[0] != g_dim or spikes.shape[1] != k_dim:
        raise ValueError("batched operand shapes differ")
    out_arr = np.zeros((g_dim, m_dim, n_dim), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t g, m, n, k
    cdef double s
    for g in range(g_dim):
        for k in range(k_dim):
            for n in range(n_dim):
                s = spikes[g, k, n]
                if s == 1.0:
                    for m in range(m_dim):
                        out[g, m, n] += real[g, m, k]
                elif s != 0.0:
                    raise SpikeValueError("spike operand is not binary")
    return out_arr


def lif_update(double[::1] u, const double[::1] current, double[::1] asr_num,
               double gamma, double v_th):
    """Fused LIF step on flat buffers; updates ``u`` and ``asr_num`` in place."""
    cdef Py_ssize_t n_dim = u.shape[0], i
    if current.shape[0] != n_dim or asr_num.shape[0] != n_dim:
        raise ValueError("state and current sizes differ")
    spikes_arr = np.zeros(n_dim, dtype=np.float64)
    cdef double[::1] spikes = spikes_arr
    cdef double v
    for i in range(n_dim):
        v = gamma * u[i]
        v = v + current[i]
        if v > v_th:
            v = v - v_th
            spikes[i] = 1.0
            asr_num[i] = gamma * asr_num[i] + 1.0
        else:
            asr_num[i] = gamma * asr_num[i] + 0.0
        u[i] = v
    return spikes_arr
