"""Compiled inner loops for the SVDF time filter and the power spectrum."""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def time_filter(a, beta):
    """z[b, t, n] = sum_m beta[n, m] * a[b, t - m, n], zero history."""
    n_batch, t_len, nodes = a.shape
    memory = beta.shape[1]
    bt = np.ascontiguousarray(beta.T).astype(a.dtype)  # (memory, nodes)
    z = np.zeros_like(a)
    for b in range(n_batch):
        for t in range(t_len):
            for m in range(min(memory, t + 1)):
                for n in range(nodes):
                    z[b, t, n] += bt[m, n] * a[b, t - m, n]
    return z


@numba.njit(cache=True, fastmath=True)
def time_filter_backward(dz, a, beta):
    """Gradients of the time filter wrt its input ``a`` and taps ``beta``."""
    n_batch, t_len, nodes = a.shape
    memory = beta.shape[1]
    bt = np.ascontiguousarray(beta.T).astype(a.dtype)
    da = np.zeros_like(a)
    acc = np.zeros((memory, nodes), dtype=a.dtype)
    dbeta = np.zeros(beta.shape, dtype=np.float64)
    for b in range(n_batch):
        acc[:, :] = 0
        for t in range(t_len):
            for m in range(min(memory, t + 1)):
                for n in range(nodes):
                    g = dz[b, t, n]
                    da[b, t - m, n] += g * bt[m, n]
                    acc[m, n] += g * a[b, t - m, n]
        # per-utterance partial sums keep float32 accumulation short
        for m in range(memory):
            for n in range(nodes):
                dbeta[n, m] += acc[m, n]
    return da, dbeta


@numba.njit(cache=True)
def power_spectrum(spec):
    """|X|^2 of a 2-D complex array, in the matching real dtype."""
    rows, cols = spec.shape
    out = np.empty((rows, cols), dtype=spec.real.dtype)
    for i in range(rows):
        for j in range(cols):
            v = spec[i, j]
            out[i, j] = v.real * v.real + v.imag * v.imag
    return out
