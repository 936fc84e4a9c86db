"""Fused loops for the selective scan (numba when available).

Both kernels work on flattened batches: ``delta`` and ``x`` are (B, L, C),
``A`` and ``h0`` are (B, C, N), ``bt`` is (B, L, N). Discretization is
fused into the loops; ``expm1(Δa)`` comes in precomputed (the vectorised
numpy version is far faster than a per-element call) and is reused by the
backward pass.
"""
from __future__ import annotations

import math

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

SERIES_EPS = 1e-8


def _scan_forward(delta, A, bt, ct, x, h0, h_all, em1_all, y):
    B, L, C = x.shape
    N = A.shape[2]
    for b in range(B):
        for t in range(L):
            for c in range(C):
                d = delta[b, t, c]
                xv = x[b, t, c]
                acc = 0.0
                for n in range(N):
                    a = A[b, c, n]
                    em1 = em1_all[b, t, c, n]
                    e = d if abs(d * a) < SERIES_EPS else em1 / a
                    prev = h_all[b, t - 1, c, n] if t > 0 else h0[b, c, n]
                    hv = (em1 + 1.0) * prev + e * bt[b, t, n] * xv
                    h_all[b, t, c, n] = hv
                    acc += hv * ct[b, t, n]
                y[b, t, c] = acc


def _scan_infer(delta, A, bt, ct, x, h0, y, h_final):
    """Forward only: readout ``y = C h`` computed inline, only the running state is kept."""
    B, L, C = x.shape
    N = A.shape[2]
    for b in range(B):
        h = h0[b].copy()
        for t in range(L):
            for c in range(C):
                d = delta[b, t, c]
                xv = x[b, t, c]
                acc = 0.0
                for n in range(N):
                    a = A[b, c, n]
                    da = d * a
                    em1 = math.expm1(da)
                    e = d if abs(da) < SERIES_EPS else em1 / a
                    hv = (em1 + 1.0) * h[c, n] + e * bt[b, t, n] * xv
                    h[c, n] = hv
                    acc += hv * ct[b, t, n]
                y[b, t, c] = acc
        h_final[b] = h


def _scan_backward(delta, A, bt, ct, x, h0, h_all, em1_all, gy, extra, has_extra,
                   gx, g_bt, g_ct, g_delta, g_A, gh0):
    """Reverse adjoint plus the local ZOH derivatives; accumulates into the output arrays.

    The gradient reaching each state is ``gy * ct`` plus ``extra`` when
    ``has_extra`` (state read out mid-sequence).
    """
    B, L, C = x.shape
    N = A.shape[2]
    G = np.zeros((C, N))
    a_next = np.zeros((C, N))
    for b in range(B):
        G[:] = 0.0
        a_next[:] = 0.0
        g_A[b] = 0.0
        for t in range(L - 1, -1, -1):
            for c in range(C):
                d = delta[b, t, c]
                xv = x[b, t, c]
                gxv = 0.0
                gdv = 0.0
                gyv = gy[b, t, c]
                for n in range(N):
                    a = A[b, c, n]
                    da = d * a
                    em1 = em1_all[b, t, c, n]
                    a_bar = em1 + 1.0
                    if abs(da) < SERIES_EPS:
                        e = d
                        de_da = 0.5 * d * d
                    else:
                        e = em1 / a
                        de_da = (d * a_bar - e) / a
                    direct = gyv * ct[b, t, n]
                    if has_extra:
                        direct += extra[b, t, c, n]
                    g = direct + a_next[c, n] * G[c, n]
                    G[c, n] = g
                    a_next[c, n] = a_bar
                    g_ct[b, t, n] += gyv * h_all[b, t, c, n]
                    hp = h_all[b, t - 1, c, n] if t > 0 else h0[b, c, n]
                    g_ab = g * hp
                    bv = bt[b, t, n]
                    g_bb = g * xv
                    gxv += g * e * bv
                    g_e = g_bb * bv
                    g_bt[b, t, n] += g_bb * e
                    gdv += g_e * a_bar + g_ab * a_bar * a
                    g_A[b, c, n] += g_e * de_da + g_ab * a_bar * d
                gx[b, t, c] += gxv
                g_delta[b, t, c] += gdv
        for c in range(C):
            for n in range(N):
                gh0[b, c, n] = a_next[c, n] * G[c, n]


if numba is not None:
    scan_forward = numba.njit(cache=True, fastmath=False)(_scan_forward)
    scan_backward = numba.njit(cache=True, fastmath=False)(_scan_backward)
    scan_infer = numba.njit(cache=True, fastmath=False)(_scan_infer)
    AVAILABLE = True
else:  # pragma: no cover
    scan_forward, scan_backward, scan_infer = _scan_forward, _scan_backward, _scan_infer
    AVAILABLE = False


def flat(arr, batch, tail):
    """Broadcast ``arr`` to ``batch + tail`` and view it as (prod(batch),) + tail, contiguous float64."""
    out = np.broadcast_to(np.asarray(arr, dtype=np.float64), tuple(batch) + tuple(tail))
    return np.ascontiguousarray(out.reshape((-1,) + tuple(tail)))
