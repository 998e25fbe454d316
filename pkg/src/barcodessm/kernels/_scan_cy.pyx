# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled scan kernels: C loop versions of the recurrences in _scan_np.

Same signatures and shape conventions as the numpy backend; see that module
for the recurrence definitions. Summation order inside a step differs from
numpy's einsum, so agreement is to floating-point roundoff, not bitwise.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

ctypedef fused floating:
    float
    double


def diag_scan_fwd(floating[:, :, ::1] u, floating[:, :, ::1] dt, floating[:, ::1] A,
                  floating[:, :, ::1] Bm, floating[:, :, ::1] Cm, floating[::1] D):
    cdef Py_ssize_t B = u.shape[0], L = u.shape[1], C = u.shape[2], S = A.shape[1]
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((B, L, C), dtype=dtype)
    h_arr = np.zeros((B, L, C, S), dtype=dtype)
    cdef floating[:, :, ::1] y = y_arr
    cdef floating[:, :, :, ::1] h = h_arr
    cdef Py_ssize_t b, t, c, n
    cdef floating a, st, acc, dtc, dtu
    for b in range(B):
        for t in range(L):
            for c in range(C):
                dtc = dt[b, t, c]
                dtu = dtc * u[b, t, c]
                acc = 0
                for n in range(S):
                    a = <floating> exp(<double> (dtc * A[c, n]))
                    if t > 0:
                        st = a * h[b, t - 1, c, n] + dtu * Bm[b, t, n]
                    else:
                        st = dtu * Bm[b, t, n]
                    h[b, t, c, n] = st
                    acc += st * Cm[b, t, n]
                y[b, t, c] = acc + D[c] * u[b, t, c]
    return y_arr, h_arr


def diag_scan_bwd(floating[:, :, ::1] gy, floating[:, :, ::1] u, floating[:, :, ::1] dt,
                  floating[:, ::1] A, floating[:, :, ::1] Bm, floating[:, :, ::1] Cm,
                  floating[::1] D, floating[:, :, :, ::1] h):
    cdef Py_ssize_t B = u.shape[0], L = u.shape[1], C = u.shape[2], S = A.shape[1]
    dtype = np.float32 if floating is float else np.float64
    du_arr = np.zeros((B, L, C), dtype=dtype)
    ddt_arr = np.zeros((B, L, C), dtype=dtype)
    dA_arr = np.zeros((C, S), dtype=dtype)
    dBm_arr = np.zeros((B, L, S), dtype=dtype)
    dCm_arr = np.zeros((B, L, S), dtype=dtype)
    dD_arr = np.zeros((C,), dtype=dtype)
    G_arr = np.zeros((C, S), dtype=dtype)
    cdef floating[:, :, ::1] du = du_arr, ddt = ddt_arr, dBm = dBm_arr, dCm = dCm_arr
    cdef floating[:, ::1] dA = dA_arr, G = G_arr
    cdef floating[::1] dD = dD_arr
    cdef Py_ssize_t b, t, c, n
    cdef floating a, Gv, hp, gyv, dtc, uv, dtu, acc_dt, acc_du
    for b in range(B):
        G_arr[:] = 0
        for t in range(L - 1, -1, -1):
            for c in range(C):
                gyv = gy[b, t, c]
                dtc = dt[b, t, c]
                uv = u[b, t, c]
                dtu = dtc * uv
                acc_dt = 0
                acc_du = 0
                for n in range(S):
                    Gv = gyv * Cm[b, t, n] + G[c, n]
                    hp = h[b, t - 1, c, n] if t > 0 else <floating> 0
                    a = <floating> exp(<double> (dtc * A[c, n]))
                    dCm[b, t, n] += h[b, t, c, n] * gyv
                    acc_dt += Gv * (A[c, n] * a * hp + uv * Bm[b, t, n])
                    dA[c, n] += dtc * a * hp * Gv
                    dBm[b, t, n] += Gv * dtu
                    acc_du += Gv * Bm[b, t, n]
                    G[c, n] = a * Gv
                ddt[b, t, c] = acc_dt
                du[b, t, c] = dtc * acc_du + D[c] * gyv
                dD[c] += gyv * uv
    return du_arr, ddt_arr, dA_arr, dBm_arr, dCm_arr, dD_arr


def headed_scan_fwd(floating[:, :, :, ::1] x, floating[:, :, ::1] dt, floating[::1] A,
                    floating[:, :, :, ::1] Bm, floating[:, :, :, ::1] Cm, floating[::1] D):
    cdef Py_ssize_t B = x.shape[0], L = x.shape[1], H = x.shape[2], P = x.shape[3]
    cdef Py_ssize_t S = Bm.shape[3]
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.zeros((B, L, H, P), dtype=dtype)
    state_arr = np.zeros((H, S, P), dtype=dtype)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef floating[:, :, ::1] state = state_arr
    cdef Py_ssize_t b, t, hh, n, i
    cdef floating a, dtv, bn, cn, st
    for b in range(B):
        state_arr[:] = 0
        for t in range(L):
            for hh in range(H):
                dtv = dt[b, t, hh]
                a = <floating> exp(<double> (dtv * A[hh]))
                for n in range(S):
                    bn = dtv * Bm[b, t, hh, n]
                    cn = Cm[b, t, hh, n]
                    for i in range(P):
                        st = a * state[hh, n, i] + bn * x[b, t, hh, i]
                        state[hh, n, i] = st
                        y[b, t, hh, i] += cn * st
                for i in range(P):
                    y[b, t, hh, i] += D[hh] * x[b, t, hh, i]
    return y_arr
