"""Pure-numpy reference implementations of the sequential scan kernels.

These are the fallback backend when the compiled extension is unavailable,
and the arithmetic reference the compiled kernels are tested against. Both
backends share the exact recurrences documented here.

Shape conventions (batch-first, C-contiguous):
  diagonal scan (per-channel state, shared B/C across channels):
    u, dt : (B, L, C)     A : (C, S)     Bm, Cm : (B, L, S)     D : (C,)
    state h[c, n]:  h_t = exp(dt_t[c] A[c,n]) h_{t-1} + dt_t[c] u_t[c] Bm_t[n]
    output:         y_t[c] = sum_n h_t[c,n] Cm_t[n] + D[c] u_t[c]
  headed scan (per-head scalar decay, rank-1 state update):
    x : (B, L, H, P)   dt : (B, L, H)   A : (H,)   Bm, Cm : (B, L, H, S)   D : (H,)
    state S[h, n, i]:  S_t = exp(dt_t[h] A[h]) S_{t-1} + dt_t[h] Bm_t[h,n] x_t[h,i]
    output:            y_t[h,i] = sum_n Cm_t[h,n] S_t[h,n,i] + D[h] x_t[h,i]
"""

from __future__ import annotations

import numpy as np


def diag_scan_fwd(u, dt, A, Bm, Cm, D):
    """Forward diagonal scan. Returns (y, h) with h the full state history
    (B, L, C, S), kept for the backward pass."""
    B, L, C = u.shape
    S = A.shape[1]
    y = np.empty_like(u)
    h = np.zeros((B, L, C, S), dtype=u.dtype)
    state = np.zeros((B, C, S), dtype=u.dtype)
    for t in range(L):
        a_t = np.exp(dt[:, t, :, None] * A)
        state = a_t * state + (dt[:, t] * u[:, t])[:, :, None] * Bm[:, t, None, :]
        h[:, t] = state
        y[:, t] = np.einsum("bcs,bs->bc", state, Cm[:, t]) + D * u[:, t]
    return y, h


def diag_scan_bwd(gy, u, dt, A, Bm, Cm, D, h):
    """Backward diagonal scan given upstream gradient gy (B, L, C).

    Adjoint recursion: G_t = gy_t x Cm_t + exp(dt_{t+1} A) G_{t+1}.
    Returns gradients for (u, dt, A, Bm, Cm, D).
    """
    B, L, C = u.shape
    S = A.shape[1]
    du = np.zeros_like(u)
    ddt = np.zeros_like(dt)
    dA = np.zeros_like(A)
    dBm = np.zeros_like(Bm)
    dCm = np.zeros_like(Cm)
    dD = (gy * u).sum(axis=(0, 1))
    G_next = np.zeros((B, C, S), dtype=u.dtype)
    for t in range(L - 1, -1, -1):
        G = gy[:, t, :, None] * Cm[:, t, None, :] + G_next
        dCm[:, t] = np.einsum("bcs,bc->bs", h[:, t], gy[:, t])
        hprev = h[:, t - 1] if t > 0 else np.zeros((B, C, S), dtype=u.dtype)
        a_t = np.exp(dt[:, t, :, None] * A)
        decay_term = np.einsum("bcs,bcs->bc", G, A * a_t * hprev)
        inject_term = np.einsum("bcs,bs->bc", G, Bm[:, t]) * u[:, t]
        ddt[:, t] = decay_term + inject_term
        dA += (dt[:, t, :, None] * a_t * hprev * G).sum(axis=0)
        dBm[:, t] = np.einsum("bcs,bc->bs", G, dt[:, t] * u[:, t])
        du[:, t] = dt[:, t] * np.einsum("bcs,bs->bc", G, Bm[:, t]) + D * gy[:, t]
        G_next = a_t * G
    return du, ddt, dA, dBm, dCm, dD


def headed_scan_fwd(x, dt, A, Bm, Cm, D):
    """Forward headed scan (rank-1 state update per head). Returns y only."""
    B, L, H, P = x.shape
    S = Bm.shape[-1]
    y = np.empty_like(x)
    state = np.zeros((B, H, S, P), dtype=x.dtype)
    for t in range(L):
        a_t = np.exp(dt[:, t] * A)
        state = a_t[:, :, None, None] * state + np.einsum("bh,bhs,bhp->bhsp", dt[:, t], Bm[:, t], x[:, t])
        y[:, t] = np.einsum("bhs,bhsp->bhp", Cm[:, t], state) + D[None, :, None] * x[:, t]
    return y
