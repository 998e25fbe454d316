"""Mamba-1 and Mamba-2 mixing layers.

The Mamba-2 state update is a per-head scalar-decay, rank-1 recurrence; it is
computed three ways, all provably equivalent on small instances:

  ssd_naive      sequential recurrence (the oracle; compiled scan kernel)
  ssd_quadratic  materialized lower-triangular mixing matrix (attention dual)
  ssd_chunked    intra-chunk quadratic form + inter-chunk state carry

Training goes through ssd_chunked, composed from autodiff primitives so the
backward pass comes from the graph. The Mamba-1 layer keeps a per-channel
diagonal recurrence (the defining structural difference between the two) and
runs through a fused scan op with an analytic backward, backed by the
compiled kernels.

Shape conventions inside the mixers: batch first, then sequence, then heads
or channels; states are (state_dim,) per channel (Mamba-1) or
(state_dim, head_dim) per head (Mamba-2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import (
    Tensor,
    _node,
    add,
    bias_add,
    broadcast_to,
    concat,
    conv1d_causal,
    cumsum,
    einsum,
    exp,
    getitem,
    masked_fill,
    matmul,
    mul,
    reshape,
    scale,
    silu,
    softplus,
    sub,
)

QUADRATIC_MAX_LEN = 4096


# ---------------------------------------------------------------------------
# scan instances and the three equivalent Mamba-2 forms
# ---------------------------------------------------------------------------

@dataclass
class ScanInstance:
    """One unbatched Mamba-2 scan problem.

    x: (L, h, p) values; dt: (L, h) positive steps; B, C: (L, h, s) input /
    output directions shared across the head dimension; A: (h,) negative
    per-head decay rates.
    """

    x: np.ndarray
    dt: np.ndarray
    B: np.ndarray
    C: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        L, h, p = self.x.shape
        if self.dt.shape != (L, h) or self.A.shape != (h,):
            raise ValueError("ScanInstance: dt/A shapes inconsistent with x")
        if self.B.shape != self.C.shape or self.B.shape[:2] != (L, h):
            raise ValueError("ScanInstance: B/C shapes inconsistent with x")
        for name, arr in (("x", self.x), ("dt", self.dt), ("B", self.B), ("C", self.C), ("A", self.A)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"ScanInstance: non-finite values in {name}")
        if L < 1:
            raise ValueError("ScanInstance: L must be >= 1")


def ssd_naive(inst: ScanInstance, D: np.ndarray) -> np.ndarray:
    """Sequential recurrence: S_t = exp(dt_t A) S_{t-1} + dt_t (B_t x x_t); y_t = C_t^T S_t + D x_t."""
    y = kernels.headed_scan_fwd(inst.x[None], inst.dt[None], inst.A, inst.B[None], inst.C[None], D)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("ssd_naive: non-finite intermediate")
    return y[0]


def ssd_quadratic(inst: ScanInstance, D: np.ndarray) -> np.ndarray:
    """Attention-dual form: y = M x + D x with
    M[t,s] = C_t^T B_s * dt_s * exp(sum_{r=s+1..t} dt_r A), zero above the diagonal."""
    L, h, p = inst.x.shape
    if L > QUADRATIC_MAX_LEN:
        raise ValueError(f"ssd_quadratic: L={L} exceeds the {QUADRATIC_MAX_LEN} materialization guard")
    dA = inst.dt * inst.A  # (L, h)
    cs = np.cumsum(dA, axis=0)
    diff = cs[:, None, :] - cs[None, :, :]  # decay exponent from step s to step t
    tril = np.tril(np.ones((L, L), dtype=bool))[:, :, None]
    decay = np.exp(np.where(tril, diff, -np.inf))
    M = np.einsum("thn,shn->tsh", inst.C, inst.B, optimize=True) * decay * inst.dt[None, :, :]
    return np.einsum("tsh,shp->thp", M, inst.x, optimize=True) + D[None, :, None] * inst.x


def ssd_chunked(inst: ScanInstance, D: np.ndarray, chunk_len: int) -> np.ndarray:
    """Blocked form: quadratic within chunks, sequential state carry between."""
    from .autodiff import no_grad

    with no_grad():
        y = ssd_chunked_t(
            Tensor(inst.x[None]),
            Tensor(inst.dt[None]),
            Tensor(inst.A),
            Tensor(inst.B[None]),
            Tensor(inst.C[None]),
            Tensor(D),
            chunk_len,
        )
    return y.data[0]


def ssd_chunked_t(x: Tensor, dt: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, D: Tensor, chunk_len: int) -> Tensor:
    """Differentiable chunked scan on batched tensors.

    x: (B, L, h, p); dt: (B, L, h); A: (h,); Bm, Cm: (B, L, h, s); D: (h,).
    The sequence is zero-padded to a chunk multiple; padded steps have dt = 0,
    so they neither update nor decay the state, and their outputs are sliced
    off. Within a chunk the quadratic (attention-like) form applies; chunk end
    states are combined across chunks through a lower-triangular decay matrix,
    which keeps every contraction a fixed-shape einsum.
    """
    if chunk_len < 1:
        raise ValueError(f"chunk_len must be >= 1, got {chunk_len}")
    Bsz, L, H, P = x.shape
    S = Bm.shape[-1]
    cs = min(chunk_len, L)
    nc = -(-L // cs)
    Lp = nc * cs
    if Lp != L:
        x = _pad_steps(x, Lp - L)
        dt = _pad_steps(dt, Lp - L)
        Bm = _pad_steps(Bm, Lp - L)
        Cm = _pad_steps(Cm, Lp - L)

    x_c = reshape(x, (Bsz, nc, cs, H, P))
    dt_c = reshape(dt, (Bsz, nc, cs, H))
    B_c = reshape(Bm, (Bsz, nc, cs, H, S))
    C_c = reshape(Cm, (Bsz, nc, cs, H, S))

    dA = einsum("bclh,h->bclh", dt_c, A)
    dAcs = cumsum(dA, axis=2)  # within-chunk cumulative log decay

    # intra-chunk: pairwise decay exp(dAcs[t] - dAcs[s]) on the lower triangle
    row = broadcast_to(reshape(dAcs, (Bsz, nc, cs, 1, H)), (Bsz, nc, cs, cs, H))
    col = broadcast_to(reshape(dAcs, (Bsz, nc, 1, cs, H)), (Bsz, nc, cs, cs, H))
    tril = np.broadcast_to(np.tril(np.ones((cs, cs), dtype=bool))[None, None, :, :, None], (Bsz, nc, cs, cs, H))
    decay = exp(masked_fill(sub(row, col), tril, -np.inf))
    scores = einsum("bclhn,bcshn->bclsh", C_c, B_c)
    xdt = einsum("bcsh,bcshp->bcshp", dt_c, x_c)
    y_local = einsum("bclsh,bcshp->bclhp", mul(scores, decay), xdt)

    # end-of-chunk states: S_c = sum_s B_s (x_s dt_s) exp(dAcs[last] - dAcs[s])
    last = getitem(dAcs, (slice(None), slice(None), slice(cs - 1, cs)))
    decay_to_end = exp(sub(broadcast_to(last, (Bsz, nc, cs, H)), dAcs))
    xdt_end = einsum("bcsh,bcshp->bcshp", decay_to_end, xdt)
    chunk_states = einsum("bcshn,bcshp->bchnp", B_c, xdt_end)

    # inter-chunk carry: running[c] = sum_{j<=c} exp(cum[c] - cum[j]) S_j
    lcd = getitem(dAcs, (slice(None), slice(None), cs - 1))  # (B, nc, H) full-chunk log decay
    cum = cumsum(lcd, axis=1)
    crow = broadcast_to(reshape(cum, (Bsz, nc, 1, H)), (Bsz, nc, nc, H))
    ccol = broadcast_to(reshape(cum, (Bsz, 1, nc, H)), (Bsz, nc, nc, H))
    ctril = np.broadcast_to(np.tril(np.ones((nc, nc), dtype=bool))[None, :, :, None], (Bsz, nc, nc, H))
    carry = exp(masked_fill(sub(crow, ccol), ctril, -np.inf))
    running = einsum("bcjh,bjhnp->bchnp", carry, chunk_states)
    zeros = Tensor(np.zeros((Bsz, 1, H, S, P), dtype=x.dtype))
    prev = concat([zeros, getitem(running, (slice(None), slice(0, nc - 1)))], axis=1)

    y_cross = einsum("bclhn,bclh,bchnp->bclhp", C_c, exp(dAcs), prev)
    y = add(add(y_local, y_cross), einsum("h,bclhp->bclhp", D, x_c))
    y = reshape(y, (Bsz, Lp, H, P))
    if Lp != L:
        y = getitem(y, (slice(None), slice(0, L)))
    return y


def _pad_steps(t: Tensor, n: int) -> Tensor:
    pad_shape = (t.shape[0], n) + t.shape[2:]
    return concat([t, Tensor(np.zeros(pad_shape, dtype=t.dtype))], axis=1)


# ---------------------------------------------------------------------------
# Mamba-1 diagonal selective scan as a fused autodiff op
# ---------------------------------------------------------------------------

def selective_scan(u: Tensor, dt: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, D: Tensor) -> Tensor:
    """Per-channel diagonal recurrence with analytic backward.

    u, dt: (B, L, C); A: (C, S) negative; Bm, Cm: (B, L, S); D: (C,).
    Forward and backward dispatch to the compiled scan kernels (numpy
    fallback when unbuilt); the state history from the forward pass is kept
    for the backward recursion.
    """
    y_data, h = kernels.diag_scan_fwd(u.data, dt.data, A.data, Bm.data, Cm.data, D.data)

    def bwd(g):
        du, ddt, dA, dBm, dCm, dD = kernels.diag_scan_bwd(
            g, u.data, dt.data, A.data, Bm.data, Cm.data, D.data, h
        )
        for t, grad in ((u, du), (dt, ddt), (A, dA), (Bm, dBm), (Cm, dCm), (D, dD)):
            if t.requires_grad:
                t.accumulate_grad(grad)

    return _node(y_data, (u, dt, A, Bm, Cm, D), bwd)


# ---------------------------------------------------------------------------
# parameters and layers
# ---------------------------------------------------------------------------

EXPAND = 2  # inner dim = EXPAND * d throughout


@dataclass
class Mamba2Params:
    in_proj: Tensor  # (d, 2*inner + 2*H*S + H), streams [z, x, B, C, dt]
    conv_kernel: Tensor  # (inner + 2*H*S, w) depthwise over the x/B/C streams
    conv_bias: Tensor
    a_log: Tensor  # (H,); A = -exp(a_log) < 0
    dt_bias: Tensor  # (H,)
    D: Tensor  # (H,)
    out_proj: Tensor  # (inner, d), zero-initialized
    d_model: int
    heads: int
    head_dim: int
    state_dim: int
    conv_width: int
    chunk_len: int

    @property
    def inner(self) -> int:
        return self.heads * self.head_dim

    def named(self) -> dict[str, Tensor]:
        return {
            "in_proj": self.in_proj,
            "conv_kernel": self.conv_kernel,
            "conv_bias": self.conv_bias,
            "a_log": self.a_log,
            "dt_bias": self.dt_bias,
            "D": self.D,
            "out_proj": self.out_proj,
        }


@dataclass
class Mamba1Params:
    in_proj: Tensor  # (d, 2*inner + 2*S + inner), streams [z, x, B, C, dt]
    conv_kernel: Tensor  # (inner + 2*S, w)
    conv_bias: Tensor
    a_log: Tensor  # (inner, S); per-channel diagonal A = -exp(a_log)
    dt_bias: Tensor  # (inner,)
    D: Tensor  # (inner,)
    out_proj: Tensor
    d_model: int
    state_dim: int
    conv_width: int

    @property
    def inner(self) -> int:
        return EXPAND * self.d_model

    def named(self) -> dict[str, Tensor]:
        return {
            "in_proj": self.in_proj,
            "conv_kernel": self.conv_kernel,
            "conv_bias": self.conv_bias,
            "a_log": self.a_log,
            "dt_bias": self.dt_bias,
            "D": self.D,
            "out_proj": self.out_proj,
        }


def _dt_bias_init(rng: np.random.Generator, n: int, lo: float = 1e-3, hi: float = 1e-1) -> np.ndarray:
    # softplus(dt_bias) lands in [lo, hi]: dt_bias = softplus^{-1}(dt0)
    dt0 = np.exp(rng.uniform(math.log(lo), math.log(hi), size=n))
    return np.log(np.expm1(dt0))


def init_mamba2(rng: np.random.Generator, d: int, head_dim: int, state_dim: int = 64,
                conv_width: int = 4, chunk_len: int = 32, dtype=np.float32) -> Mamba2Params:
    inner = EXPAND * d
    if inner % head_dim != 0:
        raise ValueError(f"inner dim {inner} not divisible by head_dim {head_dim}")
    H = inner // head_dim
    conv_ch = inner + 2 * H * state_dim
    proj_out = 2 * inner + 2 * H * state_dim + H

    def p(arr):
        return Tensor(arr, requires_grad=True, dtype=dtype)

    return Mamba2Params(
        in_proj=p(rng.normal(0.0, d ** -0.5, size=(d, proj_out))),
        conv_kernel=p(rng.uniform(-1.0, 1.0, size=(conv_ch, conv_width)) / math.sqrt(conv_width)),
        conv_bias=p(np.zeros(conv_ch)),
        a_log=p(np.log(rng.uniform(1.0, 16.0, size=H))),
        dt_bias=p(_dt_bias_init(rng, H)),
        D=p(np.ones(H)),
        out_proj=p(np.zeros((inner, d))),
        d_model=d,
        heads=H,
        head_dim=head_dim,
        state_dim=state_dim,
        conv_width=conv_width,
        chunk_len=chunk_len,
    )


def init_mamba1(rng: np.random.Generator, d: int, state_dim: int = 16,
                conv_width: int = 4, dtype=np.float32) -> Mamba1Params:
    inner = EXPAND * d
    conv_ch = inner + 2 * state_dim
    proj_out = 2 * inner + 2 * state_dim + inner

    def p(arr):
        return Tensor(arr, requires_grad=True, dtype=dtype)

    # S4D-real style: A[c, n] = -(n + 1) for every channel
    a_log = np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (inner, 1)))
    return Mamba1Params(
        in_proj=p(rng.normal(0.0, d ** -0.5, size=(d, proj_out))),
        conv_kernel=p(rng.uniform(-1.0, 1.0, size=(conv_ch, conv_width)) / math.sqrt(conv_width)),
        conv_bias=p(np.zeros(conv_ch)),
        a_log=p(a_log),
        dt_bias=p(_dt_bias_init(rng, inner)),
        D=p(np.ones(inner)),
        out_proj=p(np.zeros((inner, d))),
        d_model=d,
        state_dim=state_dim,
        conv_width=conv_width,
    )


def _split_last(t: Tensor, bounds: list[int]) -> list[Tensor]:
    parts = []
    lo = 0
    for size in bounds:
        idx = (slice(None), slice(None), slice(lo, lo + size))
        parts.append(getitem(t, idx))
        lo += size
    return parts


def mamba2_layer(params: Mamba2Params, u: Tensor) -> Tensor:
    """in_proj -> causal conv + SiLU on x/B/C -> softplus dt -> chunked scan
    -> SiLU(z) gate -> out_proj. Accepts (L, d) or (B, L, d)."""
    squeeze = u.data.ndim == 2
    if squeeze:
        u = reshape(u, (1,) + u.shape)
    Bsz, L, d = u.shape
    if d != params.d_model:
        raise ValueError(f"mamba2_layer: input dim {d} != model dim {params.d_model}")
    H, P, S = params.heads, params.head_dim, params.state_dim
    inner = params.inner
    conv_ch = inner + 2 * H * S

    proj = reshape(matmul(reshape(u, (Bsz * L, d)), params.in_proj), (Bsz, L, 2 * inner + 2 * H * S + H))
    z, xbc, dt_raw = _split_last(proj, [inner, conv_ch, H])
    xbc = silu(conv1d_causal(xbc, params.conv_kernel, params.conv_bias))
    xs, bs, cs_ = _split_last(xbc, [inner, H * S, H * S])
    x = reshape(xs, (Bsz, L, H, P))
    Bm = reshape(bs, (Bsz, L, H, S))
    Cm = reshape(cs_, (Bsz, L, H, S))
    dt = softplus(bias_add(dt_raw, params.dt_bias))
    A = scale(exp(params.a_log), -1.0)

    y = ssd_chunked_t(x, dt, A, Bm, Cm, params.D, params.chunk_len)
    y = mul(reshape(y, (Bsz, L, inner)), silu(z))
    out = reshape(matmul(reshape(y, (Bsz * L, inner)), params.out_proj), (Bsz, L, d))
    return getitem(out, (0,)) if squeeze else out


def mamba1_layer(params: Mamba1Params, u: Tensor) -> Tensor:
    """Same block wiring as mamba2_layer, with the per-channel diagonal
    recurrence computed by the fused selective scan."""
    squeeze = u.data.ndim == 2
    if squeeze:
        u = reshape(u, (1,) + u.shape)
    Bsz, L, d = u.shape
    if d != params.d_model:
        raise ValueError(f"mamba1_layer: input dim {d} != model dim {params.d_model}")
    S = params.state_dim
    inner = params.inner
    conv_ch = inner + 2 * S

    proj = reshape(matmul(reshape(u, (Bsz * L, d)), params.in_proj), (Bsz, L, 2 * inner + 2 * S + inner))
    z, xbc, dt_raw = _split_last(proj, [inner, conv_ch, inner])
    xbc = silu(conv1d_causal(xbc, params.conv_kernel, params.conv_bias))
    xs, bs, cs_ = _split_last(xbc, [inner, S, S])
    dt = softplus(bias_add(dt_raw, params.dt_bias))
    A = scale(exp(params.a_log), -1.0)

    y = selective_scan(xs, dt, A, bs, cs_, params.D)
    y = mul(y, silu(z))
    out = reshape(matmul(reshape(y, (Bsz * L, inner)), params.out_proj), (Bsz, L, d))
    return getitem(out, (0,)) if squeeze else out
