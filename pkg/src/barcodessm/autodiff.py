"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is deliberately small: a Tensor wraps one contiguous ndarray
(float32 for training, float64 for verification) plus an optional gradient
accumulator and a link into the computation graph. Ops are module-level
functions; each builds a backward closure capturing exactly the arrays it
needs. There is no implicit broadcasting: shapes must match exactly except
where an op's contract says otherwise (bias_add over the last axis,
broadcast_to with an explicit target shape, einsum with explicit subscripts).
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / verification)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense array with optional gradient and autodiff-graph link."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar root, got shape {self.shape}")
        if self._backward is None and not self.requires_grad:
            raise ValueError("backward() on a tensor with no recorded graph")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar: scalars allowed, tensors must match shape exactly.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _node(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _node(a.data * c, (a,), bwd)


def shift(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)

    return _node(a.data + c, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data)

    return _node(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _node(np.log(a.data), (a,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Two-branch form avoids overflow in exp for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * s * (1.0 - s))

    return _node(s, (a,), bwd)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (s + a.data * s * (1.0 - s)))

    return _node(a.data * s, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    out_data = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * _sigmoid(a.data))

    return _node(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and contractions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dims differ {a.data.shape} @ {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"bias_add: bias {b.data.shape} does not match last axis of {x.data.shape}")

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _node(x.data + b.data, (x, b), bwd)


def _parse_einsum(spec: str, n_operands: int) -> tuple[list[str], str]:
    if "->" not in spec or "..." in spec:
        raise ValueError(f"einsum: explicit output required and ellipsis unsupported: {spec!r}")
    lhs, out_spec = spec.split("->")
    in_specs = lhs.split(",")
    if len(in_specs) != n_operands:
        raise ValueError(f"einsum: {len(in_specs)} subscripts for {n_operands} operands")
    for i, sub in enumerate(in_specs):
        if len(set(sub)) != len(sub):
            raise ValueError(f"einsum: repeated index within operand {i}: {sub!r}")
        pool = out_spec + "".join(s for j, s in enumerate(in_specs) if j != i)
        for ch in sub:
            if ch not in pool:
                raise ValueError(f"einsum: index {ch!r} of operand {i} appears nowhere else; gradient undefined")
    return in_specs, out_spec


def einsum(spec: str, *operands: Tensor) -> Tensor:
    """Einstein summation with explicit subscripts.

    Gradients use the standard subscript swap: the gradient w.r.t. operand i
    contracts the output gradient with the remaining operands under the spec
    obtained by exchanging operand i's subscript with the output subscript.
    """
    in_specs, out_spec = _parse_einsum(spec, len(operands))
    datas = [t.data for t in operands]
    out_data = np.einsum(spec, *datas, optimize=True)

    def bwd(g):
        for i, t in enumerate(operands):
            if not t.requires_grad:
                continue
            other_specs = [in_specs[j] for j in range(len(operands)) if j != i]
            others = [datas[j] for j in range(len(operands)) if j != i]
            sub = ",".join([out_spec] + other_specs) + "->" + in_specs[i]
            t.accumulate_grad(np.einsum(sub, g, *others, optimize=True))

    return _node(out_data, operands, bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.data.shape

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(orig))

    return _node(np.ascontiguousarray(a.data.reshape(shape)), (a,), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; size-1 axes of `a` are expanded to `shape`."""
    shape = tuple(shape)
    if a.data.ndim != len(shape):
        raise ValueError(f"broadcast_to: rank mismatch {a.data.shape} -> {shape}; reshape first")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.data.shape, shape)) if s != t)
    for i in axes:
        if a.data.shape[i] != 1:
            raise ValueError(f"broadcast_to: axis {i} has size {a.data.shape[i]}, expected 1 or {shape[i]}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.sum(axis=axes, keepdims=True) if axes else g)

    return _node(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), bwd)


def getitem(a: Tensor, idx) -> Tensor:
    out_data = np.ascontiguousarray(a.data[idx])

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] += g
            a.accumulate_grad(full)

    return _node(out_data, (a,), bwd)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p.accumulate_grad(np.ascontiguousarray(g[tuple(sl)]))

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


# ---------------------------------------------------------------------------
# reductions and scans
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    return _node(np.asarray(out_data), (a,), bwd)


def mean_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a: Tensor, axis: int) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            # adjoint of prefix-sum is suffix-sum
            a.accumulate_grad(np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis))

    return _node(np.cumsum(a.data, axis=axis), (a,), bwd)


def masked_fill(a: Tensor, keep_mask: np.ndarray, fill_value: float) -> Tensor:
    """Keep `a` where keep_mask is true, a constant elsewhere (no grad there)."""
    if keep_mask.shape != a.data.shape:
        raise ValueError(f"masked_fill: mask shape {keep_mask.shape} vs data {a.data.shape}")
    out_data = np.where(keep_mask, a.data, a.data.dtype.type(fill_value))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.where(keep_mask, g, 0.0))

    return _node(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# neural-net ops
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(f"embedding: id out of range [0, {table.data.shape[0]})")

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table.accumulate_grad(full)

    return _node(np.ascontiguousarray(table.data[ids]), (table,), bwd)


def conv1d_causal(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal 1-D convolution.

    x: (B, L, C); kernel: (C, w); output position t sees inputs t-w+1 .. t
    (zero padding on the left), so no future leakage by construction.
    """
    B, L, C = x.data.shape
    if kernel.data.ndim != 2 or kernel.data.shape[0] != C:
        raise ValueError(f"conv1d_causal: kernel {kernel.data.shape} does not match channels {C}")
    w = kernel.data.shape[1]
    out_data = np.zeros_like(x.data)
    for j in range(w):
        if j == 0:
            out_data += x.data * kernel.data[:, 0]
        else:
            out_data[:, j:, :] += x.data[:, : L - j, :] * kernel.data[:, j]
    if bias is not None:
        out_data += bias.data

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for j in range(w):
                if j == 0:
                    gx += g * kernel.data[:, 0]
                else:
                    gx[:, : L - j, :] += g[:, j:, :] * kernel.data[:, j]
            x.accumulate_grad(gx)
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data)
            for j in range(w):
                if j == 0:
                    gk[:, 0] = (g * x.data).sum(axis=(0, 1))
                else:
                    gk[:, j] = (g[:, j:, :] * x.data[:, : L - j, :]).sum(axis=(0, 1))
            kernel.accumulate_grad(gk)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 1)))

    return _node(out_data, parents, bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(f"layernorm: gain/bias must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad((gh - m1 - xhat * m2) * inv)

    return _node(out_data, (x, gain, bias), bwd)


def log_softmax_nd(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the last axis (plain ndarray)."""
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return z - lse


def nll_stats(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, int]:
    """Sum and count of per-position negative log-likelihoods (no graph).

    Same log-softmax arithmetic as softmax_xent, so exp(mean NLL) agrees with
    exp(loss) to floating-point roundoff.
    """
    V = logits.shape[-1]
    flat = log_softmax_nd(logits.reshape(-1, V))
    tflat = targets.reshape(-1)
    nll = -flat[np.arange(tflat.size), tflat]
    if mask is not None:
        sel = mask.reshape(-1).astype(bool)
        nll = nll[sel]
    return float(nll.sum()), int(nll.size)


def softmax_xent(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean softmax cross-entropy over the last axis.

    targets: integer class ids with logits.shape[:-1]; mask (same shape as
    targets, true = include) restricts both the mean and the gradient; masked
    positions receive exactly zero gradient.
    """
    V = logits.data.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ValueError(f"softmax_xent: targets {targets.shape} vs logits {logits.data.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError("softmax_xent: target id out of range")
    flat_logits = logits.data.reshape(-1, V)
    tflat = targets.reshape(-1)
    if mask is None:
        sel = np.ones(tflat.size, dtype=bool)
    else:
        if mask.shape != targets.shape:
            raise ValueError("softmax_xent: mask shape must match targets")
        sel = mask.reshape(-1).astype(bool)
    count = int(sel.sum())
    if count == 0:
        raise ValueError("softmax_xent: no unmasked positions")
    logp = log_softmax_nd(flat_logits)
    loss = -logp[np.arange(tflat.size), tflat][sel].sum() / count
    out_data = np.asarray(loss, dtype=logits.dtype)

    def bwd(g):
        if not logits.requires_grad:
            return
        p = np.exp(logp)
        p[np.arange(tflat.size), tflat] -= 1.0
        p[~sel] = 0.0
        p *= float(g) / count
        logits.accumulate_grad(p.reshape(logits.data.shape))

    return _node(out_data, (logits,), bwd)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(f, params: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    f() evaluates the scalar loss from the current contents of `params`.
    Error metric per coordinate: |g_ad - g_fd| / max(1, |g_fd|). Use float64
    tensors; float32 cannot resolve the differences.
    """
    for p in params:
        p.zero_grad()
    root = f()
    root.backward()
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    with no_grad():
        for p, g_ad in zip(params, grads):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError("grad_check: non-finite loss during finite differencing")
                g_fd = (fp - fm) / (2.0 * eps)
                err = abs(g_ad.reshape(-1)[i] - g_fd) / max(1.0, abs(g_fd))
                worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
