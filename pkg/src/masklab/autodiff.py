"""Minimal reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray plus an optional gradient. Ops build a tape of
backward closures; `backward()` on a scalar walks the tape in reverse
topological order and accumulates gradients into every tensor that
requires them, then frees the tape.

Design notes:
 - a tape is confined to one thread for its lifetime;
 - sequence ops (GRU recurrence, scaled-dot attention) are fused single
   nodes with hand-derived backward passes, validated by `grad_check`;
 - float64 for oracles and gradient checks, float32 for training.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dsp
from .errors import ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "attn_weights")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.attn_weights = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        """Add g into grad. `own=True` promises g is a fresh array that no
        other node aliases, so it may be stored by reference."""
        if self.grad is None:
            self.grad = g if own else g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce a (tensor, scalar) pair without upcasting the tensor dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bwd
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(out: Tensor) -> None:
    """Backpropagate from a scalar output; frees the tape afterwards."""
    if out.size != 1:
        raise ShapeError(f"backward() requires a scalar output, got shape {out.shape}")
    if not out.requires_grad:
        return
    # iterative DFS topological sort
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None and id(p) not in visited:
                stack.append((p, False))
    out.grad = np.ones_like(out.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        # free tape and intermediate grads as we go
        node._parents = ()
        node._backward = None
        node.grad = None


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            r = _unbroadcast(g, a.data.shape)
            a._accumulate(r, own=r is not g)
        if b.requires_grad:
            r = _unbroadcast(g, b.data.shape)
            b._accumulate(r, own=r is not g)

    return _make(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            r = _unbroadcast(g, a.data.shape)
            a._accumulate(r, own=r is not g)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape), own=True)

    return _make(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(-g, own=True)

    return _make(-a.data, (a,), bwd)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape), own=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape), own=True)

    return _make(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape), own=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape), own=True)

    return _make(out, (a, b), bwd)


def pow_scalar(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data**p

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0), own=True)

    return _make(out, (a,), bwd)


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data), own=True)

    return _make(np.abs(a.data), (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * out)

    return _make(out, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.data, own=True)

    return _make(np.log(a.data), (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out, own=True)

    return _make(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out * out), own=True)

    return _make(out, (a,), bwd)


def _sigmoid_bound(dtype) -> float:
    # largest |x| where 1 + exp(-|x|) is still distinguishable from 1,
    # keeping outputs strictly inside (0, 1)
    return 15.0 if np.dtype(dtype) == np.float32 else 35.0


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable: clip the logit so exp never overflows and the output stays
    # strictly inside (0, 1)
    b = _sigmoid_bound(x.dtype)
    out = np.asarray(np.clip(x, -b, b))
    np.negative(out, out=out)
    np.exp(out, out=out)
    out += 1.0
    np.reciprocal(out, out=out)
    return out


def _sigmoid_inplace(x: np.ndarray) -> np.ndarray:
    b = _sigmoid_bound(x.dtype)
    np.clip(x, -b, b, out=x)
    np.negative(x, out=x)
    np.exp(x, out=x)
    x += 1.0
    np.reciprocal(x, out=x)
    return x


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * out * (1.0 - out), own=True)

    return _make(out, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0), own=True)

    return _make(out, (a,), bwd)


def prelu(a, slope: Tensor) -> Tensor:
    a, slope = as_tensor(a), as_tensor(slope)
    neg = np.minimum(a.data, 0.0)
    out = np.maximum(a.data, 0.0)
    out += slope.data * neg

    def bwd(g):
        if a.requires_grad:
            ind = (a.data > 0.0).astype(g.dtype)
            gx = g * ind
            np.subtract(1.0, ind, out=ind)
            ind *= slope.data
            gx += g * ind
            a._accumulate(gx, own=True)
        if slope.requires_grad:
            slope._accumulate(_unbroadcast(g * neg, slope.data.shape), own=True)

    return _make(out, (a, slope), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    b = _exp_bound(a.data.dtype)
    out = np.exp(np.clip(a.data, -b, b))
    out /= out.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            tmp = g * out
            a._accumulate(tmp - out * tmp.sum(axis=axis, keepdims=True), own=True)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy(), own=True)

    return _make(out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.size / out.size

    def bwd(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape) / scale, own=True)

    return _make(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(out, (a,), bwd)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out, tuple(tensors), bwd)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            gg = np.zeros_like(a.data)
            gg[idx] = g
            a._accumulate(gg, own=True)

    return _make(out, (a,), bwd)


def pad_axis(a, axis: int, before: int, after: int) -> Tensor:
    a = as_tensor(a)
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    out = np.pad(a.data, widths)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(before, before + a.data.shape[axis])
    idx = tuple(idx)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g[idx])

    return _make(out, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape), own=True)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.data.shape[-1]
                n = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = a.data.swapaxes(-1, -2) @ g
                gb = _unbroadcast(gb, b.data.shape)
            b._accumulate(gb, own=True)

    return _make(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# fused network ops
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply an affine map; single fused node."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.data.shape), own=True)
        if beta.requires_grad:
            r = _unbroadcast(g, beta.data.shape)
            beta._accumulate(r, own=r is not g)
        if x.requires_grad:
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gh - m1 - xhat * m2), own=True)

    return _make(out, (x, gamma, beta), bwd)


def _exp_bound(dtype) -> float:
    # exp stays finite below this; clipping replaces the usual max-subtract
    # (numpy's max reduction is several times slower than sum) and changes
    # nothing while |scores| stays under the bound
    return 80.0 if np.dtype(dtype) == np.float32 else 700.0


def _softmax_rows_inplace(s: np.ndarray) -> None:
    """Softmax over the last axis, in place."""
    b = _exp_bound(s.dtype)
    np.clip(s, -b, b, out=s)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)


def _softmax_backward_inplace(ga: np.ndarray, attn: np.ndarray) -> None:
    """Turn dL/d(attn) into dL/d(scores) in place."""
    ga *= attn
    prod = attn * ga.sum(axis=-1, keepdims=True)
    ga -= prod


def attention_core(q, k, v) -> Tensor:
    """Scaled dot-product attention over (N, L, D) with softmax on the last axis.

    Fused into one node to keep the L x L score tensors off the tape.
    The row-stochastic weights are exposed on the output's `attn_weights`
    attribute (detached) for inspection.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    scale = 1.0 / np.sqrt(q.data.shape[-1])
    k_scaled = k.data * scale  # small; avoids any full-score scaling pass
    s = q.data @ k_scaled.swapaxes(-1, -2)
    _softmax_rows_inplace(s)
    attn = s
    out_data = attn @ v.data

    def bwd(g):
        ga = g @ v.data.swapaxes(-1, -2)
        if v.requires_grad:
            v._accumulate(attn.swapaxes(-1, -2) @ g, own=True)
        _softmax_backward_inplace(ga, attn)
        gs = ga
        if q.requires_grad:
            q._accumulate(gs @ k_scaled, own=True)
        if k.requires_grad:
            gk = gs.swapaxes(-1, -2) @ q.data
            gk *= scale
            k._accumulate(gk, own=True)

    out = _make(out_data, (q, k, v), bwd)
    out.attn_weights = attn
    return out


def gru_recurrence(xg, u) -> Tensor:
    """GRU over precomputed input projections.

    xg: (N, L, 3H) input-to-hidden projections (+bias), gate order [z, r, n];
    u:  (H, 3H) recurrent weights. Returns hidden states (N, L, H) from h0=0.
    Single fused node: backward is hand-rolled BPTT.
    """
    xg, u = as_tensor(xg), as_tensor(u)
    n_batch, length, three_h = xg.data.shape
    h = three_h // 3
    if three_h != 3 * h or u.data.shape != (h, three_h):
        raise ShapeError(f"gru_recurrence: xg {xg.data.shape} vs u {u.data.shape}")
    dt = xg.data.dtype
    zs = np.empty((length, n_batch, h), dtype=dt)
    rs = np.empty_like(zs)
    ns = np.empty_like(zs)
    grns = np.empty_like(zs)
    hs = np.empty_like(zs)
    xgd = xg.data
    grec = np.empty((n_batch, 3 * h), dtype=dt)
    hprev = np.zeros((n_batch, h), dtype=dt)
    for t in range(length):
        np.matmul(hprev, u.data, out=grec)
        z, r, n, grn = zs[t], rs[t], ns[t], grns[t]
        np.add(xgd[:, t, :h], grec[:, :h], out=z)
        _sigmoid_inplace(z)
        np.add(xgd[:, t, h : 2 * h], grec[:, h : 2 * h], out=r)
        _sigmoid_inplace(r)
        grn[:] = grec[:, 2 * h :]
        np.multiply(r, grn, out=n)
        n += xgd[:, t, 2 * h :]
        np.tanh(n, out=n)
        # h = n + z * (h_prev - n)
        hnew = hs[t]
        np.subtract(hprev, n, out=hnew)
        hnew *= z
        hnew += n
        hprev = hnew
    out = np.ascontiguousarray(hs.transpose(1, 0, 2))

    def bwd(g):
        gxg = np.empty_like(xg.data) if xg.requires_grad else None
        gu = np.zeros_like(u.data)
        ut = np.ascontiguousarray(u.data.T)
        carry = np.zeros((n_batch, h), dtype=dt)
        g_rec_grad = np.empty((n_batch, 3 * h), dtype=dt)
        gh = np.empty((n_batch, h), dtype=dt)
        gn_pre = np.empty((n_batch, h), dtype=dt)
        scratch = np.empty((n_batch, h), dtype=dt)
        zeros_h = np.zeros((n_batch, h), dtype=dt)
        gz_pre = g_rec_grad[:, :h]
        gr_pre = g_rec_grad[:, h : 2 * h]
        ggrn = g_rec_grad[:, 2 * h :]
        for t in range(length - 1, -1, -1):
            np.add(g[:, t, :], carry, out=gh)
            z, r, n, grn = zs[t], rs[t], ns[t], grns[t]
            hp = hs[t - 1] if t > 0 else zeros_h
            # gn_pre = gh * (1 - z) * (1 - n^2)
            np.multiply(n, n, out=gn_pre)
            np.subtract(1.0, gn_pre, out=gn_pre)
            gn_pre *= gh
            np.multiply(gn_pre, z, out=scratch)
            gn_pre -= scratch
            # gz_pre = gh * (hp - n) * z * (1 - z)
            np.subtract(hp, n, out=gz_pre)
            gz_pre *= gh
            gz_pre *= z
            np.multiply(gz_pre, z, out=scratch)
            gz_pre -= scratch
            # gr_pre = gn_pre * grn * r * (1 - r)
            np.multiply(gn_pre, grn, out=gr_pre)
            gr_pre *= r
            np.multiply(gr_pre, r, out=scratch)
            gr_pre -= scratch
            # ggrn = gn_pre * r
            np.multiply(gn_pre, r, out=ggrn)
            if gxg is not None:
                gxg[:, t, :h] = gz_pre
                gxg[:, t, h : 2 * h] = gr_pre
                gxg[:, t, 2 * h :] = gn_pre
            gu += hp.T @ g_rec_grad
            # carry = gh * z + g_rec_grad @ u^T
            np.multiply(gh, z, out=carry)
            carry += g_rec_grad @ ut
        if xg.requires_grad:
            xg._accumulate(gxg, own=True)
        if u.requires_grad:
            u._accumulate(gu, own=True)

    return _make(out, (xg, u), bwd)


def conv1d_same(x, w, b, dilation: int = 1) -> Tensor:
    """Fused same-length dilated 1-D convolution over the second-to-last axis.

    x: (..., L, C_in), w: (kernel, C_in, C_out), b: (C_out,). Zero padding,
    odd kernels. Each tap is one full-length gemm over the padded input
    followed by a shifted accumulate, so no im2col buffer is materialized.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    kernel, c_in, c_out = w.data.shape
    *lead, length, cx = x.data.shape
    if cx != c_in:
        raise ShapeError(f"conv1d_same: expected {c_in} input channels, got {x.data.shape}")
    halo = dilation * (kernel // 2)
    dt = x.data.dtype
    lp = length + 2 * halo
    xp = np.zeros((*lead, lp, c_in), dtype=dt)
    xp[..., halo : halo + length, :] = x.data
    xp2 = xp.reshape(-1, lp, c_in)
    n_lead = xp2.shape[0]
    out = np.empty((n_lead, length, c_out), dtype=dt)
    out[:] = b.data
    yfull = np.empty((n_lead, lp, c_out), dtype=dt)
    for j in range(kernel):
        np.matmul(xp2.reshape(-1, c_in), w.data[j], out=yfull.reshape(-1, c_out))
        out += yfull[:, j * dilation : j * dilation + length, :]
    out = out.reshape(*lead, length, c_out)

    def bwd(g):
        g2 = g.reshape(n_lead, length, c_out)
        if b.requires_grad:
            b._accumulate(g2.reshape(-1, c_out).sum(axis=0), own=True)
        gpad = np.zeros((n_lead, lp, c_out), dtype=dt)
        need_x = x.requires_grad
        gxp = np.zeros((n_lead * lp, c_in), dtype=dt) if need_x else None
        scratch = np.empty((n_lead * lp, c_in), dtype=dt) if need_x else None
        gw = np.empty_like(w.data) if w.requires_grad else None
        xp_flat = xp2.reshape(-1, c_in)
        for j in range(kernel):
            gpad[:] = 0.0
            gpad[:, j * dilation : j * dilation + length, :] = g2
            gflat = gpad.reshape(-1, c_out)
            if gw is not None:
                np.matmul(xp_flat.T, gflat, out=gw[j])
            if need_x:
                np.matmul(gflat, w.data[j].T, out=scratch)
                gxp += scratch
        if gw is not None:
            w._accumulate(gw, own=True)
        if need_x:
            gx = gxp.reshape(n_lead, lp, c_in)[:, halo : halo + length, :]
            x._accumulate(np.ascontiguousarray(gx).reshape(x.data.shape), own=True)

    return _make(out, (x, w, b), bwd)


def frame_op(x, window_length: int, hop: int) -> Tensor:
    """Differentiable framing of (..., L) samples into (..., T, window)."""
    x = as_tensor(x)
    out = dsp.frame_signal(x.data, window_length, hop)

    def bwd(g):
        if x.requires_grad:
            full = dsp.overlap_add(g, hop)
            if full.shape[-1] < x.data.shape[-1]:  # trailing samples not framed
                pad = [(0, 0)] * (full.ndim - 1) + [(0, x.data.shape[-1] - full.shape[-1])]
                full = np.pad(full, pad)
            x._accumulate(full, own=True)

    return _make(out, (x,), bwd)


def overlap_add_op(frames, hop: int) -> Tensor:
    """Differentiable overlap-add of (..., T, N) frames into samples."""
    frames = as_tensor(frames)
    win = frames.data.shape[-1]
    out = dsp.overlap_add(frames.data, hop)

    def bwd(g):
        if frames.requires_grad:
            frames._accumulate(dsp.frame_signal(g, win, hop), own=True)

    return _make(out, (frames,), bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    tolerance: float
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_err:.3e} "
            f"(worst: {self.worst_param}, tol {self.tolerance:.1e})"
        )


def grad_check(
    scalar_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    atol: float = 1e-7,
) -> GradCheckReport:
    """Compare tape gradients of `scalar_fn()` against central differences.

    Every parameter must be float64. When a parameter has more elements
    than `max_samples_per_param`, a random subset of its entries is
    checked. Relative error is |a - f| / (|a| + |f| + 1e-8); entries where
    both sides are below `atol` count as exact (finite differencing cannot
    resolve a true zero gradient against its own roundoff noise).
    """
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ShapeError(f"grad_check requires float64 params; {name} is {p.data.dtype}")
        p.zero_grad()
    out = scalar_fn()
    backward(out)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    per_param: dict[str, float] = {}
    worst = ("", 0.0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_samples_per_param is not None and n > max_samples_per_param:
            idxs = rng.choice(n, size=max_samples_per_param, replace=False)
        else:
            idxs = np.arange(n)
        worst_here = 0.0
        ana_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = scalar_fn().item()
            flat[i] = orig - h
            with no_grad():
                fm = scalar_fn().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            a = ana_flat[i]
            if abs(a) < atol and abs(fd) < atol:
                continue
            rel = abs(a - fd) / (abs(a) + abs(fd) + 1e-8)
            if rel > worst_here:
                worst_here = rel
        per_param[name] = worst_here
        if worst_here > worst[1]:
            worst = (name, worst_here)
    return GradCheckReport(
        passed=worst[1] < tolerance,
        tolerance=tolerance,
        max_rel_err=worst[1],
        worst_param=worst[0] or "(none)",
        per_param=per_param,
    )
