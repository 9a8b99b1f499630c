"""Minimal reverse-mode automatic differentiation engine.

Supplies exactly the operators the map-synthesis network needs: 2-D
convolution, ReLU, 2x2 max pooling, nearest-neighbor upsampling, channel
concatenation/slicing, dense layers, spatial broadcast of conditioning
vectors, elementwise arithmetic and global sums.  Everything is backed by
numpy; image tensors use a channels-last layout, i.e. (H, W, C) or
(N, H, W, C) with an optional leading batch axis.  Convolution weights are
stored (C_out, C_in, k, k).

Each op builds the graph implicitly through parent links; ``trace`` makes
the topological order explicit as a ``Graph`` and ``backward`` runs the
adjoint sweep over it exactly once per node.  Gradients are verified
against central finite differences by ``grad_check``.

Single-threaded and deterministic: identical inputs give bit-identical
outputs within one build.  Graphs must not be shared across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent; names the bad dimension."""


class NumericsError(ArithmeticError):
    """Raised when a numeric invariant breaks (NaN/Inf where finite required)."""


_ALLOWED_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype):
    arr = np.asarray(data, dtype=dtype)
    return arr


class Tensor:
    """N-dimensional float array participating in a differentiation graph.

    ``data`` is float32 or float64 (precision is chosen per graph by the
    dtype of the leaf tensors); ``grad`` is populated by ``backward`` and
    always matches ``data`` in shape and dtype.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        self.data = _as_array(data, dtype)
        if self.data.dtype.type not in _ALLOWED_DTYPES:
            raise TypeError(f"unsupported dtype {self.data.dtype}")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Arithmetic sugar used by the model and loss code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _result(data, parents, op, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.op = op
    if out.requires_grad:
        out.parents = tuple(parents)
        out._backward = backward
    else:
        out.parents = ()
        out._backward = None
    return out


def _check_same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise TypeError(f"mixed dtypes in one graph: {dt} vs {t.data.dtype}")
    return dt


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    _check_same_shape(a, b, "add")
    # second copy keeps the two parent adjoints from aliasing one buffer
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g.copy()))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    _check_same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), "mul",
                   lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _result(a.data * s, (a,), "scale", lambda g: (g * s,))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=a.data.dtype))

    def bwd(g):
        return (np.full(a.data.shape, g, dtype=a.data.dtype),)

    return _result(out, (a,), "sum", bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        # subgradient at 0 is defined as 0
        return (np.where(a.data > 0, g, 0),)

    return _result(out, (a,), "relu", bwd)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _im2col(xp, k, stride):
    """Lower padded (N, Hp, Wp, C) into (N*Ho*Wo, k*k*C) patch rows.

    Rows are kernel-major with channels innermost, matching the weight
    reshape in conv2d.
    """
    n, hp, wp, c = xp.shape
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    if stride > 1:
        win = win[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * ho * wo, k * k * c), ho, wo


def _pad_spatial(x, p):
    if p == 0:
        return x
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w, :] = x
    return xp


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation over channels-last images.

    x: (H, W, C_in) or (N, H, W, C_in); w: (C_out, C_in, k, k); b: (C_out,).
    ``pad`` zero-pads both spatial borders; with stride 1 and pad k//2 the
    spatial size is preserved ("same" mode).
    """
    _check_same_dtype(x, w, b)
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: input must be (H,W,C) or (N,H,W,C), got {x.data.shape}")
    if w.data.ndim != 4 or w.data.shape[2] != w.data.shape[3]:
        raise ShapeError(f"conv2d: weight must be (C_out,C_in,k,k), got {w.data.shape}")
    cout, cin, k, _ = w.data.shape
    if k not in (1, 3):
        raise ShapeError(f"conv2d: kernel size {k} unsupported (expected 1 or 3)")
    n, h, wdt, c = xd.shape
    if c != cin:
        raise ShapeError(f"conv2d: input channels {c} != weight C_in {cin}")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({cout},)")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv2d: pad must be >= 0, got {pad}")

    dtype = xd.dtype
    w2 = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0).reshape(k * k * cin, cout))

    if k == 1 and stride == 1 and pad == 0:
        cols = xd.reshape(-1, cin)
        ho, wo = h, wdt
    else:
        xpad = _pad_spatial(xd, pad)
        cols, ho, wo = _im2col(xpad, k, stride)
    yf = cols @ w2
    yf += b.data
    y = yf.reshape(n, ho, wo, cout)

    def bwd(g):
        gb = g if batched else g[None]
        gf = gb.reshape(-1, cout)
        db = gf.sum(axis=0)
        dw2 = cols.T @ gf
        dw = dw2.reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
        if x.requires_grad:
            if k == 1 and stride == 1 and pad == 0:
                dx = (gf @ w2.T).reshape(xd.shape)
            elif stride == 1:
                # dL/dx is the full correlation of the output gradient with
                # the flipped kernel; one more im2col + GEMM, no col2im.
                gpad = _pad_spatial(gb, k - 1)
                gcols, gh, gw = _im2col(gpad, k, 1)
                wback = np.ascontiguousarray(
                    w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * cout, cin))
                dxp = (gcols @ wback).reshape(n, gh, gw, cin)
                dx = dxp[:, pad:pad + h, pad:pad + wdt, :]
                dx = np.ascontiguousarray(dx)
            else:
                # strided fallback: scatter patch gradients back (col2im)
                dcols = (gf @ w2.T).reshape(n, ho, wo, k, k, cin)
                dxp = np.zeros((n, h + 2 * pad, wdt + 2 * pad, cin), dtype=dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += \
                            dcols[:, :, :, i, j, :]
                dx = dxp[:, pad:pad + h, pad:pad + wdt, :]
        else:
            dx = np.zeros(xd.shape, dtype=dtype)
        if not batched:
            dx = dx[0]
        return dx, np.ascontiguousarray(dw), db

    return _result(y if batched else y[0], (x, w, b), "conv2d", bwd)


# ---------------------------------------------------------------------------
# Pooling / resampling / stacking
# ---------------------------------------------------------------------------

def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; gradient goes to the first (row-major)
    maximal element of each block on ties."""
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    n, h, w, c = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(
            f"maxpool2: spatial dims must be even, got {h}x{w}; pad or crop the input")
    v = xd.reshape(n, h // 2, 2, w // 2, 2, c)
    y = np.maximum(np.maximum(v[:, :, 0, :, 0], v[:, :, 0, :, 1]),
                   np.maximum(v[:, :, 1, :, 0], v[:, :, 1, :, 1]))

    def bwd(g):
        gb = g if batched else g[None]
        dxv = np.zeros_like(v)
        taken = np.zeros(y.shape, dtype=bool)
        for i in range(2):
            for j in range(2):
                sel = (v[:, :, i, :, j] == y) & ~taken
                dxv[:, :, i, :, j][sel] = gb[sel]
                taken |= sel
        dx = dxv.reshape(n, h, w, c)
        return (dx if batched else dx[0],)

    return _result(y if batched else y[0], (x,), "maxpool2", bwd)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; each value is replicated into a 2x2
    block and its gradient is the sum of the four block gradients."""
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    n, h, w, c = xd.shape
    y = np.empty((n, 2 * h, 2 * w, c), dtype=xd.dtype)
    y.reshape(n, h, 2, w, 2, c)[:] = xd[:, :, None, :, None, :]

    def bwd(g):
        gb = g if batched else g[None]
        dx = gb.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))
        return (dx if batched else dx[0],)

    return _result(y if batched else y[0], (x,), "upsample_nearest2", bwd)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the channel (last) axis in argument order."""
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    _check_same_dtype(*xs)
    base = xs[0].data.shape[:-1]
    for t in xs[1:]:
        if t.data.shape[:-1] != base:
            raise ShapeError(
                f"concat_channels: spatial dims differ: {t.data.shape[:-1]} vs {base}")
    out = np.concatenate([t.data for t in xs], axis=-1)
    splits = np.cumsum([t.data.shape[-1] for t in xs])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=-1))

    return _result(out, tuple(xs), "concat_channels", bwd)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Take channels [start, stop) along the last axis (inverse of concat)."""
    c = x.data.shape[-1]
    if not (0 <= start < stop <= c):
        raise ShapeError(f"slice_channels: [{start},{stop}) out of range for {c} channels")
    out = np.ascontiguousarray(x.data[..., start:stop])

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[..., start:stop] = g
        return (dx,)

    return _result(out, (x,), "slice_channels", bwd)


def linear(v: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Dense map W v + b; v is (n,) or batched (N, n), W is (m, n), b is (m,)."""
    _check_same_dtype(v, w, b)
    if w.data.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D, got {w.data.shape}")
    m, nin = w.data.shape
    if v.data.ndim not in (1, 2) or v.data.shape[-1] != nin:
        raise ShapeError(f"linear: input {v.data.shape} incompatible with weight {w.data.shape}")
    if b.data.shape != (m,):
        raise ShapeError(f"linear: bias shape {b.data.shape} != ({m},)")
    out = v.data @ w.data.T + b.data

    def bwd(g):
        if v.data.ndim == 1:
            dv = g @ w.data
            dw = np.outer(g, v.data)
            db = g.copy()
        else:
            dv = g @ w.data
            dw = g.T @ v.data
            db = g.sum(axis=0)
        return dv, dw, db

    return _result(out, (v, w, b), "linear", bwd)


def broadcast_spatial(v: Tensor, h: int, w: int) -> Tensor:
    """Replicate a channel vector over an h x w spatial grid.

    (C,) -> (h, w, C); batched (N, C) -> (N, h, w, C).  The backward pass
    sums gradients over the spatial axes.  This is the only broadcasting the
    engine provides.
    """
    if v.data.ndim == 1:
        out = np.broadcast_to(v.data, (h, w, v.data.shape[0])).copy()
        axes = (0, 1)
    elif v.data.ndim == 2:
        out = np.broadcast_to(v.data[:, None, None, :],
                              (v.data.shape[0], h, w, v.data.shape[1])).copy()
        axes = (1, 2)
    else:
        raise ShapeError(f"broadcast_spatial: input must be (C,) or (N,C), got {v.data.shape}")

    def bwd(g):
        return (g.sum(axis=axes),)

    return _result(out, (v,), "broadcast_spatial", bwd)


# ---------------------------------------------------------------------------
# Graph and backward sweep
# ---------------------------------------------------------------------------

@dataclass
class Graph:
    """Explicit topological view of the graph reaching one output node.

    ``nodes`` lists every reachable tensor, inputs before consumers;
    ``output`` is the traced node.
    """

    nodes: list = field(default_factory=list)
    output: Tensor | None = None

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS to avoid recursion limits on deep graphs
        stack: list[tuple[Tensor, int]] = [(output, 0)]
        on_path: set[int] = set()
        while stack:
            node, idx = stack.pop()
            nid = id(node)
            if idx == 0:
                if nid in seen:
                    continue
                if nid in on_path:
                    raise ValueError("cycle detected in graph")
                on_path.add(nid)
            if idx < len(node.parents):
                stack.append((node, idx + 1))
                stack.append((node.parents[idx], 0))
            else:
                on_path.discard(nid)
                seen.add(nid)
                order.append(node)
        return cls(nodes=order, output=output)


def trace(output: Tensor) -> Graph:
    return Graph.trace(output)


def backward(loss: Tensor | Graph, params: Sequence[Tensor] | None = None) -> Graph:
    """Reverse sweep: populate ``grad`` with dLoss/dTensor for every
    requires_grad tensor reachable from ``loss``.

    ``loss`` must be scalar.  Tensors listed in ``params`` that do not
    participate in the graph receive an exact zero gradient.  Returns the
    traced graph; each node's adjoint is propagated exactly once.
    """
    graph = loss if isinstance(loss, Graph) else Graph.trace(loss)
    out = graph.output
    if out.data.shape != () and out.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {out.data.shape}")

    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg.astype(node.data.dtype, copy=False) \
                    if pg.dtype != node.data.dtype else pg
            else:
                acc += pg
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
    return graph


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """Per-parameter first/second moment buffers plus the step counter."""

    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.step = 0
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place.

    Raises NumericsError on non-finite gradients so training can abort with
    the last good checkpoint intact.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params/grads/state length mismatch")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericsError("adam_step: non-finite gradient encountered")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(op_closure: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    ``op_closure(*inputs)`` must return a scalar Tensor; all inputs must be
    float64.  Returns the max over elements of |a - f| / max(|a|, |f|, 1e-8).
    """
    if not (1e-6 <= eps <= 1e-4):
        raise ValueError(f"grad_check: eps {eps} outside [1e-6, 1e-4]")
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        t.zero_grad()
    loss = op_closure(*inputs)
    backward(loss, params=[t for t in inputs if t.requires_grad])
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_hi = float(op_closure(*inputs).data)
            flat[i] = orig - eps
            f_lo = float(op_closure(*inputs).data)
            flat[i] = orig
            fd = (f_hi - f_lo) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if err > worst:
                worst = err
    return worst
