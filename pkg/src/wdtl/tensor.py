"""Dense arrays with define-by-run reverse-mode differentiation.

Every operation records its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks the tape in reverse
topological order, writes ``.grad`` on every reachable leaf that requires
gradients, then frees the interior of the tape.

The only second-order quantity the package needs is the gradient penalty of
a one-hidden-layer ReLU critic, whose input gradient has a closed form.
``relu_mlp_gradient_penalty`` differentiates that closed form analytically
instead of going through a general higher-order engine.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self):
        return backward(self)

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


_RECORDING = [True]


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape."""
    prev = _RECORDING[0]
    _RECORDING[0] = False
    try:
        yield
    finally:
        _RECORDING[0] = prev


def _node(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _RECORDING[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Differentiate a scalar ``loss``; return ``{id(leaf): grad}``.

    Leaf ``.grad`` fields are overwritten, not accumulated across calls.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    # iterative post-order DFS; the tape is a DAG by construction
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            leaves[id(node)] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
    return leaves


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,))


def clamp(a: Tensor, lo, hi) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _node(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions

def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return tsum(mul(a, b))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def slice_rows(a: Tensor, start, stop) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _node(a.data[start:stop], (a,), bw)


def concat(parts: list[Tensor], axis=0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as [out, in]."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear input {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T + b.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        return gx, gw, g.sum(axis=0)

    return _node(out, (x, w, b), bw)


# ---------------------------------------------------------------- 1-D conv / pool

def conv1d(x: Tensor, w: Tensor, b: Tensor, stride=1) -> Tensor:
    """Valid cross-correlation. x: [N, C, L], w: [F, C, k], b: [F] -> [N, F, Lout]."""
    if x.data.ndim != 3:
        raise DimensionError(f"conv1d expects [N, C, L], got {x.shape}")
    n, c, length = x.shape
    f, cw, k = w.shape
    if cw != c:
        raise DimensionError(f"conv1d channels: input {c}, kernel {cw}")
    if length < k:
        raise DimensionError(f"conv1d input length {length} < kernel {k}")
    lout = (length - k) // stride + 1
    # im2col: [N, Lout, C*k] rows, one per output position
    cols = sliding_window_view(x.data, k, axis=2)[:, :, ::stride][:, :, :lout]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(n * lout, c * k)
    wmat = w.data.reshape(f, c * k)
    out = (cols @ wmat.T).reshape(n, lout, f).transpose(0, 2, 1) + b.data[None, :, None]

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(n * lout, f)          # [N*Lout, F]
        gw = (g2.T @ cols).reshape(f, c, k) if w.requires_grad else None
        gb = g.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g).reshape(n, c, k, lout)   # col2im source
            # tap t lands on positions stride*o + t; split positions by phase
            # t % stride so every accumulation is a contiguous run
            m = -(-length // stride)
            gxp = np.zeros((n, c, stride, m), dtype=x.data.dtype)
            for t in range(k):
                j = t // stride
                gxp[:, :, t % stride, j:j + lout] += gcols[:, :, t, :]
            gx = gxp.transpose(0, 1, 3, 2).reshape(n, c, stride * m)[:, :, :length]
        return gx, gw, gb

    return _node(np.ascontiguousarray(out), (x, w, b), bw)


def maxpool1d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max over windows; gradient goes to the first maximal index."""
    if x.data.ndim != 3:
        raise DimensionError(f"maxpool1d expects [N, C, L], got {x.shape}")
    n, c, length = x.shape
    if length < window:
        raise DimensionError(f"maxpool1d input length {length} < window {window}")
    lout = (length - window) // stride + 1
    span = stride * (lout - 1) + 1
    # running max over window offsets; strict '>' keeps the first maximum
    out = x.data[:, :, 0:span:stride]
    arg = np.zeros(out.shape, dtype=np.int8 if window < 128 else np.intp)
    for j in range(1, window):
        cand = x.data[:, :, j:j + span:stride]
        better = cand > out
        out = np.where(better, cand, out)
        np.copyto(arg, j, where=better)
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = np.zeros_like(x.data)
        if stride >= window:
            # disjoint windows: each input position receives at most one gradient
            for j in range(window):
                gx[:, :, j:j + span:stride] = np.where(arg == j, g, 0)
            return (gx,)
        for j in range(window):
            gx[:, :, j:j + span:stride] += np.where(arg == j, g, 0)
        return (gx,)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------- classification

def softmax(z: Tensor, axis=-1) -> Tensor:
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _node(p, (z,), bw)


def cross_entropy(probs: Tensor, labels, eps=1e-12) -> Tensor:
    """Mean over the batch of ``-log p[label]``; ``probs`` is [batch, K]."""
    labels = np.asarray(labels)
    if probs.data.ndim != 2 or labels.shape != (probs.shape[0],):
        raise DimensionError(f"cross_entropy probs {probs.shape} labels {labels.shape}")
    k = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}")
    rows = np.arange(labels.size)
    picked = np.clip(probs.data[rows, labels], eps, 1.0)
    n = labels.size
    raw = probs.data[rows, labels]
    live = (raw >= eps) & (raw <= 1.0)

    def bw(g):
        gp = np.zeros_like(probs.data)
        gp[rows, labels] = np.where(live, -g / (n * picked), 0.0)
        return (gp,)

    return _node(np.asarray(-np.log(picked).mean(), dtype=probs.dtype), (probs,), bw)


# ---------------------------------------------------------------- second order

def relu_mlp_input_grad(h, w1, b1, w2):
    """Closed-form d score / d h for score = w2 . relu(w1 h + b1) + b2.

    h: [N, D], w1: [H, D], b1: [H], w2: [1, H] -> ([N, D] gradients, [N, H] mask).
    """
    mask = (h @ w1.T + b1) > 0
    u = mask * w2.reshape(1, -1)
    return u @ w1, mask


def relu_mlp_gradient_penalty(h: Tensor, w1: Tensor, b1: Tensor, w2: Tensor) -> Tensor:
    """Mean over rows of (||d score/d h||_2 - 1)^2 for a one-hidden-layer ReLU critic.

    The input gradient w1^T (w2 * 1[w1 h + b1 > 0]) is piecewise constant in h
    and b1, so their derivatives vanish almost everywhere. Only w1 and w2 get
    nonzero gradients.
    """
    if h.data.ndim != 2 or h.shape[1] != w1.shape[1]:
        raise DimensionError(f"penalty features {h.shape} vs critic weight {w1.shape}")
    grad_h, mask = relu_mlp_input_grad(h.data, w1.data, b1.data, w2.data)
    norms = np.sqrt((grad_h * grad_h).sum(axis=1))
    n = h.shape[0]
    value = np.mean((norms - 1.0) ** 2)

    def bw(g):
        safe = np.where(norms > 0, norms, 1.0)
        q = (g * 2.0 / n) * ((norms - 1.0) / safe)[:, None] * grad_h  # d/d grad_h, [N, D]
        u = mask * w2.data.reshape(1, -1)                             # [N, H]
        gw1 = u.T @ q
        gw2 = (mask * (q @ w1.data.T)).sum(axis=0).reshape(w2.shape)
        return (np.zeros_like(h.data), gw1, np.zeros_like(b1.data), gw2)

    return _node(np.asarray(value, dtype=h.dtype), (h, w1, b1, w2), bw)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradReport:
    max_abs_error: float
    max_rel_error: float
    per_parameter: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    nonfinite: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    @property
    def ok(self):
        return not self.nonfinite


def finite_diff_check(f, point: dict[str, np.ndarray], step=1e-5, floor=1e-8) -> GradReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` maps a dict of Tensors to a scalar Tensor. Relative error per
    coordinate is |a - n| / max(|a|, |n|, floor).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
              for k, v in point.items()}
    loss = f(leaves)
    backward(loss)
    report = GradReport(0.0, 0.0)
    for name, leaf in leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = np.zeros_like(leaf.data)
        base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
        flat = base[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = orig - step
            down = f({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = orig
            idx = np.unravel_index(i, leaf.shape)
            if not (np.isfinite(up) and np.isfinite(down)):
                report.nonfinite.append((name, tuple(int(j) for j in idx)))
                numeric[idx] = np.nan
                continue
            numeric[idx] = (up - down) / (2 * step)
        report.per_parameter[name] = (analytic, numeric)
        ok = np.isfinite(numeric)
        if ok.any():
            diff = np.abs(analytic - numeric)[ok]
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric))[ok], floor)
            report.max_abs_error = max(report.max_abs_error, float(diff.max()))
            report.max_rel_error = max(report.max_rel_error, float((diff / denom).max()))
    return report
