"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors record the primitives applied to them; ``backward`` on a scalar
loss replays the tape in reverse topological order, accumulating adjoints
additively at fan-in nodes.  Only the primitives needed by the unrolled
enhancement models live here: convolution (plain and dilated, stride 1,
"same" zero padding), elementwise arithmetic, sliding spatial max, softmax,
reductions, and a momentum-SGD optimizer.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DomainError, ShapeError

DIV_GUARD = 1e-12

_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips tape construction inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    # convenience arithmetic; plain numbers are promoted to constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable tensor with a unique name path inside its model."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn):
    """Build an op output; backward_fn(g) yields (parent, contribution) pairs."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        yield a, _unbroadcast(g, a.data.shape)
        yield b, _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        yield a, _unbroadcast(g, a.data.shape)
        yield b, _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        yield a, _unbroadcast(g * b.data, a.data.shape)
        yield b, _unbroadcast(g * a.data, b.data.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if np.any(np.abs(b.data) < DIV_GUARD):
        raise DomainError(
            f"division by near-zero denominator (|b| < {DIV_GUARD}); clamp first"
        )

    def bw(g):
        yield a, _unbroadcast(g / b.data, a.data.shape)
        yield b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)

    return _make(a.data / b.data, (a, b), bw)


def neg(a):
    a = _as_tensor(a)

    def bw(g):
        yield a, -g

    return _make(-a.data, (a,), bw)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def bw(g):
        yield a, g * mask

    return _make(a.data * mask, (a,), bw)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes through inside the interval."""
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        yield a, g * mask

    return _make(np.clip(a.data, lo, hi), (a,), bw)


def absolute(a):
    a = _as_tensor(a)
    s = np.sign(a.data)  # subgradient 0 at 0

    def bw(g):
        yield a, g * s

    return _make(np.abs(a.data), (a,), bw)


# ---------------------------------------------------------------------------
# structural primitives


def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]

    def bw(g):
        offs = np.cumsum([0] + sizes)
        for t, lo, hi in zip(tensors, offs[:-1], offs[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            yield t, g[tuple(sl)]

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def spatial_diff(a, axis):
    """Forward difference along a spatial axis (2 or 3), zero at the far edge."""
    a = _as_tensor(a)
    if axis not in (2, 3):
        raise ConfigError("spatial_diff supports axes 2 and 3 only")
    d = np.zeros_like(a.data)
    src = [slice(None)] * a.data.ndim
    dst = [slice(None)] * a.data.ndim
    src[axis] = slice(1, None)
    dst[axis] = slice(None, -1)
    src, dst = tuple(src), tuple(dst)
    d[dst] = a.data[src] - a.data[dst]

    def bw(g):
        gx = np.zeros_like(g)
        gx[src] += g[dst]
        gx[dst] -= g[dst]
        yield a, gx

    return _make(d, (a,), bw)


def sliding_max(a, window):
    """Per-channel sliding spatial max with an odd square window, same size."""
    a = _as_tensor(a)
    if window % 2 == 0 or window < 1:
        raise ConfigError(f"window must be odd and positive, got {window}")
    if a.data.ndim != 4 or a.data.shape[2] == 0 or a.data.shape[3] == 0:
        raise ShapeError(f"expected nonempty 4-d input, got shape {a.data.shape}")
    r = window // 2
    n, c, h, w = a.data.shape
    xp = np.pad(a.data, ((0, 0), (0, 0), (r, r), (r, r)), constant_values=-np.inf)
    win = sliding_window_view(xp, (window, window), axis=(2, 3))
    flat = win.reshape(n, c, h, w, window * window)
    idx = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gp = np.zeros_like(xp)
        di, dj = np.unravel_index(idx, (window, window))
        ni, ci, hi, wi = np.indices(idx.shape)
        np.add.at(gp, (ni, ci, hi + di, wi + dj), g)
        yield a, gp[:, :, r : r + h, r : r + w]

    return _make(out_data, (a,), bw)


def conv2d(x, w, b=None, dilation=1):
    """Stride-1 cross-correlation with "same" zero padding.

    x: (n, c_in, h, w); w: (c_out, c_in, k, k) with k odd; b: (c_out,) or None.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if w.data.ndim != 4 or w.data.shape[2] != w.data.shape[3]:
        raise ConfigError(f"kernel must be (c_out, c_in, k, k), got {w.data.shape}")
    k = w.data.shape[2]
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    if x.data.ndim != 4:
        raise ShapeError(f"input must be 4-d, got shape {x.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"channel mismatch: input has {x.data.shape[1]} channels, "
            f"kernel expects {w.data.shape[1]}"
        )
    if dilation < 1:
        raise ConfigError(f"dilation must be positive, got {dilation}")

    out_data = _raw_conv(x.data, w.data, dilation)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out_data = out_data + b.data[None, :, None, None]
        parents.append(b)

    def bw(g):
        if x.requires_grad:
            wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            yield x, _raw_conv(g, wt, dilation)
        if w.requires_grad:
            yield w, _raw_conv_wgrad(x.data, g, k, dilation)
        if b is not None and b.requires_grad:
            yield b, g.sum(axis=(0, 2, 3))

    return _make(out_data, parents, bw)


def _windows(xd, k, dilation):
    r = dilation * (k - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (r, r), (r, r)))
    win = sliding_window_view(xp, (dilation * (k - 1) + 1,) * 2, axis=(2, 3))
    return win[..., ::dilation, ::dilation]


def _raw_conv(xd, wd, dilation):
    win = _windows(xd, wd.shape[2], dilation)
    return np.einsum("nchwij,ocij->nohw", win, wd, optimize=True)


def _raw_conv_wgrad(xd, go, k, dilation):
    win = _windows(xd, k, dilation)
    return np.einsum("nohw,nchwij->ocij", go, win, optimize=True)


# ---------------------------------------------------------------------------
# softmax and reductions


def softmax(logits):
    logits = _as_tensor(logits)
    if logits.data.size == 0:
        raise ConfigError("softmax of an empty vector")
    if not np.all(np.isfinite(logits.data)):
        raise DomainError("softmax requires finite logits")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    y = e / e.sum()

    def bw(g):
        yield logits, y * (g - np.dot(g.ravel(), y.ravel()))

    return _make(y, (logits,), bw)


def reduce_sum(a):
    a = _as_tensor(a)

    def bw(g):
        yield a, np.full_like(a.data, float(g))

    return _make(a.data.sum(), (a,), bw)


def reduce_mean(a):
    a = _as_tensor(a)
    n = a.data.size

    def bw(g):
        yield a, np.full_like(a.data, float(g) / n)

    return _make(a.data.mean(), (a,), bw)


def reduce_l1(a):
    a = _as_tensor(a)
    s = np.sign(a.data)

    def bw(g):
        yield a, float(g) * s

    return _make(np.abs(a.data).sum(), (a,), bw)


def reduce_l2sq(a):
    a = _as_tensor(a)

    def bw(g):
        yield a, 2.0 * float(g) * a.data

    return _make((a.data * a.data).sum(), (a,), bw)


REDUCERS = {
    "sum": reduce_sum,
    "mean": reduce_mean,
    "l1": reduce_l1,
    "l2sq": reduce_l2sq,
}


def reduce(op, a):
    if op not in REDUCERS:
        raise ConfigError(f"unknown reduction {op!r}; expected one of {sorted(REDUCERS)}")
    return REDUCERS[op](a)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Populate adjoints of every requires_grad ancestor of a scalar loss.

    Repeated calls without clearing gradients accumulate additively.
    """
    if loss.data.ndim != 0:
        raise ContractError(
            f"backward expects a scalar loss, got shape {loss.data.shape}"
        )
    if not loss.requires_grad:
        return

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    # adjoints of interior nodes live in a per-pass map; only leaves
    # (tensors created by the user) accumulate into .grad
    adjoint = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(topo):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
            continue
        for parent, contrib in node._backward(g):
            if not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = (
                    np.array(contrib, copy=True)
                    if parent.grad is None
                    else parent.grad + contrib
                )
            elif id(parent) in adjoint:
                adjoint[id(parent)] = adjoint[id(parent)] + contrib
            else:
                adjoint[id(parent)] = np.asarray(contrib, dtype=np.float64)


# ---------------------------------------------------------------------------
# optimizer and gradient checking


class SGD:
    """Momentum SGD with classic (coupled) weight decay.

    v <- momentum * v + (grad + weight_decay * param)
    param <- param - lr * v ; gradients are cleared after the step.

    With ``clip_norm`` set, the joint gradient vector is rescaled to that
    l2 norm when it exceeds it (before momentum).  The losses here are
    pixel sums, so raw gradient magnitudes scale with image area; clipping
    keeps one bad batch from throwing the iterate into a clamped region
    where the gradient dies.
    """

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0, clip_norm=None):
        if lr < 0:
            raise ConfigError("learning rate must be nonnegative")
        if not (0.0 <= momentum < 1.0):
            raise ConfigError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ConfigError("weight decay must be nonnegative")
        if clip_norm is not None and clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is None:
                name = getattr(p, "name", "<unnamed>")
                raise ContractError(
                    f"parameter {name} has no gradient; run backward first"
                )
        if self.clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(p.grad**2)) for p in self.params))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                for p in self.params:
                    p.grad = p.grad * scale
        for p, v in zip(self.params, self._velocity):
            v *= self.momentum
            v += p.grad + self.weight_decay * p.data
            p.data = p.data - self.lr * v
        self.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def grad_check(f, x, h=1e-4):
    """Max relative error between analytic and central-difference gradients.

    The error is |analytic - numeric| / max(1, |numeric|), maximized over
    the coordinates of ``x``.
    """
    x.grad = None
    backward(f(x))
    analytic = np.array(x.grad, copy=True)

    numeric = np.zeros_like(x.data)
    flat = x.data.ravel()
    nflat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * h)

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
