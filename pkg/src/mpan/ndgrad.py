"""Dense-tensor numeric core: reverse-mode automatic differentiation plus SGD.

Tensors wrap a numpy array (float32 by default, float64 for gradient-check
work) and, when gradients are enabled, a link to the producing operation so
a scalar loss can be backpropagated through the whole graph. Graphs are
single-owner and single-threaded during build/backward; tensors without
graph linkage are plain immutable values and safe to share read-only.

Gradient clearing happens in ``SGD.step``, never in ``backward``, so
repeated backward calls accumulate additively (fan-out works the same way).
"""

from __future__ import annotations

import threading
import warnings
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, LabelError

# Process-wide anomaly counters (zero-vector cosines, skipped SGD params, ...).
# The training harness snapshots and resets these per epoch.
ANOMALIES: Counter = Counter()

# Graph construction is toggled per thread so parallel evaluation workers
# can use no_grad independently.
_STATE = threading.local()

_FLOAT_DTYPES = (np.float32, np.float64)


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph construction inside its block."""

    def __enter__(self):
        self._saved = _grad_enabled()
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._saved
        return False


class Tensor:
    """A dense float array with an optional gradient slot and graph link."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Convenience operators; all defer to the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, ref: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = ref.data.dtype if ref is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op output, linking it into the graph when gradients are on."""
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a gradient contribution into ``t.grad`` (allocating lazily)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, ref=a)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _result(a.data + b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _result(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, ref=a)
    ad, bd = a.data, b.data

    def backward(g):
        _accum(a, _unbroadcast(g * bd, ad.shape))
        _accum(b, _unbroadcast(g * ad, bd.shape))

    return _result(ad * bd, (a, b), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _result(np.where(mask, a.data, 0), (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # Stable in both tails: never exponentiates a large positive argument.
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype)

    def backward(g):
        _accum(a, g * y * (1.0 - y))

    return _result(y, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        bad = float(a.data.min())
        raise DomainError(f"log requires strictly positive input, got min value {bad}")
    y = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _result(y, (a,), backward)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def backward(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _result(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), backward)


def tsum(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), backward)


def l2_norm(a) -> Tensor:
    a = _as_tensor(a)
    n = float(np.sqrt((a.data.astype(np.float64) ** 2).sum()))

    def backward(g):
        if n > 0:
            _accum(a, (float(g) / n) * a.data)
        # zero vector: norm is 0 with zero gradient, same rule as cosine

    return _result(np.asarray(n, dtype=a.data.dtype), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, ref=a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        _accum(a, g @ bd.T)
        _accum(b, ad.T @ g)

    return _result(ad @ bd, (a, b), backward)


def gather_rows(a, indices) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds into the source."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D tensor, got {a.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise DimensionError(
            f"row index out of range for tensor with {a.data.shape[0]} rows")

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return _result(a.data[idx], (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.data.shape}")

    def backward(g):
        _accum(a, g.T)

    return _result(a.data.T.copy(), (a,), backward)


def cosine_similarity(u, v) -> Tensor:
    """cos(u, v) for 1-D vectors. A zero vector yields 0 with zero gradient."""
    u = _as_tensor(u)
    v = _as_tensor(v, ref=u)
    if u.data.ndim != 1 or v.data.ndim != 1 or u.data.shape != v.data.shape:
        raise DimensionError(
            f"cosine_similarity expects matching 1-D vectors, got {u.data.shape} and {v.data.shape}")
    nu = float(np.sqrt((u.data.astype(np.float64) ** 2).sum()))
    nv = float(np.sqrt((v.data.astype(np.float64) ** 2).sum()))
    if nu == 0.0 or nv == 0.0:
        ANOMALIES["cosine_zero_vector"] += 1

        def backward_zero(g):
            pass

        return _result(np.asarray(0.0, dtype=u.data.dtype), (u, v), backward_zero)

    c = float(u.data.astype(np.float64) @ v.data.astype(np.float64) / (nu * nv))

    def backward(g):
        g = float(g)
        _accum(u, g * (v.data / (nu * nv) - c * u.data / (nu * nu)))
        _accum(v, g * (u.data / (nu * nv) - c * v.data / (nv * nv)))

    return _result(np.asarray(c, dtype=u.data.dtype), (u, v), backward)


def l2_normalize_rows(a) -> Tensor:
    """Scale each row of a 2-D tensor to unit norm; zero rows stay zero."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a 2-D tensor, got {a.data.shape}")
    norms = np.sqrt((a.data ** 2).sum(axis=1, keepdims=True))
    zero_rows = norms == 0
    if np.any(zero_rows):
        ANOMALIES["cosine_zero_vector"] += int(zero_rows.sum())
    inv = np.where(zero_rows, 0.0, 1.0 / np.where(zero_rows, 1.0, norms))
    y = a.data * inv

    def backward(g):
        # d(x/|x|) = (g - y * <g, y>_row) / |x|; zero rows get zero gradient
        dots = (g * y).sum(axis=1, keepdims=True)
        _accum(a, (g - y * dots) * inv)

    return _result(y, (a,), backward)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(a) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"softmax expects a 2-D tensor, got {a.data.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dots = (g * y).sum(axis=1, keepdims=True)
        _accum(a, (g - dots) * y)

    return _result(y, (a,), backward)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    idx = np.asarray(labels, dtype=np.int64)
    if idx.ndim != 1:
        raise LabelError(f"labels must be a 1-D integer array, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
        raise LabelError(
            f"label out of range [0, {num_classes}): min={idx.min()}, max={idx.max()}")
    return idx


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects 2-D logits, got {logits.data.shape}")
    b, c = logits.data.shape
    idx = _check_labels(labels, c)
    if idx.shape[0] != b:
        raise DimensionError(f"{idx.shape[0]} labels for a batch of {b} rows")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float((lse - z[np.arange(b), idx]).mean())

    def backward(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(b), idx] -= 1.0
        _accum(logits, (float(g) / b) * p)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


def nll_from_probs(probs, labels) -> Tensor:
    """Mean negative log of the probability assigned to each true label."""
    probs = _as_tensor(probs)
    if probs.data.ndim != 2:
        raise DimensionError(f"nll_from_probs expects 2-D probabilities, got {probs.data.shape}")
    b, c = probs.data.shape
    idx = _check_labels(labels, c)
    if idx.shape[0] != b:
        raise DimensionError(f"{idx.shape[0]} labels for a batch of {b} rows")
    p = np.maximum(probs.data[np.arange(b), idx], np.finfo(probs.data.dtype).tiny)
    loss = float(-np.log(p).mean())

    def backward(g):
        buf = np.zeros_like(probs.data)
        buf[np.arange(b), idx] = -float(g) / (b * p)
        _accum(probs, buf)

    return _result(np.asarray(loss, dtype=probs.data.dtype), (probs,), backward)


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation convolution over NCHW input with an OIHW kernel."""
    x = _as_tensor(x)
    kernel = _as_tensor(kernel, ref=x)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and kernel, got {x.data.shape} and {kernel.data.shape}")
    b, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise DimensionError(
            f"kernel expects {kcin} input channels, input has {cin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, cin, kh, kw, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    out = np.tensordot(kernel.data, cols, axes=([1, 2, 3], [1, 2, 3]))  # cout,b,oh,ow
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        if kernel.requires_grad:
            dk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
            _accum(kernel, dk)
        if x.requires_grad:
            dcols = np.tensordot(kernel.data, g, axes=([0], [1]))  # cin,kh,kw,b,oh,ow
            dcols = dcols.transpose(3, 0, 1, 2, 4, 5)
            dxp = np.zeros((b, cin, hp, wp), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
            _accum(x, dxp)

    return _result(out, (x, kernel), backward)


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling with floor semantics (trailing rows dropped).

    Ties route the gradient to the first element of the window in row-major
    order, deterministically.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"max_pool2d expects 4-D input, got {x.data.shape}")
    b, c, h, w = x.data.shape
    oh, ow = h // size, w // size
    if oh == 0 or ow == 0:
        raise DimensionError(f"pool window {size} larger than input {h}x{w}")
    hc, wc = oh * size, ow * size

    if size == 2:
        # four shifted views beat an argmax over a strided 6-d reshape
        views = [x.data[:, :, i:hc:2, j:wc:2] for i in range(2) for j in range(2)]
        out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))

        def backward2(g):
            dx = np.zeros_like(x.data)
            remaining = np.ones(out.shape, dtype=bool)
            for v, (i, j) in zip(views, ((0, 0), (0, 1), (1, 0), (1, 1))):
                hit = remaining & (v == out)
                dx[:, :, i:hc:2, j:wc:2] += np.where(hit, g, 0)
                remaining &= ~hit
            _accum(x, dx)

        return _result(out, (x,), backward2)

    r = np.ascontiguousarray(x.data[:, :, :hc, :wc]).reshape(b, c, oh, size, ow, size)
    icol = r.argmax(axis=5)
    rowmax = np.take_along_axis(r, icol[..., None], axis=5)[..., 0]
    irow = rowmax.argmax(axis=3)
    out = np.take_along_axis(rowmax, irow[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(g):
        per_row = np.zeros((b, c, oh, size, ow), dtype=x.data.dtype)
        np.put_along_axis(per_row, irow[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        dxc = np.zeros((b, c, oh, size, ow, size), dtype=x.data.dtype)
        np.put_along_axis(dxc, icol[..., None], per_row[..., None], axis=5)
        dx = np.zeros_like(x.data)
        dx[:, :, :hc, :wc] = dxc.reshape(b, c, hc, wc)
        _accum(x, dx)

    return _result(out, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial dimensions of NCHW input: [b,c,h,w] -> [b,c]."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.data.shape}")
    b, c, h, w = x.data.shape

    def backward(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).astype(x.data.dtype))

    return _result(x.data.mean(axis=(2, 3)), (x,), backward)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad tensor.

    The loss must be a scalar; traversal is reverse topological order and
    contributions accumulate additively across fan-out.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    _accum(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad.reshape(node.data.shape))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class SGD:
    """Classic SGD with momentum and loss-coupled L2 weight decay.

    Update per parameter: ``g = grad + weight_decay * param``;
    ``buf = momentum * buf + g``; ``param -= lr * buf``. Gradients are
    cleared at the end of each step. Parameters with no gradient are
    skipped and counted under ``ANOMALIES['sgd_missing_grad']``.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 5e-4, lr_scales: Sequence[float] | None = None):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ContractError("SGD received a tensor with requires_grad=False")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.lr_scales = list(lr_scales) if lr_scales is not None else [1.0] * len(self.params)
        if len(self.lr_scales) != len(self.params):
            raise ContractError("lr_scales length must match params length")
        self.momentum_buffers: list[np.ndarray] = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, buf, scale in zip(self.params, self.momentum_buffers, self.lr_scales):
            if p.grad is None:
                ANOMALIES["sgd_missing_grad"] += 1
                warnings.warn("SGD skipped a parameter with no gradient", stacklevel=2)
                continue
            g = p.grad + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data -= (self.lr * scale) * buf
            p.grad = None
