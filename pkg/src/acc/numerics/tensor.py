"""Reverse-mode autodiff over dense numpy arrays.

Closed op set: exactly what the training objectives need (2-D matmul, row/col
slicing, softmax-family losses, a few pointwise maps). No general
broadcasting; shape rules are checked eagerly and raise ShapeError. Every
completed op checks its output for NaN/Inf and raises NonFiniteError rather
than propagating. Training runs in float32, oracle tests in float64; an op's
output dtype follows its inputs, which must agree.
"""

from __future__ import annotations

import numpy as np

from ..errors import IndexTokenError, NonFiniteError, ShapeError, UsageError

__all__ = [
    "Tensor", "tensor", "add", "add_bias", "neg", "sub", "mul", "scale",
    "matmul", "transpose", "embedding", "concat_rows", "concat_cols",
    "slice_rows", "slice_cols", "sum_all", "mean_all", "mean_rows",
    "softmax", "cross_entropy", "kl_divergence", "gelu", "rmsnorm",
    "sigmoid", "logsigmoid", "bce_with_logits",
]

_FLOATS = (np.float32, np.float64)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Array + grad + backward closure. data: np.float32/float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float32)
        self.data = arr
        _check_finite(arr, "tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate .grad on every reachable requires_grad tensor.

        Accumulation is additive: repeated calls without zero_grad add up.
        """
        if self.data.shape != ():
            raise UsageError("backward requires a scalar loss")
        # iterative topo sort; graphs can be thousands of nodes deep
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
        # transient accumulation buffers, committed to .grad at the end
        accum: dict[int, np.ndarray] = {id(self): np.ones((), dtype=self.dtype)}
        for node in reversed(topo):
            g = accum.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
                _check_finite(node.grad, "gradient")
            if node._bwd is not None:
                for parent, pg in node._bwd(g):
                    if not (parent.requires_grad or parent._bwd is not None):
                        continue
                    pid = id(parent)
                    if pid in accum:
                        accum[pid] = accum[pid] + pg
                    else:
                        accum[pid] = pg

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _result(data: np.ndarray, parents: tuple, bwd) -> Tensor:
    needs = any(p.requires_grad or p._bwd is not None for p in parents)
    return Tensor(data, requires_grad=False,
                  _parents=parents if needs else (),
                  _bwd=bwd if needs else None)


def _same_dtype(*ts: Tensor) -> None:
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise ShapeError(f"dtype mismatch: {d0} vs {t.data.dtype}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """a, b same shape -> same shape."""
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x (T, d) + row vector b (d,) -> (T, d)."""
    _same_dtype(x, b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias shapes {x.shape} vs {b.shape}")
    return _result(x.data + b.data[None, :], (x, b),
                   lambda g: ((x, g), (b, g.sum(axis=0))))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: ((a, -g),))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise, same shape."""
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} vs {b.shape}")
    return _result(a.data * b.data, (a, b),
                   lambda g: ((a, g * b.data), (b, g * a.data)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: ((a, g * c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a (m, k) @ b (k, n) -> (m, n)."""
    _same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} vs {b.shape}")
    return _result(a.data @ b.data, (a, b),
                   lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs 2-D, got {a.shape}")
    return _result(np.ascontiguousarray(a.data.T), (a,),
                   lambda g: ((a, np.ascontiguousarray(g.T)),))


def embedding(table: Tensor, ids) -> Tensor:
    """table (V, d), ids length T -> rows (T, d). Grad scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("embedding ids must be 1-D")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexTokenError(f"token id outside [0,{V})")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return ((table, gt),)

    return _result(table.data[ids], (table,), bwd)


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Concat along axis 0; all parts share column count."""
    if not parts:
        raise UsageError("concat_rows of nothing")
    _same_dtype(*parts)
    cols = {p.shape[1] for p in parts if p.data.ndim == 2}
    if any(p.data.ndim != 2 for p in parts) or len(cols) != 1:
        raise ShapeError(f"concat_rows shapes {[p.shape for p in parts]}")
    sizes = [p.shape[0] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple((p, g[offs[i]:offs[i + 1]]) for i, p in enumerate(parts))

    return _result(np.concatenate([p.data for p in parts], axis=0),
                   tuple(parts), bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Concat along axis 1; all parts share row count."""
    if not parts:
        raise UsageError("concat_cols of nothing")
    _same_dtype(*parts)
    rows = {p.shape[0] for p in parts if p.data.ndim == 2}
    if any(p.data.ndim != 2 for p in parts) or len(rows) != 1:
        raise ShapeError(f"concat_cols shapes {[p.shape for p in parts]}")
    sizes = [p.shape[1] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple((p, g[:, offs[i]:offs[i + 1]]) for i, p in enumerate(parts))

    return _result(np.concatenate([p.data for p in parts], axis=1),
                   tuple(parts), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] of {x.shape}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return ((x, gx),)

    return _result(x.data[start:stop].copy(), (x,), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] of {x.shape}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return ((x, gx),)

    return _result(np.ascontiguousarray(x.data[:, start:stop]), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    return _result(x.data.sum(), (x,),
                   lambda g: ((x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=True)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("mean of empty tensor")
    return _result(x.data.mean(), (x,),
                   lambda g: ((x, np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True)),))


def mean_rows(x: Tensor) -> Tensor:
    """x (T, d) -> (1, d) mean over rows."""
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"mean_rows of {x.shape}")
    T = x.shape[0]
    return _result(x.data.mean(axis=0, keepdims=True), (x,),
                   lambda g: ((x, np.broadcast_to(g / T, x.shape).astype(x.dtype, copy=True)),))


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    # max-subtraction for stability; shared with the no-grad decoder engine
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.ndim == 0 or x.data.shape[axis] < 1:
        raise ShapeError(f"softmax over empty axis of {x.shape}")
    s = _softmax_np(x.data, axis)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((x, (g - dot) * s),)

    return _result(s, (x,), bwd)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """logits (T, V), targets length T of ids -> scalar mean NLL."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy logits {logits.shape} targets {targets.shape}")
    T, V = logits.shape
    if T == 0:
        raise ShapeError("cross_entropy over zero positions")
    if targets.min() < 0 or targets.max() >= V:
        raise IndexTokenError(f"target id outside [0,{V})")
    logp = _log_softmax_np(logits.data, 1)
    rows = np.arange(T)
    loss = -logp[rows, targets].mean()

    def bwd(g):
        gl = _softmax_np(logits.data, 1)
        gl[rows, targets] -= 1.0
        return ((logits, gl * (g / T)),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Mean over rows of sum_v p_v (log p_v - log q_v); p side detached."""
    _same_dtype(p_logits, q_logits)
    if p_logits.shape != q_logits.shape or p_logits.data.ndim != 2:
        raise ShapeError(f"kl shapes {p_logits.shape} vs {q_logits.shape}")
    T = p_logits.shape[0]
    if T == 0:
        raise ShapeError("kl over zero positions")
    p = _softmax_np(p_logits.data, 1)
    logp = _log_softmax_np(p_logits.data, 1)
    logq = _log_softmax_np(q_logits.data, 1)
    val = (p * (logp - logq)).sum(axis=1).mean()
    # val >= 0 mathematically; clip the float noise so the invariant holds
    val = max(float(val), 0.0)

    def bwd(g):
        gq = (_softmax_np(q_logits.data, 1) - p) * (g / T)
        return ((q_logits, gq),)

    return _result(np.asarray(val, dtype=p_logits.dtype), (q_logits,), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU (smooth, finite-difference friendly)."""
    d = x.data

    def bwd(g):
        u = _GELU_C * (d + 0.044715 * d * d * d)
        t = np.tanh(u)
        du = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return ((x, g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * du)),)

    return _result(_gelu_np(d), (x,), bwd)


_RMS_EPS = 1e-5


def _rmsnorm_np(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.sqrt((x * x).mean(axis=1, keepdims=True) + _RMS_EPS)
    return x * inv * gain[None, :]


def rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    """x (T, d), gain (d,) -> (T, d), rows scaled to unit RMS then gained."""
    _same_dtype(x, gain)
    if x.data.ndim != 2 or gain.data.ndim != 1 or x.shape[1] != gain.shape[0]:
        raise ShapeError(f"rmsnorm shapes {x.shape} vs {gain.shape}")
    d = x.shape[1]
    ms = (x.data * x.data).mean(axis=1, keepdims=True) + _RMS_EPS
    inv = 1.0 / np.sqrt(ms)
    xhat = x.data * inv

    def bwd(g):
        gg = (g * xhat).sum(axis=0)
        gx_hat = g * gain.data[None, :]
        # d(xhat)/dx: inv * (I - x x^T / (d * ms))
        dot = (gx_hat * x.data).sum(axis=1, keepdims=True)
        gx = inv * (gx_hat - x.data * (dot / (d * ms)))
        return ((x, gx), (gain, gg))

    return _result(xhat * gain.data[None, :], (x, gain), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # stable both directions: never exponentiates a positive argument
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(s, (x,), lambda g: ((x, g * s * (1.0 - s)),))


def _logsigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable: -softplus(-x)
    return np.where(x > 0, -np.log1p(np.exp(-x)), x - np.log1p(np.exp(x)))


def logsigmoid(x: Tensor) -> Tensor:
    def bwd(g):
        return ((x, g * (1.0 / (1.0 + np.exp(x.data)))),)  # sigma(-x)

    return _result(_logsigmoid_np(x.data), (x,), bwd)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """logits any shape, targets same-shape floats in [0,1] -> scalar mean."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce shapes {logits.shape} vs {t.shape}")
    n = logits.data.size
    if n == 0:
        raise UsageError("bce over empty batch")
    z = logits.data
    loss = (-t * _logsigmoid_np(z) - (1.0 - t) * _logsigmoid_np(-z)).mean()

    def bwd(g):
        s = 1.0 / (1.0 + np.exp(-z))
        return ((logits, (s - t) * (g / n)),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)
