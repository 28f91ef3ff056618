"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a numpy array wrapped in a :class:`Tensor`. Operations build a
computation graph by attaching a ``_backward`` closure to each result; calling
``backward()`` on a scalar loss walks the graph once in reverse topological
order and accumulates gradients into every tensor created with
``requires_grad=True``. Graphs are throwaway: build, backward, discard.

Single-threaded by design. Tensors are immutable after the forward pass, so
read-only sharing across threads (e.g. parallel evaluation on parameter
snapshots) is safe as long as no thread is building a graph on them.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._prev = ()

    @classmethod
    def _result(cls, data: np.ndarray, prev, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = True
        out.grad = None
        out._prev = prev
        out._backward = backward
        return out

    # ---- bookkeeping -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            # copy: g may be a read-only broadcast view or alias a buffer
            self.grad = np.array(g)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode pass from a scalar. Gradients accumulate across calls."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        # iterative post-order: graphs can be deeper than the recursion limit
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ---- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)


# ---- elementwise ops -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return Tensor._result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._result(data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    data = a.data ** p
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        a._accum(g * p * a.data ** (p - 1.0))

    return Tensor._result(data, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        a._accum(g * (a.data > 0.0))

    return Tensor._result(data, (a,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    data = _sigmoid_np(a.data)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        a._accum(g * data * (1.0 - data))

    return Tensor._result(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    data = np.sqrt(a.data)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        a._accum(g * 0.5 / data)

    return Tensor._result(data, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        a._accum(g * data)

    return Tensor._result(data, (a,), backward)


# ---- reductions and shape ops ----------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape))
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        a._accum(np.broadcast_to(gg, a.data.shape))

    return Tensor._result(data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        a._accum(g.reshape(a.data.shape))

    return Tensor._result(data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    data = a.data.transpose(axes)
    if not a.requires_grad:
        return Tensor(data)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        a._accum(g.transpose(inv))

    return Tensor._result(data, (a,), backward)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    data = a.data[idx]
    if not a.requires_grad:
        return Tensor(data)
    # basic indexing (ints/slices) never selects a cell twice, so a plain
    # in-place add is enough; advanced indices may repeat and need add.at
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)

    def backward(g):
        buf = np.zeros_like(a.data)
        if basic:
            buf[idx] += g
        else:
            np.add.at(buf, idx, g)
        a._accum(buf)

    return Tensor._result(data, (a,), backward)


def take_rows(a, index: np.ndarray) -> Tensor:
    """Gather rows along axis 0 by integer index (repeats allowed)."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    data = a.data[index]
    if not a.requires_grad:
        return Tensor(data)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, index, g)
        a._accum(buf)

    return Tensor._result(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not any(t.requires_grad for t in tensors):
        return Tensor(data)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._result(data, tuple(tensors), backward)


def matmul(a, b) -> Tensor:
    """np.matmul semantics for stacks of matrices; 1-D operands are not supported."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2")
    data = np.matmul(a.data, b.data)
    if not (a.requires_grad or b.requires_grad):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape))

    return Tensor._result(data, (a, b), backward)


# ---- least-squares operator fit ---------------------------------------------


def least_squares_min_norm(a, b, ridge: float = 1e-6) -> Tensor:
    """Fit K minimizing ||K A - B||_F^2 + ridge * ||K||_F^2 for D x m snapshots.

    With ridge > 0 the closed form K = B A^T (A A^T + ridge I)^-1 is used and
    the solve participates in backpropagation. With ridge = 0 the exact
    minimum-norm solution K = B A^+ is computed (gradients then require A A^T
    to be invertible).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or a.data.shape != b.data.shape:
        raise ValueError(f"snapshot matrices must share a 2-D shape, got {a.data.shape} vs {b.data.shape}")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    if not (np.isfinite(a.data).all() and np.isfinite(b.data).all()):
        raise NumericError("least_squares_min_norm: non-finite snapshot values")
    d = a.data.shape[0]
    gram = a.data @ a.data.T
    if ridge > 0:
        gram = gram + ridge * np.eye(d)
        try:
            k = np.linalg.solve(gram, a.data @ b.data.T).T
        except np.linalg.LinAlgError as e:  # pragma: no cover - SPD solve should not fail
            raise NumericError(f"least_squares_min_norm: solve failed ({e})") from e
    else:
        try:
            # K A = B  <=>  A^T K^T = B^T; lstsq returns the min-norm K^T
            k = np.linalg.lstsq(a.data.T, b.data.T, rcond=None)[0].T
        except np.linalg.LinAlgError as e:
            raise NumericError(f"least_squares_min_norm: lstsq failed ({e})") from e
    if not np.isfinite(k).all():
        raise NumericError("least_squares_min_norm: solver produced non-finite operator")
    if not (a.requires_grad or b.requires_grad):
        return Tensor(k)

    def backward(g):
        try:
            p = np.linalg.solve(gram, a.data)  # (A A^T + ridge I)^-1 A
        except np.linalg.LinAlgError as e:
            raise NumericError(
                "least_squares_min_norm backward: singular normal matrix; use ridge > 0"
            ) from e
        if b.requires_grad:
            b._accum(g @ p)
        if a.requires_grad:
            resid = b.data - k @ a.data
            a._accum(np.linalg.solve(gram, g.T @ resid) - k.T @ g @ p)

    return Tensor._result(k, (a, b), backward)


# ---- gradient verification ---------------------------------------------------


def finite_diff_check(f, params: dict, eps: float = 1e-5, rel_floor: float = 1e-6) -> dict:
    """Compare analytic gradients of ``f()`` against central finite differences.

    ``f`` rebuilds and returns the scalar loss from the tensors in ``params``
    (name -> Tensor); parameter data is perturbed in place. Returns, per
    parameter, the maximum elementwise relative error
    |analytic - numeric| / max(|analytic|, |numeric|, rel_floor).
    Report-only: nothing is asserted here.
    """
    for t in params.values():
        t.grad = None
    f().backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }
    report = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().data.item()
            flat[i] = orig - eps
            f_minus = f().data.item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)
        ana = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(numeric)), rel_floor)
        report[name] = float(np.max(np.abs(ana - numeric) / denom)) if flat.size else 0.0
    return report
