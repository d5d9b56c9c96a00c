"""Small reverse-mode autodiff on top of numpy.

Every operation builds a node holding its forward value and a closure that
maps the output gradient to gradients for each parent. ``backward`` walks the
graph in reverse topological order and accumulates into leaf ``.grad``
arrays, additively, until they are explicitly zeroed.

Heavier composite operations (the DNC memory updates, the LSTM cell) are
registered through :func:`make_node` with hand-written gradients so that a
recurrent step stays a few dozen nodes deep.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

COSINE_EPS = 1e-8


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_state = {"grad": True, "check_finite": True}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def set_finite_checks(enabled: bool) -> None:
    _state["check_finite"] = bool(enabled)


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    """Dense array with an optional place in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return constant(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(data, dtype=None) -> Tensor:
    t = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    t.data = arr
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    t.name = None
    return t


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x, dtype=dtype)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.
    """
    if _state["check_finite"] and not np.isfinite(data).all():
        raise NonFiniteError("non-finite values produced by operation")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    return make_node(
        ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return make_node(out, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return make_node(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return make_node(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return make_node(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a nonpositive value")
    x = a.data
    return make_node(np.log(x), (a,), lambda g: (g / x,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return make_node(np.where(pos, a.data, 0.0).astype(a.dtype, copy=False), (a,), lambda g: (g * pos,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_node(x * x, (a,), lambda g: (2.0 * g * x,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_node(np.logaddexp(0.0, x).astype(x.dtype, copy=False), (a,), lambda g: (g * _sigmoid(x),))


def oneplus(a) -> Tensor:
    """1 + log(1 + e^x), overflow-safe; strictly greater than 1."""
    a = as_tensor(a)
    x = a.data
    return make_node(
        (1.0 + np.logaddexp(0.0, x)).astype(x.dtype, copy=False), (a,), lambda g: (g * _sigmoid(x),)
    )


def elementwise(op: str, *operands) -> Tensor:
    table = {
        "add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "tanh": tanh,
        "exp": exp, "log": log, "relu": relu,
    }
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*operands)


# ---------------------------------------------------------------------------
# linear algebra, reductions, reshaping


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return make_node(ad @ bd, (a, b), back)


def linear(x, w, b=None) -> Tensor:
    """x @ w + b with the bias broadcast over leading axes."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    xd, wd = x.data, w.data
    out = xd @ wd
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, w, b)

    def back(g):
        gx = g @ wd.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out, parents, back)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_node(np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int = -1, ax2: int = -2) -> Tensor:
    a = as_tensor(a)
    return make_node(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if _fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_node(a.data[idx], (a,), back)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    datas = [t.data for t in ts]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, ts, back)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_node(out, ts, back)


# ---------------------------------------------------------------------------
# normalized distributions


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    y = _softmax_np(a.data, axis)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (a,), back)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    return softmax(x, axis=-1)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def back(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), back)


def logmeanexp(x: np.ndarray, axis=None) -> np.ndarray:
    """Stable log(mean(exp(x))) on plain arrays."""
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.mean(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


def cosine_rows(M, k) -> Tensor:
    """Cosine similarity of every row of ``M`` (..., N, W) with ``k`` (..., W).

    The guard ``COSINE_EPS`` sits in the denominator only, so zero rows or a
    zero key give similarity 0.
    """
    M, k = as_tensor(M), as_tensor(k)
    if M.shape[-1] != k.shape[-1]:
        raise ShapeError(f"cosine_rows: word widths differ {M.shape} vs {k.shape}")
    Md, kd = M.data, k.data
    ke = kd[..., None, :]
    dot = (Md * ke).sum(-1)
    nM = np.sqrt((Md * Md).sum(-1))
    nk = np.sqrt((kd * kd).sum(-1))[..., None]
    den = nM * nk + COSINE_EPS
    out = dot / den

    def back(g):
        gdot = g / den
        gden = -g * dot / (den * den)
        gnM = gden * nk
        gnk = (gden * nM).sum(-1, keepdims=True)
        unitM = np.divide(Md, nM[..., None], out=np.zeros_like(Md), where=nM[..., None] > 0)
        unitk = np.divide(kd, nk, out=np.zeros_like(kd), where=nk > 0)
        gM = gdot[..., None] * ke + gnM[..., None] * unitM
        gk = (gdot[..., None] * Md).sum(-2) + gnk * unitk
        return unbroadcast(gM, Md.shape), unbroadcast(gk, kd.shape)

    return make_node(out, (M, k), back)


# ---------------------------------------------------------------------------
# losses


def bernoulli_xent(logits, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Sum of per-element sigmoid cross-entropy weighted by ``weights``."""
    logits = as_tensor(logits)
    x = logits.data
    loss = np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray((loss * weights).sum(), dtype=x.dtype)

    def back(g):
        return (g * weights * (_sigmoid(x) - targets),)

    return make_node(out, (logits,), back)


def softmax_xent(logits, target_ids: np.ndarray, weights: np.ndarray) -> Tensor:
    """Sum over positions of -log softmax(logits)[target], weighted."""
    logits = as_tensor(logits)
    x = logits.data
    z = x - x.max(-1, keepdims=True)
    lse = np.log(np.exp(z).sum(-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, target_ids[..., None], -1)[..., 0]
    out = np.asarray(-(picked * weights).sum(), dtype=x.dtype)

    def back(g):
        p = np.exp(logp)
        np.put_along_axis(p, target_ids[..., None], np.take_along_axis(p, target_ids[..., None], -1) - 1.0, -1)
        return (g * weights[..., None] * p,)

    return make_node(out, (logits,), back)


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, store: "ParameterStore | None" = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=node.dtype)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# parameters and optimization


class ParameterStore:
    """Named trainable tensors plus their Adam moments."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.adam_t = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(value, requires_grad=True, dtype=self.dtype, name=name)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in self._params.values())))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for p in self._params.values():
                p.grad = (p.grad * scale).astype(p.dtype, copy=False)
        return norm

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Flat name -> array view of values and optimizer moments."""
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, p in self._params.items():
            out[f"value/{name}"] = p.data
        for name in self._params:
            if name in self.m:
                out[f"adam_m/{name}"] = self.m[name]
                out[f"adam_v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, adam_t: int) -> None:
        for name, p in self._params.items():
            val = arrays[f"value/{name}"]
            if val.shape != p.shape:
                raise ShapeError(f"parameter {name}: stored shape {val.shape} != {p.shape}")
            p.data = np.array(val, dtype=self.dtype)
            if f"adam_m/{name}" in arrays:
                self.m[name] = np.array(arrays[f"adam_m/{name}"], dtype=self.dtype)
                self.v[name] = np.array(arrays[f"adam_v/{name}"], dtype=self.dtype)
        self.adam_t = int(adam_t)
        self.zero_grad()


def adam_step(store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    store.adam_t += 1
    t = store.adam_t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        if g is None:
            continue
        m = store.m.get(name)
        if m is None:
            m = store.m[name] = np.zeros_like(p.data)
            store.v[name] = np.zeros_like(p.data)
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(store.dtype, copy=False)


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr``, perturbed in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), 0 when both vanish."""
    diff = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale < 1e-12:
        return diff
    return diff / scale


def gradient_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor] | ParameterStore,
                   h: float = 1e-5) -> dict:
    """Compare reverse-mode gradients of ``loss_fn()`` with central differences.

    Returns ``{name: relative_error}`` for every parameter.
    """
    if isinstance(params, ParameterStore):
        named = list(params.items())
    else:
        named = [(p.name or f"p{i}", p) for i, p in enumerate(params)]
    for _, p in named:
        p.grad = np.zeros_like(p.data)
    backward(loss_fn())
    analytic = {name: p.grad.copy() for name, p in named}

    def f() -> float:
        with no_grad():
            return float(loss_fn().data)

    return {name: relative_error(analytic[name], numerical_gradient(f, p.data, h)) for name, p in named}
