"""Dense tensors with reverse-mode differentiation, plus Adam.

Every op records its parents and a backward closure on the output tensor.
Tensors are numbered in creation order, so that order is the tape: a
backward pass walks the reachable nodes in decreasing creation number,
which is a valid reverse topological order.

Broadcasting is deliberately narrow: binary ops accept equal shapes, a
0-d scalar, or an operand whose shape is a trailing suffix of the other's
(a vector added to every row of a matrix, say).
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float64

_counter = itertools.count()
_grad_enabled = True
_check_finite = True


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


class ContractError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


def set_finite_checks(enabled):
    global _check_finite
    _check_finite = bool(enabled)


def make_rng(seed):
    """Counter-based generator (Philox) so streams are reproducible per seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            floating = isinstance(data, np.ndarray) and data.dtype.kind == "f"
            dtype = data.dtype if floating else DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr, opname):
    if _check_finite and not np.isfinite(arr).all():
        raise NumericalError(f"{opname} produced non-finite values")
    return arr


def _result(data, parents, backward_fn, opname):
    out = Tensor.__new__(Tensor)
    out.data = _finite(data, opname)
    out.grad = None
    out.name = None
    out._id = next(_counter)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _broadcast_shape(a, b, opname):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{opname}: shapes {sa} and {sb} do not broadcast "
                     "(only equal shapes or a trailing-suffix operand are allowed)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# ---------------------------------------------------------------- binary ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   "mul")


def matmul(a, b):
    """2-D matrix product; dA = dC Bᵀ, dB = Aᵀ dC."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def bmm(a, b):
    """Batched product of (n, i, k) and (n, k, j) stacks."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b),
                   lambda g: (g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g), "bmm")


# ----------------------------------------------------------------- unary ops

def neg(x):
    x = as_tensor(x)
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


_kink_log = None


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    if _kink_log is not None:
        _kink_log.append(pos)
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise DomainError("log of a non-positive value")
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def softmax(x):
    """Softmax over the last axis, max-shifted."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax over an empty axis (shape {x.shape})")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), back, "softmax")


def log_softmax(x):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"log_softmax over an empty axis (shape {x.shape})")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


# ------------------------------------------------------------ reductions etc

def tsum(x, axis=None):
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _result(np.asarray(x.data.sum()), (x,),
                       lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    ax = axis % x.ndim

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _result(x.data.sum(axis=ax), (x,), back, "sum")


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def concat(parts, axis=-1):
    parts = [as_tensor(p) for p in parts]
    ax = axis % parts[0].ndim
    sizes = [p.shape[ax] for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: {[p.shape for p in parts]}: {exc}") from None
    cuts = np.cumsum(sizes)[:-1]
    return _result(data, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _result(x.data.T, (x,), lambda g: (g.T,), "transpose")


def index_select(x, index):
    """Basic/advanced numpy indexing; gradient scatters back with accumulation."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.data.dtype
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in parts)

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[index] = g  # basic indexing never repeats an element
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(x.data[index], (x,), back, "index")


def embed(table, ids):
    """Row lookup: table (V, E), integer ids of any shape -> ids.shape + (E,)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embed: id out of range for table of {table.shape[0]} rows")
    shape, dtype = table.shape, table.data.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _result(table.data[ids], (table,), back, "embed")


def pick(x, idx):
    """Select x[i, idx[i]] from a (n, m) tensor -> (n,)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: expected (n, m) and (n,), got {x.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError("pick: index out of range")
    rows = np.arange(x.shape[0])
    shape, dtype = x.shape, x.data.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        out[rows, idx] = g
        return (out,)

    return _result(x.data[rows, idx], (x,), back, "pick")


# ------------------------------------------------------------------ backward

def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    nodes, seen, stack = [], set(), [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._id, reverse=True)

    pending = {id(loss): np.ones_like(loss.data)}
    for t in nodes:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------------- adam

@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state):
    """One bias-corrected Adam update over ``params`` (a name -> Tensor mapping).

    Gradients are read from ``p.grad`` and cleared afterwards.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"adam_step: no gradient for {missing[:5]}")
    if state.m and set(state.m) != set(params):
        raise ContractError("adam_step: parameter set changed since the first step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


def clip_grad_norm(params, max_norm):
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values()
                              if p.grad is not None)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


# ---------------------------------------------------------- gradient checking

@contextlib.contextmanager
def _record_kinks():
    global _kink_log
    prev = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def relative_error(analytic, numeric, floor=1e-7):
    """Elementwise |a - n| / max(|a|, |n|, floor), reduced by max."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def numeric_grad(fn, tensor, h=1e-5, indices=None, skip_kinks=False):
    """Central finite differences of scalar ``fn()`` w.r.t. ``tensor.data``.

    With ``skip_kinks`` an entry whose +h or -h evaluation flips any ReLU
    (relative to the unperturbed pass) is set to NaN: the one-sided slopes
    differ there and a central difference is meaningless.
    """
    flat = tensor.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    idxs = range(flat.size) if indices is None else indices
    with no_grad():
        base = None
        if skip_kinks:
            with _record_kinks() as base:
                fn()
        for i in idxs:
            orig = flat[i]
            with _record_kinks() as plus:
                flat[i] = orig + h
                fp = float(fn().data)
            with _record_kinks() as minus:
                flat[i] = orig - h
                fm = float(fn().data)
            flat[i] = orig
            if skip_kinks and not (_same_pattern(base, plus) and _same_pattern(base, minus)):
                out[i] = np.nan
            else:
                out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(tensor.shape)


def normwise_error(analytic, numeric):
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return float(np.linalg.norm(a - n) / scale) if scale > 0 else 0.0


@dataclass
class GradCheck:
    rel_error: float
    max_abs_error: float
    checked: int
    skipped: int


def check_gradients(fn, params, h=1e-5, max_entries=None, rng=None, skip_kinks=True):
    """Compare backward() against central differences for each named tensor.

    The error per tensor is normwise (see ``normwise_error``): elementwise
    ratios are dominated by roundoff on entries whose true gradient is
    below ~1e-6. ``max_entries`` subsamples large tensors.
    """
    for p in params.values():
        p.grad = None
    backward(fn())
    rng = rng or make_rng(0)
    report = {}
    for name, p in params.items():
        analytic = (np.zeros_like(p.data) if p.grad is None else p.grad).reshape(-1)
        idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        numeric = numeric_grad(fn, p, h=h, indices=idx, skip_kinks=skip_kinks).reshape(-1)[idx]
        a = analytic[idx]
        ok = ~np.isnan(numeric)
        diff = np.abs(a[ok] - numeric[ok])
        report[name] = GradCheck(rel_error=normwise_error(a[ok], numeric[ok]),
                                 max_abs_error=float(diff.max()) if diff.size else 0.0,
                                 checked=int(ok.sum()), skipped=int((~ok).sum()))
    for p in params.values():
        p.grad = None
    return report
