"""Dense float64 tensors with reverse-mode autodiff and an Adam optimizer.

Only the operations the behavior model needs are implemented. Every op
returns a new :class:`Tensor`; when any operand requires a gradient the
result keeps a reference to its parents plus a closure that maps the
output gradient onto the parents. :func:`backward` topologically sorts
that graph (the "tape") and walks it once in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

LAYER_NORM_EPS = 1e-5
LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _result(a.value * b.value, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.value), (a,), lambda g: (g / a.value,))


def relu(a: Tensor) -> Tensor:
    on = a.value > 0
    return _result(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


# ------------------------------------------------------------------- algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        value = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(value, (a, b), backward)


def spmm(matrix: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times a dense 2-D tensor."""
    if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise ShapeError("spmm", matrix.shape, x.shape)
    matrix = sp.csr_matrix(matrix)
    mt = matrix.T.tocsr()
    return _result(np.asarray(matrix @ x.value), (x,), lambda g: (np.asarray(mt @ g),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError("transpose", a.shape)
    return _result(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _result(value, (a,), lambda g: (g.reshape(a.shape),))


def take(a: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    value = a.value[idx]

    def backward(g):
        full = np.zeros_like(a.value)
        full[idx] += g
        return (full,)

    return _result(np.array(value, dtype=np.float64), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(value, tensors, backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(value, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    arg = np.argmax(a.value, axis=axis)
    value = np.take_along_axis(a.value, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.value)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(value, (a,), backward)


# ------------------------------------------------------------- normalisers


def _softmax_backward(out: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    return out * (g - (g * out).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (a,), lambda g: (_softmax_backward(out, g, axis),))


def gated_softmax(scores: Tensor, gate: np.ndarray) -> Tensor:
    """Row-normalised ``gate * exp(scores)`` along the last axis.

    ``gate`` is a constant {0,1} array broadcastable to ``scores``. Rows
    must have at least one open entry. The stabilising shift uses only the
    open entries, so entries behind a closed gate cannot perturb a row.
    """
    gate = np.asarray(gate, dtype=np.float64)
    try:
        open_ = np.broadcast_to(gate, scores.shape) > 0
    except ValueError:
        raise ShapeError("gated_softmax", scores.shape, gate.shape) from None
    shift = np.where(open_, scores.value, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(open_, np.exp(np.where(open_, scores.value - shift, 0.0)), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)
    return _result(out, (scores,), lambda g: (_softmax_backward(out, g, -1),))


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply the optional affine terms."""
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        n = x.shape[-1]
        gx = inv / n * (n * g - g.sum(axis=-1, keepdims=True)
                        - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        return (gx,)

    out = _result(xhat, (x,), backward)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy over the leading axis.

    ``log`` is applied to probabilities clamped below at ``LOG_CLAMP``;
    the clamp blocks the gradient of an individual sample when active.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(targets.shape[0])
    pt = p[rows, targets]
    loss = -np.log(np.maximum(pt, LOG_CLAMP)).mean()

    def backward(g):
        grad = p.copy()
        grad[rows, targets] -= 1.0
        grad[pt < LOG_CLAMP] = 0.0
        return (g * grad / targets.shape[0],)

    return _result(np.array(loss), (logits,), backward)


# ------------------------------------------------------------------ backward


def tape(output: Tensor) -> list[Tensor]:
    """Nodes reachable from ``output`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


class Gradients(dict):
    """Gradient arrays keyed by tensor identity."""

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        return dict.__getitem__(self, id(tensor))

    def get(self, tensor: Tensor, default=None):
        return dict.get(self, id(tensor), default)

    def __contains__(self, tensor) -> bool:
        return dict.__contains__(self, id(tensor))


def backward(output: Tensor) -> Gradients:
    """Gradients of a scalar ``output`` for every leaf that requires them.

    Leaf ``.grad`` attributes are overwritten (never accumulated), so
    repeated calls on the same graph give identical results.
    """
    if output.value.size != 1:
        raise ShapeError("backward (output must be scalar)", output.shape)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    result = Gradients()
    for node in reversed(tape(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            dict.__setitem__(result, id(node), g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return result


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        elif g.shape != p.shape:
            raise ShapeError(f"adam_step[{name}]", p.shape, g.shape)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        p.value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


# ----------------------------------------------------------- gradient check


def numeric_gradient(f: Callable[[], Tensor], x: Tensor, h: float = 1e-4) -> np.ndarray:
    out = np.zeros_like(x.value)
    flat = x.value.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f().value)
        flat[i] = old - h
        fm = float(f().value)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Max over entries of |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def finite_diff_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` rebuilds a scalar from ``inputs`` each call; the inputs are
    perturbed in place and restored.
    """
    grads = backward(f())
    worst = 0.0
    for x in inputs:
        analytic = grads.get(x)
        if analytic is None:
            analytic = np.zeros_like(x.value)
        worst = max(worst, relative_error(analytic, numeric_gradient(f, x, h)))
    return worst
