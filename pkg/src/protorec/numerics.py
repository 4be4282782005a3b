"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every node records its parents and a closure mapping the upstream gradient
to one gradient per parent. ``backward`` walks the tape once in reverse
topological order, so the result is deterministic for a fixed graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_CLAMP = 1e-12


class EmptySupportError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, idx):
        return index(self, idx)

    # reductions and shape -------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _node(data, parents: Sequence[Tensor], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


# elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb
    return _node(out, (a, b), back)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _node(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Natural log with arguments clamped at LOG_CLAMP (zero gradient below)."""
    clamped = np.maximum(a.data, LOG_CLAMP)
    out = np.log(clamped)
    live = a.data > LOG_CLAMP
    return _node(out, (a,), lambda g: (np.where(live, g / clamped, 0.0),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    live = a.data > 0
    return _node(np.where(live, a.data, 0.0), (a,), lambda g: (g * live,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    live = a.data > 0
    out = np.where(live, a.data, slope * a.data)
    return _node(out, (a,), lambda g: (np.where(live, g, slope * g),))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    live = a.data > 0
    negpart = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(live, a.data, negpart)
    return _node(out, (a,), lambda g: (np.where(live, g, g * (negpart + alpha)),))


# linear algebra and shape ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def back(g):
        if b.ndim == 2 and a.ndim >= 2:
            # stacked rows times one matrix: fold batch dims instead of broadcasting
            ga = np.matmul(g, b.data.T)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[-1])
            return ga, gb
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        gg = g
        if a.ndim == 1:
            gg = np.expand_dims(gg, -2)
        if b.ndim == 1:
            gg = np.expand_dims(gg, -1)
        ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., :, 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _node(out, (a, b), back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(out, (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),))


def _scatter_rows(target: np.ndarray, rows: np.ndarray, values: np.ndarray) -> None:
    """``target[rows] += values`` with repeated rows summed (sorted reduction)."""
    flat = rows.ravel()
    if flat.size == 0:
        return
    vals = values.reshape((flat.size,) + target.shape[1:])
    order = np.argsort(flat, kind="stable")
    ordered = flat[order]
    starts = np.flatnonzero(np.r_[True, ordered[1:] != ordered[:-1]])
    target[ordered[starts]] += np.add.reduceat(vals[order], starts, axis=0)


def _is_row_index(idx) -> bool:
    return isinstance(idx, np.ndarray) and idx.dtype.kind in "iu"


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        if _is_row_index(idx):
            _scatter_rows(full, idx, g)
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _node(np.array(out, dtype=np.float64), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _node(out, tensors, lambda g: tuple(np.squeeze(x, axis) for x in np.split(g, n, axis=axis)))


def segment_sum(a: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``segments``."""
    segments = np.asarray(segments)
    out = np.zeros((num_segments,) + a.shape[1:])
    _scatter_rows(out, segments, a.data)
    return _node(out, (a,), lambda g: (g[segments],))


# normalised exponentials ------------------------------------------------

def _masked(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    return np.where(mask, x, -np.inf)


def softmax_np(x, axis: int = -1, mask=None) -> np.ndarray:
    """Stable softmax over ``axis``; ``-inf`` entries (or ``mask == False``) map to 0."""
    x = _masked(np.asarray(x, dtype=np.float64), mask)
    top = np.max(x, axis=axis, keepdims=True)
    if np.any(np.isneginf(top)):
        raise EmptySupportError("empty support: every entry is -inf")
    e = np.exp(x - top)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    out = softmax_np(a.data, axis, mask)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _node(out, (a,), back)


def log_softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    x = _masked(a.data, mask)
    top = np.max(x, axis=axis, keepdims=True)
    if np.any(np.isneginf(top)):
        raise EmptySupportError("empty support: every entry is -inf")
    shifted = x - top
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        g = np.where(np.isneginf(out), 0.0, g)
        return (g - probs * g.sum(axis=axis, keepdims=True),)
    return _node(out, (a,), back)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy computed from logits without overflow."""
    y = np.asarray(targets, dtype=np.float64)
    x = logits.data
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    p = _sigmoid_np(x)
    return _node(out, (logits,), lambda g: (g * (p - y),))


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    norms = np.linalg.norm(a.data, axis=axis, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateVectorError("degenerate vector: zero norm")
    return a / sqrt(tsum(a * a, axis=axis, keepdims=True))


# plain numpy helpers ----------------------------------------------------

def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateVectorError("degenerate vector: zero norm")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...] | None = None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


# reverse pass -----------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Propagate d(loss)/d(node) through the tape.

    Leaf tensors that require grad get their ``.grad`` overwritten. If
    ``params`` is given, their gradients are returned in the same order
    (zeros for parameters the loss does not reach).
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    for node in _topological(loss):
        if not node._parents:
            node.grad = grads.get(id(node), np.zeros_like(node.data))
    if params is None:
        return None
    return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


# optimisation -----------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape} vs grad {np.shape(g)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Convenience wrapper pairing a parameter list with its AdamState."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, **kw):
        self.params = list(params)
        self.state = AdamState(lr=lr, **kw)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self.params, grads, self.state)


# finite differences -----------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    probes: int
    kinks_skipped: int
    worst: tuple[str, tuple[int, ...]] | None = None


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], probes: int = 100,
              h: float = 1e-5, rng: np.random.Generator | None = None,
              floor: float = 1e-6) -> GradCheckResult:
    """Compare tape gradients against central differences at random coordinates.

    Coordinates whose one-sided differences disagree grossly sit on a kink
    (ReLU and friends); they are redrawn, and the count is reported.
    """
    rng = rng or np.random.default_rng(0)
    params = list(params)
    analytic = backward(loss_fn(), params)
    sizes = np.array([p.size for p in params])
    worst_err, worst = 0.0, None
    kinks = done = 0
    while done < probes:
        if kinks > probes:
            raise RuntimeError("too many non-differentiable probes")
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        flat = int(rng.integers(params[k].size))
        coord = np.unravel_index(flat, params[k].shape)
        p = params[k]
        orig = p.data[coord]
        f0 = loss_fn().item()
        p.data[coord] = orig + h
        fp = loss_fn().item()
        p.data[coord] = orig - h
        fm = loss_fn().item()
        p.data[coord] = orig
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if abs(fwd - bwd) > 1e-2 * max(abs(fwd), abs(bwd)) + 1e-6:
            kinks += 1
            continue
        numeric = (fp - fm) / (2 * h)
        err = relative_error(float(analytic[k][coord]), numeric, floor)
        if err > worst_err:
            worst_err, worst = err, (p.name or f"param{k}", tuple(int(c) for c in coord))
        done += 1
    return GradCheckResult(worst_err, done, kinks, worst)
