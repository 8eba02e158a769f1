"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable quantity in the model is a :class:`Tensor` wrapping a
numpy array. Operations executed while a :class:`Tape` is active append a
record (inputs, output, backward rule) in execution order, which is already
a topological order; :func:`backward` replays the tape once in reverse and
accumulates gradients into ``Tensor.grad``.

Plain numpy arrays and scalars mix freely with tensors in all ops; they are
treated as constants and receive no gradient.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericError, SlotFillError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def grad_array(self) -> np.ndarray:
        """Gradient as an array; untouched tensors report exact zeros."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def assert_finite(self, context: str = "") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            where = f" in {context}" if context else ""
            raise NumericError(f"non-finite values{where}")
        return self

    # Operator sugar; all routing goes through the module-level ops.
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class _State(threading.local):
    def __init__(self):
        self.tape: Tape | None = None
        self.grad_enabled = True


_state = _State()


class Tape:
    """Execution-ordered record of differentiable operations.

    A tape is confined to one thread; nesting replaces the active tape for
    the duration of the inner block.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        self._outer = _state.tape
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = self._outer
        return False

    def __len__(self) -> int:
        return len(self.nodes)


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.grad_enabled = self._prev
        return False


def _as_const(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _record(out: Tensor, inputs: Sequence, backward_fn: Callable) -> Tensor:
    tensors = [t for t in inputs if isinstance(t, Tensor)]
    if _state.grad_enabled and _state.tape is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        _state.tape.nodes.append(_Node(out, tensors, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into every reachable tensor's grad.

    The loss must be scalar and must have been recorded on the active tape.
    Each tape node is visited exactly once, in reverse execution order.
    """
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        raise SlotFillError("backward requires a scalar tensor loss")
    tape = _state.tape
    if tape is None or not tape.nodes:
        raise SlotFillError("backward requires a nonempty active tape")
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        node.backward_fn(g)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    av = a.data if isinstance(a, Tensor) else _as_const(a)
    bv = b.data if isinstance(b, Tensor) else _as_const(b)
    out = Tensor(av + bv)

    def bwd(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    av = a.data if isinstance(a, Tensor) else _as_const(a)
    bv = b.data if isinstance(b, Tensor) else _as_const(b)
    out = Tensor(av - bv)

    def bwd(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    av = a.data if isinstance(a, Tensor) else _as_const(a)
    bv = b.data if isinstance(b, Tensor) else _as_const(b)
    out = Tensor(av * bv)

    def bwd(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * bv, a.data.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * av, b.data.shape))

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    av = a.data if isinstance(a, Tensor) else _as_const(a)
    bv = b.data if isinstance(b, Tensor) else _as_const(b)
    out = Tensor(av / bv)

    def bwd(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / bv, a.data.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * av / (bv * bv), b.data.shape))

    return _record(out, (a, b), bwd)


def neg(a) -> Tensor:
    out = Tensor(-a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    """np.matmul semantics: 2-D or batched 3-D operands, broadcastable."""
    av = a.data if isinstance(a, Tensor) else _as_const(a)
    bv = b.data if isinstance(b, Tensor) else _as_const(b)
    out = Tensor(np.matmul(av, bv))

    def bwd(g):
        if isinstance(a, Tensor) and a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old))

    return _record(out, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(np.transpose(a.data, axes))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inv))

    return _record(out, (a,), bwd)


def take_range(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; gradient scatters back in place."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(a.data[index])

    def bwd(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[index] += g

    return _record(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, s, e in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(s, e)
                t.accumulate_grad(g[tuple(index)])

    return _record(out, tuple(tensors), bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def bwd(g):
        parts = np.moveaxis(g, axis, 0)
        for t, gt in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate_grad(gt)

    return _record(out, tuple(tensors), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient is scatter-added per row."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def bwd(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _record(out, (table,), bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    return _record(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities


def texp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * y)

    return _record(out, (a,), bwd)


def tlog(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _record(out, (a,), bwd)


def tsqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * 0.5 / y)

    return _record(out, (a,), bwd)


def ttanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - y * y))

    return _record(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * y * (1.0 - y))

    return _record(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0.0))

    return _record(out, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)

    def bwd(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            a.accumulate_grad(g * (cdf + x * pdf))

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _record(out, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = Tensor(y)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _record(out, (a,), bwd)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    # All -inf along the axis would yield nan; callers guarantee one finite entry.
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    y = m + np.log(s)
    soft = e / s
    out = Tensor(y if keepdims else np.squeeze(y, axis=axis))

    def bwd(g):
        if a.requires_grad:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(g * soft)

    return _record(out, (a,), bwd)


def mask_fill(a: Tensor, keep: np.ndarray, value: float = -np.inf) -> Tensor:
    """Where ``keep`` is False, replace entries with ``value`` (no gradient there)."""
    keep = np.asarray(keep, dtype=bool)
    out = Tensor(np.where(keep, a.data, value))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * keep, a.data.shape))

    return _record(out, (a,), bwd)


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity (shares the data buffer), blocks all gradient flow."""
    return Tensor(a.data)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(a.data * keep)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * keep)

    return _record(out, (a,), bwd)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Rows scaled to unit L2 norm; zero rows map to zero (tiny-eps guard)."""
    ss = tsum(mul(a, a), axis=axis, keepdims=True)
    return div(a, tsqrt(add(ss, 1e-24)))


# ---------------------------------------------------------------------------
# plain-number helpers (outside the tape)

_zero_norm_events = 0


def zero_norm_count() -> int:
    """Diagnostic counter: how many cosine calls saw a zero-norm operand."""
    return _zero_norm_events


def reset_zero_norm_count() -> None:
    global _zero_norm_events
    _zero_norm_events = 0


def log_sum_exp(values) -> float:
    """log sum exp of a 1-D vector with max-subtraction for stability."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise SlotFillError("log_sum_exp requires a nonempty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise NumericError("log_sum_exp requires finite inputs")
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def cosine_similarity(a, b) -> float:
    """Cosine of two equal-length vectors, clipped to [-1, 1].

    A zero-norm operand yields 0.0 and bumps the zero-norm diagnostic
    counter instead of raising; padded all-zero rows hit this path.
    """
    global _zero_norm_events
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    if av.size != bv.size or av.size == 0:
        raise SlotFillError("cosine_similarity requires equal nonzero lengths")
    na = np.sqrt(av @ av)
    nb = np.sqrt(bv @ bv)
    if na == 0.0 or nb == 0.0:
        _zero_norm_events += 1
        return 0.0
    return float(np.clip((av @ bv) / (na * nb), -1.0, 1.0))


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` must rebuild the scalar loss from the current parameter values on
    every call and be deterministic. Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8). Entries where both gradients sit below
    1e-8 score 0: a structurally zero gradient leaves only cancellation noise
    (roughly eps(f)/h) in the central difference, which says nothing about
    correctness.
    """
    for p in params:
        p.zero_grad()
    with Tape():
        loss = f()
        if not np.isfinite(loss.data):
            raise NumericError("finite_diff_check: non-finite loss")
        backward(loss)
    analytic = [p.grad_array().copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.ravel()
            gflat = ga.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("finite_diff_check: non-finite evaluation")
                numeric = (fp - fm) / (2.0 * h)
                if max(abs(gflat[i]), abs(numeric)) < 1e-8:
                    continue
                denom = max(abs(gflat[i]), abs(numeric), 1e-8)
                worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
