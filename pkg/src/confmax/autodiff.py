"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active append a :class:`TapeNode`
whenever at least one input is tracked (a leaf with ``requires_grad`` or the
output of an earlier recorded node).  ``Tape.backward`` replays the nodes in
reverse insertion order.  Outside a tape every op is a plain numpy computation,
which is what evaluation and finite differencing use.

Broadcasting is deliberately restricted to identical shapes or a size-1
operand; anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import builtins
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor", "Tape", "TapeNode", "GradReport",
    "tensor", "parameter", "current_tape", "record",
    "add", "sub", "mul", "scale", "relu", "exp", "log", "neg", "xlogx",
    "elementwise", "reduce", "sum", "mean", "max", "argmax",
    "take", "reshape", "matmul",
    "log_sum_exp", "log_sum_exp_others", "softmax", "log_softmax",
    "grad_check",
]


class Tensor:
    """A dense row-major float64 array that may participate in a tape."""

    __slots__ = ("data", "requires_grad", "tracked", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        # np.ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.requires_grad = requires_grad
        self.tracked = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all routes go through the recorded ops below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    saved: dict = field(default_factory=dict)


_state = threading.local()


def current_tape() -> Optional["Tape"]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; ``backward`` may be called once per tape.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: TapeNode) -> None:
        if self._consumed:
            raise ContractError("tape already consumed by backward(); start a new tape")
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict:
        """Return ``{parameter: gradient}`` for every ``requires_grad`` leaf on the tape."""
        if self._consumed:
            raise ContractError("backward() called twice on the same tape")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ContractError("backward() on an empty tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            for inp in node.inputs:
                if inp.requires_grad and id(inp) not in leaves:
                    leaves[id(inp)] = inp
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            g = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            out[leaf] = g
        return out


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward, **saved) -> Tensor:
    """Wrap ``data`` as a Tensor and, if a tape is active and any input is tracked, log it."""
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.tracked for t in inputs):
        out.tracked = True
        tape.record(TapeNode(op, tuple(inputs), out, backward, saved))
    return out


# ---------------------------------------------------------------------------
# elementwise


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    if a.shape == b.shape:
        return a.shape
    return b.shape if a.size == 1 else a.shape


def _binary_data(a: Tensor, b: Tensor, fn) -> np.ndarray:
    x = a.data.reshape(()) if a.size == 1 and a.shape != b.shape else a.data
    y = b.data.reshape(()) if b.size == 1 and a.shape != b.shape else b.data
    return np.asarray(fn(x, y), dtype=np.float64).reshape(_broadcast_shape(a, b))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    return record("add", _binary_data(a, b, np.add), (a, b),
                  lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    return record("sub", _binary_data(a, b, np.subtract), (a, b),
                  lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g * (bd.reshape(()) if b.size == 1 and a.shape != b.shape else bd)
        gb = g * (ad.reshape(()) if a.size == 1 and a.shape != b.shape else ad)
        return _unbroadcast(ga, a), _unbroadcast(gb, b)

    return record("mul", _binary_data(a, b, np.multiply), (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return record("relu", out, (a,), lambda g: (g * (out > 0),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return record("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive input")
    x = a.data
    return record("log", np.log(x), (a,), lambda g: (g / x,))


def xlogx(a: Tensor) -> Tensor:
    """x·log x with the convention 0·log 0 = 0; defined for x >= 0."""
    x = a.data
    if np.any(x < 0):
        raise DomainError("xlogx of negative input")
    pos = x > 0
    safe = np.where(pos, x, 1.0)
    y = np.where(pos, x * np.log(safe), 0.0)
    return record("xlogx", y, (a,), lambda g: (g * np.where(pos, np.log(safe) + 1.0, 0.0),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "exp": exp,
                "log": log, "neg": neg, "xlogx": xlogx}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes a float as ``b``."""
    if kind == "scale":
        return scale(a, b)
    fn = _ELEMENTWISE.get(kind)
    if fn is None:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return fn(a, _as_tensor(b))
    return fn(a)


# ---------------------------------------------------------------------------
# reductions and reshaping


def _norm_axis(a: Tensor, axis):
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    ax = _norm_axis(a, axis)
    shape = a.shape

    def backward(g):
        if ax is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return record("sum", np.asarray(a.data.sum(axis=ax)), (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    ax = _norm_axis(a, axis)
    n = a.size if ax is None else a.shape[ax]
    return scale(sum(a, ax), 1.0 / n)


def argmax(a: Tensor, axis: int = -1) -> np.ndarray:
    """Index of the maximum; ties resolve to the lowest index. Not differentiable."""
    ax = _norm_axis(a, axis)
    return np.argmax(a.data, axis=ax)


def max(a: Tensor, axis: int = -1) -> Tensor:  # noqa: A001
    ax = _norm_axis(a, axis)
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax).squeeze(ax)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return record("max", out, (a,), backward)


def reduce(kind: str, a: Tensor, axis: int | None = None):
    if kind == "sum":
        return sum(a, axis)
    if kind == "mean":
        return mean(a, axis)
    if kind == "max":
        return max(a, -1 if axis is None else axis)
    if kind == "argmax":
        return argmax(a, -1 if axis is None else axis)
    raise ContractError(f"unknown reduction {kind!r}")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return record("reshape", data, (a,), lambda g: (g.reshape(old),))


def take(a: Tensor, index) -> Tensor:
    """Pick one entry per row: ``a[i, index[i]]`` for 2-D input, ``a[index]`` for 1-D."""
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape
    if a.ndim == 1:
        out = np.asarray(a.data[index])

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)
    elif a.ndim == 2:
        if index.shape != (shape[0],):
            raise ShapeError(f"take: need one index per row, got {index.shape} for {shape}")
        rows = np.arange(shape[0])
        out = a.data[rows, index]

        def backward(g):
            full = np.zeros(shape)
            full[rows, index] = g
            return (full,)
    else:
        raise ShapeError("take supports 1-D or 2-D tensors")
    return record("take", out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------------------
# log-sum-exp family; all reduce over the last axis


def _class_mask(shape: tuple, exclude) -> np.ndarray:
    """Boolean keep-mask over the last axis with the excluded classes removed."""
    keep = np.ones(shape, dtype=bool)
    if exclude is None:
        return keep
    exclude = np.asarray(exclude, dtype=np.intp)
    n_cl = shape[-1]
    if np.any(exclude < 0) or np.any(exclude >= n_cl):
        raise ShapeError(f"exclude index out of range for {n_cl} classes")
    if len(shape) == 1:
        keep[int(exclude)] = False
    else:
        exclude = np.broadcast_to(exclude, shape[:-1])
        np.put_along_axis(keep, exclude[..., None], False, axis=-1)
    return keep


def log_sum_exp(o: Tensor, exclude=None) -> Tensor:
    """log Σ_{i∈S} e^{o_i} over the last axis, S = all classes minus ``exclude``.

    ``exclude`` is a class index (or one index per row for batched logits).
    Max-subtraction keeps every intermediate finite for |o_i| <= 700.
    """
    if o.ndim == 0 or o.shape[-1] < 1:
        raise ShapeError("log_sum_exp needs at least one class")
    keep = _class_mask(o.shape, exclude)
    if not np.all(keep.any(axis=-1)):
        raise DomainError("exclude leaves an empty class set")
    x = np.where(keep, o.data, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(x - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    weights = e / s

    def backward(g):
        return (np.expand_dims(g, -1) * weights,)

    return record("log_sum_exp", out, (o,), backward)


def log_sum_exp_others(o: Tensor) -> Tensor:
    """Entry c is log Σ_{i≠c} e^{o_i}; same shape as ``o``. Needs >= 2 classes."""
    n_cl = o.shape[-1] if o.ndim else 0
    if n_cl < 2:
        raise DomainError("log_sum_exp_others needs at least two classes")
    x = o.data
    # (..., c, i): logits with the diagonal removed
    eye = np.eye(n_cl, dtype=bool)
    xx = np.where(eye, -np.inf, x[..., None, :])
    m = xx.max(axis=-1, keepdims=True)
    e = np.where(eye, 0.0, np.exp(xx - m))
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    weights = e / s

    def backward(g):
        return (np.einsum("...c,...ci->...i", g, weights),)

    return record("log_sum_exp_others", out, (o,), backward)


def log_softmax(o: Tensor) -> Tensor:
    x = o.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax", out, (o,), backward)


def softmax(o: Tensor) -> Tensor:
    x = o.data
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    p = z / z.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record("softmax", p, (o,), backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradReport:
    max_rel_error: dict
    max_abs_error: dict
    tol: float
    abs_floor: float

    @property
    def passed(self) -> bool:
        return all(self.param_passed(k) for k in self.max_rel_error)

    def param_passed(self, name) -> bool:
        return self.max_rel_error[name] < self.tol or self.max_abs_error[name] < self.abs_floor

    def worst_rel(self) -> float:
        return builtins.max(self.max_rel_error.values(), default=0.0)


def grad_check(loss_builder: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-5, abs_floor: float = 1e-9) -> GradReport:
    """Compare reverse-mode gradients with central finite differences.

    Errors are norm-wise per parameter: ``max|a-n| / max(max|a|, max|n|)``.
    """
    if not 0.0 < h <= 1e-3:
        raise ContractError("finite-difference step must lie in (0, 1e-3]")
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_builder()
    analytic = tape.backward(loss)

    rel, ab = {}, {}
    for i, p in enumerate(params):
        a = analytic.get(p, np.zeros_like(p.data))
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = loss_builder().item()
            flat[j] = orig - h
            fm = loss_builder().item()
            flat[j] = orig
            nflat[j] = (fp - fm) / (2.0 * h)
        key = p.name or f"param{i}"
        diff = float(np.abs(a - num).max()) if a.size else 0.0
        denom = float(builtins.max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0)))
        ab[key] = diff
        rel[key] = diff / denom if denom > 0 else (0.0 if diff == 0 else np.inf)
    return GradReport(rel, ab, tol, abs_floor)
