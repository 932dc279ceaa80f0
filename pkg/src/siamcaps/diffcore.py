"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations record themselves onto the active :class:`GradTape` (entered with a
``with`` block) whenever one of their inputs requires a gradient or was itself
produced on that tape.  Outside a tape every op is a plain forward
computation, which is how inference runs.

Only the operations the capsule back-end needs are provided.  Broadcasting is
limited to what numpy does for ``add``/``sub``/``mul``; everything else expects
exact shapes.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, UsageError

_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "siamcaps_active_tape", default=None
)

BCE_CLAMP_EPS = 1e-7


class Tensor:
    """An n-d array of real scalars with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: GradTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Records operations in execution order and replays them backwards.

    A tape is single-use: call :meth:`reset` before reusing it after
    :meth:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def reset(self):
        for node in self.nodes:
            node.out._tape = None
        self.nodes = []
        self._consumed = False

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t._tape is self

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward):
        if self._consumed:
            raise UsageError("tape already consumed by backward(); call reset() first")
        out._tape = self
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None):
        """Back-propagate from a scalar ``loss``.

        Sets ``.grad`` on every leaf that requires a gradient and appears on
        the tape (zeros when it has no path to ``loss``).  When ``wrt`` is
        given, returns their gradients in order, zeros for tensors the tape
        never saw.
        """
        if self._consumed:
            raise UsageError("backward() called twice on the same tape without reset()")
        if loss.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self and not loss.requires_grad:
            raise UsageError("loss was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad and loss._tape is not self:
            leaves[id(loss)] = loss

        for node in reversed(self.nodes):
            for inp in node.inputs:
                if inp.requires_grad and inp._tape is not self:
                    leaves.setdefault(id(inp), inp)
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not self._tracks(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = (
                np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            )

        if wrt is None:
            return None
        out = []
        for t in wrt:
            if id(t) in leaves:
                out.append(t.grad)
            else:
                out.append(np.zeros_like(t.data))
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(tape._tracks(t) for t in inputs):
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise arithmetic -------------------------------------------------


def _operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const_like(b, a)
    if isinstance(b, Tensor):
        return _const_like(a, b), b
    return Tensor(a), Tensor(b)


def add(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), backward)


# --- shape and reductions ---------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return _emit(x.data.reshape(shape), (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")

    def backward(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(tensors)))

    return _emit(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


# --- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _emit(a.data @ b.data, (a, b), backward)


def _parse_einsum(spec: str, n_operands: int) -> tuple[list[str], str]:
    if "->" not in spec or "." in spec:
        raise UsageError(f"einsum spec must be explicit and ellipsis-free: {spec!r}")
    lhs, out = spec.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != n_operands:
        raise UsageError(f"einsum spec {spec!r} names {len(ins)} operands, got {n_operands}")
    for sub_ in ins:
        if len(set(sub_)) != len(sub_):
            raise UsageError(f"repeated index within one operand is unsupported: {spec!r}")
    return ins, out


def einsum(spec: str, *operands: Tensor) -> Tensor:
    """Differentiable ``np.einsum`` restricted to explicit, diagonal-free specs."""
    operands = tuple(_as_tensor(t) for t in operands)
    ins, out = _parse_einsum(spec, len(operands))
    for sub_, t in zip(ins, operands):
        if len(sub_) != t.ndim:
            raise DimensionError(f"einsum operand {sub_!r} expects rank {len(sub_)}, got shape {t.shape}")
    data = np.einsum(spec, *(t.data for t in operands))

    def backward(g):
        grads = []
        for k, target in enumerate(ins):
            others = [ins[m] for m in range(len(ins)) if m != k]
            available = set(out).union(*others) if others else set(out)
            reduced = "".join(ch for ch in target if ch in available)
            gspec = ",".join([out] + others) + "->" + reduced
            gk = np.einsum(gspec, g, *(operands[m].data for m in range(len(ins)) if m != k))
            if reduced != target:
                for pos, ch in enumerate(target):
                    if ch not in available:
                        gk = np.expand_dims(gk, pos)
                gk = np.broadcast_to(gk, operands[k].shape).copy()
            grads.append(gk)
        return tuple(grads)

    return _emit(np.asarray(data), operands, backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"dot needs two equal-length vectors, got {a.shape} and {b.shape}")
    return einsum("i,i->", a, b)


# --- nonlinearities ---------------------------------------------------------


def l2_normalize(v: Tensor, eps: float = 1e-6, axis: int = -1) -> Tensor:
    """``v / (||v|| + eps)`` along ``axis``; the zero vector maps to zero."""
    if eps <= 0:
        raise UsageError(f"eps must be positive, got {eps}")
    x = v.data
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    denom = norm + eps
    out = x / denom

    def backward(g):
        safe = np.where(norm > 0, norm, 1.0)
        proj = np.sum(x * g, axis=axis, keepdims=True)
        return (g / denom - x * proj / (safe * denom * denom),)

    return _emit(out, (v,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _emit(y, (x,), backward)


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Capsule nonlinearity ``(|s|^2 / (1 + |s|^2)) * s / |s|``, 0 at s = 0."""
    x = s.data
    n2 = np.sum(x * x, axis=axis, keepdims=True)
    n = np.sqrt(n2)
    # n/(1+n^2) is the combined factor; finite at n = 0
    scale = n / (1.0 + n2)
    out = x * scale

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        dscale_over_n = (1.0 - n2) / ((1.0 + n2) ** 2 * safe)
        proj = np.sum(x * g, axis=axis, keepdims=True)
        return (g * scale + x * dscale_over_n * proj,)

    return _emit(out, (s,), backward)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    pos = z >= 0
    ez = np.exp(np.where(pos, -z, z))
    y = np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez)).astype(z.dtype)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _emit(y, (x,), backward)


def bce_loss(p: Tensor, label, clamp_eps: float = BCE_CLAMP_EPS) -> Tensor:
    """Elementwise binary cross-entropy with ``p`` clamped away from 0 and 1."""
    y = np.asarray(label, dtype=p.dtype)
    if y.shape != p.shape:
        y = np.broadcast_to(y, p.shape)
    pc = np.clip(p.data, clamp_eps, 1.0 - clamp_eps)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    inside = (p.data >= clamp_eps) & (p.data <= 1.0 - clamp_eps)

    def backward(g):
        d = -y / pc + (1.0 - y) / (1.0 - pc)
        return (g * np.where(inside, d, 0.0),)

    return _emit(np.asarray(loss, dtype=p.dtype), (p,), backward)


# --- gradient validation ----------------------------------------------------


def gradient_errors(f: Callable[..., Tensor], xs: Sequence[Tensor], step: float = 1e-3) -> list[float]:
    """Per-input max relative error between tape gradients and central differences.

    ``f(*xs)`` must return a scalar tensor.  Error for one coordinate is
    ``|analytic - central| / max(1, |central|)``.
    """
    xs = list(xs)
    leaves = [Tensor(x.data.copy(), requires_grad=True) for x in xs]
    with GradTape() as tape:
        y = f(*leaves)
    if y.size != 1:
        raise UsageError(f"finite_diff_check needs a scalar function, got shape {y.shape}")
    analytic = tape.backward(y, leaves)

    def evaluate(vals):
        return float(f(*[Tensor(v) for v in vals]).data.reshape(()))

    base = [x.data.copy() for x in xs]
    errors = []
    for k, x0 in enumerate(base):
        worst = 0.0
        flat = x0.reshape(-1)
        ga = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = evaluate(base)
            flat[i] = orig - step
            f_minus = evaluate(base)
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, abs(float(ga[i]) - central) / max(1.0, abs(central)))
        errors.append(worst)
    return errors


def finite_diff_check(f: Callable[..., Tensor], x, step: float = 1e-3) -> float:
    """Max relative gradient error of ``f`` at ``x`` (a tensor or a list of them)."""
    xs = [x] if isinstance(x, Tensor) else list(x)
    return max(gradient_errors(f, xs, step))
