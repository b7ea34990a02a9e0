"""Dense float64 tensors with a tape-based reverse-mode autodiff.

A :class:`Tensor` is an immutable value.  A :class:`Tape` records the
operations applied to tensors that live on it, and :meth:`Tape.backward`
walks the recorded nodes in reverse to produce gradients for every leaf.

Example::

    tape = Tape()
    x = tape.leaf(np.array([3.0]))
    y = tape.sum(tape.mul(x, x))
    grads = tape.backward(y)
    grads[x.node]          # Tensor([6.])
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "Tape",
    "PRIMITIVES",
    "grad_check",
    "make_streams",
    "rng_normal",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced or supplied."""


class Tensor:
    """Immutable row-major float64 array, optionally bound to a tape node."""

    __slots__ = ("_data", "tape", "node")

    def __init__(self, data, *, tape: "Tape | None" = None, node: int | None = None, _trusted=False):
        if _trusted:
            arr = data
        else:
            arr = np.array(data, dtype=np.float64, order="C", copy=True)
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self._data = arr
        self.tape = tape
        self.node = node

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying values."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __repr__(self):
        where = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    def __array__(self, dtype=None, copy=None):
        return self._data if dtype is None else self._data.astype(dtype)


# --------------------------------------------------------------------------
# primitives: forward(values, attrs) -> (out, saved); backward(g, values, out, saved, attrs) -> grads


def _need_2d(kind, *arrays):
    for a in arrays:
        if a.ndim != 2:
            raise ShapeError(f"{kind}: expected 2-D operands, got shapes {[x.shape for x in arrays]}")


def _fw_matmul(v, a):
    x, w = v
    _need_2d("matmul", x, w)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {x.shape} @ {w.shape}")
    return x @ w, None


def _bw_matmul(g, v, out, saved, a):
    x, w = v
    return [g @ w.T, x.T @ g]


def _fw_add(v, a):
    x, y = v
    if x.shape == y.shape:
        return x + y, None
    # bias-add: trailing-axis vector onto a matrix
    if y.ndim == 1 and x.ndim == 2 and x.shape[1] == y.shape[0]:
        return x + y, None
    raise ShapeError(f"add: shapes {x.shape} and {y.shape} do not conform (only bias-add broadcasting)")


def _bw_add(g, v, out, saved, a):
    x, y = v
    gy = g if y.shape == g.shape else g.sum(axis=0)
    return [g, gy]


def _fw_mul(v, a):
    x, y = v
    if x.shape != y.shape:
        raise ShapeError(f"mul: shapes {x.shape} and {y.shape} differ")
    return x * y, None


def _bw_mul(g, v, out, saved, a):
    x, y = v
    return [g * y, g * x]


def _fw_relu(v, a):
    return np.maximum(v[0], 0.0), None


def _bw_relu(g, v, out, saved, a):
    return [g * (v[0] > 0)]


def _fw_tanh(v, a):
    return np.tanh(v[0]), None


def _bw_tanh(g, v, out, saved, a):
    return [g * (1.0 - out * out)]


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _fw_sigmoid(v, a):
    return _sigmoid(v[0]), None


def _bw_sigmoid(g, v, out, saved, a):
    return [g * out * (1.0 - out)]


def _log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _fw_softmax(v, a):
    z = v[0] - v[0].max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), None


def _bw_softmax(g, v, out, saved, a):
    return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


def _fw_log_softmax(v, a):
    return _log_softmax(v[0]), None


def _bw_log_softmax(g, v, out, saved, a):
    s = np.exp(out)
    return [g - s * g.sum(axis=-1, keepdims=True)]


def _fw_mse(v, a):
    x, y = v
    if x.shape != y.shape:
        raise ShapeError(f"mse: shapes {x.shape} and {y.shape} differ")
    d = x - y
    return np.array(np.mean(d * d)), d


def _bw_mse(g, v, out, d, a):
    gx = (2.0 / d.size) * g * d
    return [gx, -gx]


def _fw_cross_entropy(v, a):
    logits, target = v
    if logits.shape != target.shape or logits.ndim != 2:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} and target distribution {target.shape} must be equal 2-D shapes"
        )
    ls = _log_softmax(logits)
    return np.array(-(target * ls).sum() / logits.shape[0]), ls


def _bw_cross_entropy(g, v, out, ls, a):
    logits, target = v
    n = logits.shape[0]
    s = np.exp(ls)
    gl = (s * target.sum(axis=1, keepdims=True) - target) * (g / n)
    gt = -ls * (g / n)
    return [gl, gt]


def _fw_sum(v, a):
    return np.array(v[0].sum()), None


def _bw_sum(g, v, out, saved, a):
    return [np.full(v[0].shape, np.asarray(g).item())]


def _fw_scale(v, a):
    return v[0] * a["factor"], None


def _bw_scale(g, v, out, saved, a):
    return [g * a["factor"]]


def _fw_concat(v, a):
    axis = a.get("axis", -1)
    try:
        return np.concatenate(v, axis=axis), None
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[x.shape for x in v]} along axis {axis}: {exc}") from None


def _bw_concat(g, v, out, saved, a):
    axis = a.get("axis", -1)
    bounds = np.cumsum([x.shape[axis] for x in v])[:-1]
    return np.split(g, bounds, axis=axis)


def _fw_slice(v, a):
    x = v[0]
    axis, start, stop = a.get("axis", -1), a["start"], a["stop"]
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis of length {n} in shape {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return x[tuple(idx)].copy(), tuple(idx)


def _bw_slice(g, v, out, idx, a):
    gx = np.zeros_like(v[0])
    gx[idx] = g
    return [gx]


@dataclass(frozen=True)
class _Primitive:
    arity: int | None  # None: variadic
    forward: Callable
    backward: Callable


PRIMITIVES: dict[str, _Primitive] = {
    "matmul": _Primitive(2, _fw_matmul, _bw_matmul),
    "add": _Primitive(2, _fw_add, _bw_add),
    "mul": _Primitive(2, _fw_mul, _bw_mul),
    "relu": _Primitive(1, _fw_relu, _bw_relu),
    "tanh": _Primitive(1, _fw_tanh, _bw_tanh),
    "sigmoid": _Primitive(1, _fw_sigmoid, _bw_sigmoid),
    "softmax": _Primitive(1, _fw_softmax, _bw_softmax),
    "log_softmax": _Primitive(1, _fw_log_softmax, _bw_log_softmax),
    "mse": _Primitive(2, _fw_mse, _bw_mse),
    "cross_entropy": _Primitive(2, _fw_cross_entropy, _bw_cross_entropy),
    "sum": _Primitive(1, _fw_sum, _bw_sum),
    "scale": _Primitive(1, _fw_scale, _bw_scale),
    "concat": _Primitive(None, _fw_concat, _bw_concat),
    "slice": _Primitive(1, _fw_slice, _bw_slice),
}


@dataclass
class _Node:
    kind: str  # primitive name, "leaf" or "const"
    inputs: tuple[int, ...]
    value: np.ndarray
    saved: object = None
    attrs: dict = field(default_factory=dict)
    needs_grad: bool = False


class Tape:
    """Single-owner record of operations for one backward pass.

    Leaves created with :meth:`leaf` receive gradients; values created with
    :meth:`constant` (or plain tensors/arrays passed to an op) do not.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, node: _Node) -> Tensor:
        self.nodes.append(node)
        return Tensor(node.value, tape=self, node=len(self.nodes) - 1, _trusted=True)

    def leaf(self, value) -> Tensor:
        # Tensor data is already validated and read-only, so it is shared
        arr = value.data if isinstance(value, Tensor) else Tensor(value).data
        return self._push(_Node("leaf", (), arr, needs_grad=True))

    def constant(self, value) -> Tensor:
        arr = value.data if isinstance(value, Tensor) else Tensor(value).data
        return self._push(_Node("const", (), arr))

    def _lift(self, x) -> Tensor:
        if isinstance(x, Tensor) and x.tape is self:
            return x
        if isinstance(x, Tensor) and x.tape is not None:
            raise ValueError("tensor belongs to a different tape")
        return self.constant(x)

    def apply(self, kind: str, *inputs, **attrs) -> Tensor:
        """Record primitive ``kind`` applied to ``inputs``."""
        prim = PRIMITIVES.get(kind)
        if prim is None:
            raise ValueError(f"unknown primitive {kind!r}; expected one of {sorted(PRIMITIVES)}")
        if prim.arity is not None and len(inputs) != prim.arity:
            raise ValueError(f"{kind} takes {prim.arity} inputs, got {len(inputs)}")
        if not inputs:
            raise ValueError(f"{kind} needs at least one input")
        ts = [self._lift(x) for x in inputs]
        values = [self.nodes[t.node].value for t in ts]
        with np.errstate(over="ignore", invalid="ignore"):
            out, saved = prim.forward(values, attrs)
        out = np.ascontiguousarray(out, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{kind} produced NaN/Inf from inputs of shapes {[x.shape for x in values]}")
        needs = any(self.nodes[t.node].needs_grad for t in ts)
        return self._push(_Node(kind, tuple(t.node for t in ts), out, saved, attrs, needs))

    # thin named wrappers, one per primitive
    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def relu(self, a):
        return self.apply("relu", a)

    def tanh(self, a):
        return self.apply("tanh", a)

    def sigmoid(self, a):
        return self.apply("sigmoid", a)

    def softmax(self, a):
        return self.apply("softmax", a)

    def log_softmax(self, a):
        return self.apply("log_softmax", a)

    def mse(self, a, b):
        return self.apply("mse", a, b)

    def cross_entropy(self, logits, target):
        return self.apply("cross_entropy", logits, target)

    def sum(self, a):
        return self.apply("sum", a)

    def scale(self, a, factor: float):
        return self.apply("scale", a, factor=float(factor))

    def concat(self, tensors: Sequence, axis: int = -1):
        return self.apply("concat", *tensors, axis=axis)

    def slice(self, a, start: int, stop: int, axis: int = -1):
        return self.apply("slice", a, start=start, stop=stop, axis=axis)

    def sub(self, a, b):
        return self.add(a, self.scale(b, -1.0))

    def backward(self, output: Tensor) -> dict[int, Tensor]:
        """Gradients of scalar ``output`` for every leaf on this tape.

        Leaves that ``output`` does not depend on get a zero gradient.
        """
        if output.tape is not self:
            raise ValueError("output is not on this tape")
        if output.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {output.node: np.ones_like(self.nodes[output.node].value)}
        for i in range(output.node, -1, -1):
            node = self.nodes[i]
            g = grads.pop(i, None) if node.kind not in ("leaf", "const") else grads.get(i)
            if g is None or not node.needs_grad or node.kind == "leaf":
                continue
            values = [self.nodes[j].value for j in node.inputs]
            in_grads = PRIMITIVES[node.kind].backward(g, values, node.value, node.saved, node.attrs)
            for j, gj in zip(node.inputs, in_grads):
                if not self.nodes[j].needs_grad:
                    continue
                if j in grads:
                    grads[j] = grads[j] + gj
                else:
                    grads[j] = gj
        out = {}
        for i, node in enumerate(self.nodes):
            if node.kind == "leaf":
                g = grads.get(i)
                out[i] = Tensor(np.zeros_like(node.value) if g is None else g)
        return out


def grad_check(f: Callable[[Tape, Tensor], Tensor], x, fd_step: float = 1e-6) -> float:
    """Largest relative disagreement between autodiff and central differences.

    ``f(tape, x)`` must build a scalar on ``tape`` from leaf ``x``.  The
    per-coordinate error is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(x0)
    analytic = tape.backward(f(tape, xt))[xt.node].data.reshape(-1)

    def value(arr):
        t = Tape()
        return f(t, t.leaf(arr)).item()

    flat = x0.reshape(-1)
    worst = 0.0
    for k in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[k] += fd_step
        dn[k] -= fd_step
        numeric = (value(up.reshape(x0.shape)) - value(dn.reshape(x0.shape))) / (2.0 * fd_step)
        worst = max(worst, abs(analytic[k] - numeric) / max(1.0, abs(numeric)))
    return worst


def make_streams(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` independent generators spawned from one seed."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def rng_normal(shape, mean: float, sigma: float, rng) -> Tensor:
    """Gaussian draw; deterministic in the state of ``rng``.

    ``rng`` is a Generator or a sequence of Generators, one per leading row.
    Draws are always consumed, so ``sigma = 0`` keeps streams aligned with
    runs that use noise.
    """
    return Tensor(normal_array(shape, mean, sigma, rng), _trusted=False)


def normal_array(shape, mean: float, sigma: float, rng) -> np.ndarray:
    if not sigma >= 0 or math.isinf(sigma):
        raise ValueError(f"sigma must be finite and non-negative, got {sigma}")
    shape = tuple(shape)
    if isinstance(rng, np.random.Generator):
        z = rng.standard_normal(shape)
    else:
        rngs = list(rng)
        if not shape or len(rngs) != shape[0]:
            raise ShapeError(f"{len(rngs)} streams for leading dimension of shape {shape}")
        z = np.stack([r.standard_normal(shape[1:]) for r in rngs])
    return mean + sigma * z
