"""Minimal reverse-mode differentiable tensor engine.

Dense float64 arrays with a recorded computation graph. Only the operations
the rest of the package needs are provided; backward() walks the graph in
reverse topological order and is bit-deterministic in serial mode.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DiffTensor",
    "ShapeError",
    "no_grad",
    "constant",
    "leaf",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "exp",
    "log",
    "relu",
    "gelu",
    "square",
    "scale",
    "clip",
    "minimum",
    "softmax",
    "sum",
    "mean",
    "gather_rows",
    "concat_rows",
    "transpose",
    "reshape",
    "op_forward",
    "backward",
    "finite_difference_check",
    "ParamStore",
    "adamw_step",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operands are incompatible with the requested op."""


def _fail(kind: str, detail: str, *shapes: tuple) -> None:
    named = ", ".join(str(s) for s in shapes)
    raise ShapeError(f"{kind}: {detail} (operand shapes: {named})")


class DiffTensor:
    """A dense float64 array that can participate in reverse-mode autodiff.

    `grad` is populated on requires_grad leaves by `backward`; repeated
    backward calls accumulate until the grad is explicitly zeroed.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(
        self,
        values: np.ndarray,
        requires_grad: bool = False,
        _parents: tuple = (),
        _vjp: Optional[Callable[[np.ndarray], tuple]] = None,
        _op: str = "leaf",
    ):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.values.reshape(()))

    def detach(self) -> "DiffTensor":
        """A constant copy, disconnected from the graph."""
        return DiffTensor(self.values.copy())

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; everything routes through the op functions below.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)


def constant(values) -> DiffTensor:
    """Wrap raw values as a graph constant."""
    return DiffTensor(np.asarray(values, dtype=np.float64))


def leaf(values, requires_grad: bool = True) -> DiffTensor:
    """Wrap raw values as a differentiable leaf."""
    return DiffTensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


def _wrap(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else constant(x)


_GRAD_ENABLED = True


class no_grad:
    """Context manager that suppresses graph recording (serial mode only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _node(values, parents, vjp, op) -> DiffTensor:
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                return DiffTensor(values, requires_grad=True, _parents=tuple(parents), _vjp=vjp, _op=op)
    # Constants need no graph linkage; keeps no-grad forwards cheap.
    return DiffTensor(values, _op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(kind: str, a: DiffTensor, b: DiffTensor) -> None:
    if a.values.shape == b.values.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        _fail(kind, "shapes are not broadcast-compatible", a.shape, b.shape)


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    out = a.values + b.values

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), vjp, "add")


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)
    out = a.values - b.values

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), vjp, "sub")


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)
    out = a.values * b.values

    def vjp(g):
        return (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        )

    return _node(out, (a, b), vjp, "mul")


def div(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a, b)
    out = a.values / b.values

    def vjp(g):
        return (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * a.values / (b.values * b.values), b.shape),
        )

    return _node(out, (a, b), vjp, "div")


def exp(a: DiffTensor) -> DiffTensor:
    a = _wrap(a)
    out = np.exp(a.values)

    def vjp(g):
        return (g * out,)

    return _node(out, (a,), vjp, "exp")


def log(a: DiffTensor) -> DiffTensor:
    a = _wrap(a)
    out = np.log(a.values)

    def vjp(g):
        return (g / a.values,)

    return _node(out, (a,), vjp, "log")


def relu(a: DiffTensor) -> DiffTensor:
    a = _wrap(a)
    out = np.maximum(a.values, 0.0)

    def vjp(g):
        return (g * (a.values > 0.0),)

    return _node(out, (a,), vjp, "relu")


def gelu(a: DiffTensor) -> DiffTensor:
    """Exact erf-based GELU."""
    a = _wrap(a)
    x = a.values
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node(out, (a,), vjp, "gelu")


def square(a: DiffTensor) -> DiffTensor:
    a = _wrap(a)
    out = a.values * a.values

    def vjp(g):
        return (g * 2.0 * a.values,)

    return _node(out, (a,), vjp, "square")


def scale(a: DiffTensor, c: float) -> DiffTensor:
    a = _wrap(a)
    c = float(c)
    out = a.values * c

    def vjp(g):
        return (g * c,)

    return _node(out, (a,), vjp, "scale")


def clip(a: DiffTensor, lo: float, hi: float) -> DiffTensor:
    """Clamp to [lo, hi]; gradient passes through inside, zero outside."""
    a = _wrap(a)
    lo, hi = float(lo), float(hi)
    if not lo <= hi:
        raise ValueError(f"clip: lo={lo} must not exceed hi={hi}")
    out = np.clip(a.values, lo, hi)

    def vjp(g):
        inside = (a.values >= lo) & (a.values <= hi)
        return (g * inside,)

    return _node(out, (a,), vjp, "clip")


def minimum(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Elementwise min; at ties the gradient routes to the first operand."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("min", a, b)
    take_a = a.values <= b.values
    out = np.where(take_a, a.values, b.values)

    def vjp(g):
        return (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        )

    return _node(out, (a, b), vjp, "min")


# ---------------------------------------------------------------------------
# Reductions and normalizations
# ---------------------------------------------------------------------------

def softmax(a: DiffTensor, axis: int) -> DiffTensor:
    """Numerically stable softmax along `axis` (max subtraction)."""
    a = _wrap(a)
    if a.values.ndim == 0:
        _fail("softmax", "cannot softmax a 0-d tensor", a.shape)
    axis = _norm_axis("softmax", axis, a.values.ndim)
    if a.shape[axis] == 0:
        _fail("softmax", f"axis {axis} is empty", a.shape)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), vjp, "softmax")


def _norm_axis(kind: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        _fail(kind, f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(a: DiffTensor, axis: Optional[int] = None, keepdims: bool = False) -> DiffTensor:
    a = _wrap(a)
    if axis is not None:
        axis = _norm_axis("sum", axis, max(a.values.ndim, 1))
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def mean(a: DiffTensor, axis: Optional[int] = None, keepdims: bool = False) -> DiffTensor:
    a = _wrap(a)
    if axis is not None:
        axis = _norm_axis("mean", axis, max(a.values.ndim, 1))
    n = a.values.size if axis is None else a.shape[axis]
    if n == 0:
        _fail("mean", "cannot average over an empty axis", a.shape)
    out = a.values.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return _node(out, (a,), vjp, "mean")


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------

def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Matrix product over the last two axes; leading batch axes must match."""
    a, b = _wrap(a), _wrap(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        _fail("matmul", "operands must have rank >= 2", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        _fail("matmul", "inner dimensions disagree", a.shape, b.shape)
    if a.shape[:-2] != b.shape[:-2]:
        _fail("matmul", "batch dimensions disagree", a.shape, b.shape)
    out = np.matmul(a.values, b.values)

    def vjp(g):
        return (
            np.matmul(g, np.swapaxes(b.values, -1, -2)),
            np.matmul(np.swapaxes(a.values, -1, -2), g),
        )

    return _node(out, (a, b), vjp, "matmul")


def gather_rows(a: DiffTensor, indices: Sequence[int]) -> DiffTensor:
    """Select rows (axis 0) by index; duplicates allowed."""
    a = _wrap(a)
    if a.values.ndim == 0:
        _fail("gather-rows", "cannot gather from a 0-d tensor", a.shape)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        _fail("gather-rows", f"indices must be 1-d, got shape {idx.shape}", a.shape)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        _fail("gather-rows", f"index out of range for {n} rows", a.shape)
    out = a.values[idx]

    def vjp(g):
        acc = np.zeros_like(a.values)
        np.add.at(acc, idx, g)
        return (acc,)

    return _node(out, (a,), vjp, "gather-rows")


def concat_rows(parts: Iterable[DiffTensor]) -> DiffTensor:
    """Concatenate along axis 0."""
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat-rows: need at least one operand")
    trailing = {p.shape[1:] for p in parts}
    if len(trailing) != 1:
        _fail("concat-rows", "trailing dimensions disagree", *[p.shape for p in parts])
    out = np.concatenate([p.values for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _node(out, tuple(parts), vjp, "concat-rows")


def transpose(a: DiffTensor, axes: Optional[Sequence[int]] = None) -> DiffTensor:
    """Permute axes (default: reverse them)."""
    a = _wrap(a)
    ndim = a.values.ndim
    if axes is None:
        axes = tuple(range(ndim - 1, -1, -1))
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(ndim)):
        _fail("transpose", f"axes {axes} is not a permutation of rank {ndim}", a.shape)
    out = np.transpose(a.values, axes)
    inverse = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _node(out, (a,), vjp, "transpose")


def reshape(a: DiffTensor, shape: Sequence[int]) -> DiffTensor:
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        _fail("reshape", f"cannot reshape to {shape}", a.shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), vjp, "reshape")


# ---------------------------------------------------------------------------
# Generic dispatch
# ---------------------------------------------------------------------------

_KIND_TABLE = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "sub": lambda inputs, attrs: sub(*inputs),
    "div": lambda inputs, attrs: div(*inputs),
    "exp": lambda inputs, attrs: exp(*inputs),
    "log": lambda inputs, attrs: log(*inputs),
    "relu": lambda inputs, attrs: relu(*inputs),
    "gelu": lambda inputs, attrs: gelu(*inputs),
    "softmax-over-axis": lambda inputs, attrs: softmax(inputs[0], attrs["axis"]),
    "mean-over-axis": lambda inputs, attrs: mean(
        inputs[0], attrs.get("axis"), attrs.get("keepdims", False)
    ),
    "sum-over-axis": lambda inputs, attrs: sum(
        inputs[0], attrs.get("axis"), attrs.get("keepdims", False)
    ),
    "gather-rows": lambda inputs, attrs: gather_rows(inputs[0], attrs["indices"]),
    "concat-rows": lambda inputs, attrs: concat_rows(inputs),
    "transpose": lambda inputs, attrs: transpose(inputs[0], attrs.get("axes")),
    "reshape": lambda inputs, attrs: reshape(inputs[0], attrs["shape"]),
    "scale": lambda inputs, attrs: scale(inputs[0], attrs["factor"]),
    "clip": lambda inputs, attrs: clip(inputs[0], attrs["lo"], attrs["hi"]),
    "min": lambda inputs, attrs: minimum(*inputs),
    "square": lambda inputs, attrs: square(*inputs),
}


def op_forward(kind: str, inputs: Sequence[DiffTensor], attrs: Optional[dict] = None) -> DiffTensor:
    """Apply an op by kind name; see `_KIND_TABLE` for the supported set."""
    if kind not in _KIND_TABLE:
        raise ValueError(f"unknown op kind {kind!r}")
    return _KIND_TABLE[kind](list(inputs), attrs or {})


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topo_order(output: DiffTensor) -> list:
    """Deterministic reverse-postorder of the graph reachable from `output`."""
    order: list = []
    seen: set = set()
    stack: list = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        # Reversed so parents are expanded left-to-right, keeping the
        # accumulation order stable across runs.
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def graph_nodes(output: DiffTensor) -> list:
    """All graph nodes reachable from `output`, for audits and diagnostics."""
    return _topo_order(output)


def backward(output: DiffTensor) -> None:
    """Populate grads of all requires_grad leaves reachable from `output`.

    Grads on leaves accumulate across calls; use ParamStore.zero_grad (or
    set .grad = None) between optimization steps.
    """
    if output.values.size != 1:
        raise ShapeError(
            f"backward: output must be scalar, got shape {output.shape}"
        )
    if not output.requires_grad:
        return
    order = _topo_order(output)
    acc: dict = {id(output): np.ones_like(output.values)}
    for node in reversed(order):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            # requires_grad leaf: stash the accumulated gradient.
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            prev = acc.get(id(parent))
            acc[id(parent)] = np.asarray(pg, dtype=np.float64) if prev is None else prev + pg


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

def finite_difference_check(
    f: Callable[[DiffTensor], DiffTensor],
    x: DiffTensor,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map a tensor to a scalar and be deterministic. Relative error
    per coordinate is |analytic - numeric| / max(1e-8, |numeric|).
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    probe = leaf(x.values.copy())
    out = f(probe)
    if out.values.size != 1:
        raise ShapeError(f"finite_difference_check: f returned shape {out.shape}")
    backward(out)
    analytic = np.zeros_like(probe.values) if probe.grad is None else probe.grad

    base = x.values.copy()
    flat = base.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(constant(base)).item()
        flat[i] = orig - step
        lo = f(constant(base)).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * step)
        if not (np.isfinite(numeric[i]) and np.isfinite(analytic.reshape(-1)[i])):
            raise FloatingPointError(
                f"finite_difference_check: non-finite gradient at coordinate {i}"
            )
    numeric = numeric.reshape(base.shape)
    denom = np.maximum(1e-8, np.abs(numeric))
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0


# ---------------------------------------------------------------------------
# Parameters and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter map with per-parameter AdamW state."""

    def __init__(self):
        self._params: dict[str, DiffTensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._step: dict[str, int] = {}

    def add(self, name: str, values) -> DiffTensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        if isinstance(values, DiffTensor):
            p = values
            p.requires_grad = True
        else:
            p = leaf(values)
        self._params[name] = p
        self._m[name] = np.zeros_like(p.values)
        self._v[name] = np.zeros_like(p.values)
        self._step[name] = 0
        return p

    def __getitem__(self, name: str) -> DiffTensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def n_values(self) -> int:
        total = 0
        for p in self._params.values():
            total += p.values.size
        return total

    def state(self, name: str) -> tuple[np.ndarray, np.ndarray, int]:
        return self._m[name], self._v[name], self._step[name]

    def set_state(self, name: str, m: np.ndarray, v: np.ndarray, step: int) -> None:
        p = self._params[name]
        if m.shape != p.values.shape or v.shape != p.values.shape:
            raise ValueError(f"optimizer state shape mismatch for {name!r}")
        self._m[name] = m.astype(np.float64)
        self._v[name] = v.astype(np.float64)
        self._step[name] = int(step)

    def checksum(self) -> str:
        """Hex digest over parameter bytes, stable across runs."""
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._params[name].values).tobytes())
        return h.hexdigest()


def adamw_step(
    params: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay adaptive update over every parameter."""
    b1, b2 = betas
    for name, p in params.items():
        if p.grad is None:
            raise RuntimeError(f"adamw_step: parameter {name!r} has no gradient")
        g = p.grad
        t = params._step[name] + 1
        params._step[name] = t
        m = params._m[name]
        v = params._v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        if weight_decay:
            p.values *= 1.0 - lr * weight_decay
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
