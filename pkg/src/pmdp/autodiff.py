"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every op whose inputs touch a trainable leaf.
Tensors built only from constants are plain values with ``node is None``.

    >>> tape = Tape()
    >>> x = tape.param("x", np.array(3.0))
    >>> grads = backward(tape, mul(x, x))
    >>> float(grads["x"])
    6.0
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class DimensionError(ValueError):
    """Input shapes do not conform for the requested op."""


class NumericError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class ContractError(ValueError):
    """A caller violated an op precondition."""


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered op record plus the named trainable leaves."""

    def __init__(self, track_kinks: bool = False):
        self.parents: list[tuple[int | None, ...]] = []
        self.vjps: list[Callable | None] = []
        self.shapes: list[tuple[int, ...]] = []
        self.leaves: dict[str, int] = {}
        # smallest distance of any relu/abs/max input to its kink (gradient checks only)
        self.track_kinks = track_kinks
        self.kink_margin = float("inf")

    def note_kink(self, distances: np.ndarray) -> None:
        if self.track_kinks and distances.size:
            self.kink_margin = min(self.kink_margin, float(np.abs(distances).min()))

    def __len__(self):
        return len(self.vjps)

    def param(self, name: str, value) -> Tensor:
        """Register a trainable leaf and return its tensor handle."""
        if name in self.leaves:
            raise ContractError(f"leaf {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), self, len(self.vjps))
        self.leaves[name] = t.node
        self.parents.append(())
        self.vjps.append(None)
        self.shapes.append(t.shape)
        return t

    def params(self, values: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.param(k, v) for k, v in values.items()}

    def _record(self, out: np.ndarray, inputs, vjp) -> Tensor:
        node = len(self.vjps)
        self.parents.append(tuple(t.node for t in inputs))
        self.vjps.append(vjp)
        self.shapes.append(out.shape)
        return Tensor(out, self, node)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _kink(a: Tensor, distances: np.ndarray) -> None:
    if a.tape is not None and a.tape.track_kinks:
        a.tape.note_kink(distances)


def _emit(out: np.ndarray, inputs: tuple[Tensor, ...], vjp, kind: str) -> Tensor:
    # NaN/Inf anywhere propagates into the sum
    if not np.isfinite(out.sum()):
        raise NumericError(f"non-finite output from {kind}")
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("inputs recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    return tape._record(out, inputs, vjp)


# ---------------------------------------------------------------- ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g), "matmul")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0)


def _check_binary(a: Tensor, b: Tensor, kind: str, allow_bias: bool):
    if a.shape == b.shape:
        return
    # bias-add: (N, d) with (d,)
    if allow_bias and a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    raise DimensionError(f"{kind} {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add", True)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (g, _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub", True)
    sb = b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (g, -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "elemwise_mul", False)
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (g * B, g * A), "elemwise_mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    _kink(a, a.data)
    mask = a.data > 0.0
    return _emit(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    _kink(a, a.data)
    factor = np.where(a.data > 0.0, 1.0, slope)
    return _emit(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def max_scalar(a, c: float) -> Tensor:
    """Elementwise max(a, c); ties send no gradient to ``a``."""
    a = as_tensor(a)
    _kink(a, a.data - c)
    mask = a.data > c
    return _emit(np.where(mask, a.data, c), (a,), lambda g: (g * mask,), "max_scalar")


def square(a) -> Tensor:
    a = as_tensor(a)
    A = a.data
    return _emit(A * A, (a,), lambda g: (2.0 * g * A,), "square")


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _emit(np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape),), "sum")
    out = a.data.sum(axis=axis)
    return _emit(out, (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),), "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def l1_norm(a) -> Tensor:
    """Sum of absolute values; subgradient 0 at exactly 0."""
    a = as_tensor(a)
    _kink(a, a.data)
    sign = np.sign(a.data)
    return _emit(np.asarray(np.abs(a.data).sum()), (a,), lambda g: (g * sign,), "l1_norm")


def sq_l2_norm(a) -> Tensor:
    a = as_tensor(a)
    A = a.data
    return _emit(np.asarray((A * A).sum()), (a,), lambda g: (2.0 * g * A,), "sq_l2_norm")


def row_norms(a) -> Tensor:
    """Euclidean norm of each row of an (N, d) tensor; gradient 0 at a zero row."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"row_norms expects 2-D input, got {a.shape}")
    A = a.data
    n = np.sqrt((A * A).sum(axis=1))
    safe = np.where(n > 0.0, n, 1.0)

    def vjp(g):
        return ((g / safe)[:, None] * A * (n > 0.0)[:, None],)

    return _emit(n, (a,), vjp, "row_norms")


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    A = a.data if a.data.ndim == 2 else a.data[None, :]
    e = np.exp(A - A.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    if a.data.ndim == 1:
        p = p[0]

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (a,), vjp, "softmax_rows")


def concat_rows(parts) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows widths differ: {sorted(widths)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=0)

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit(out, parts, vjp, "concat_rows")


def rows(a, start: int, stop: int) -> Tensor:
    """Row slice ``a[start:stop]``."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _emit(a.data[start:stop], (a,), vjp, "rows")


def columns(a, j: int) -> Tensor:
    """Column ``a[:, j]`` of a 2-D tensor."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, j] = g
        return (full,)

    return _emit(a.data[:, j], (a,), vjp, "columns")


def stack_columns(cols) -> Tensor:
    cols = tuple(as_tensor(c) for c in cols)
    out = np.stack([c.data for c in cols], axis=1)
    return _emit(out, cols, lambda g: tuple(g[:, i] for i in range(len(cols))), "stack_columns")


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elemwise_mul": mul,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sum": sum,
    "mean": mean,
    "l1_norm": l1_norm,
    "sq_l2_norm": sq_l2_norm,
    "softmax_rows": softmax_rows,
    "scale": scale,
    "max_scalar": max_scalar,
    "square": square,
    "row_norms": row_norms,
    "concat_rows": concat_rows,
    "rows": rows,
    "columns": columns,
    "stack_columns": stack_columns,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name, e.g. ``forward_op("relu", x)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. every leaf on ``tape``.

    Leaves the loss does not depend on get zero arrays.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.vjps)
    if loss.node is not None:
        if loss.tape is not tape:
            raise ContractError("loss was recorded on a different tape")
        grads[loss.node] = np.ones(())
        for node in range(loss.node, -1, -1):
            g = grads[node]
            vjp = tape.vjps[node]
            if g is None or vjp is None:
                continue
            for parent, pg in zip(tape.parents[node], vjp(g)):
                if parent is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = np.array(pg, dtype=np.float64)
                else:
                    grads[parent] = grads[parent] + pg
    out = {}
    for name, node in tape.leaves.items():
        g = grads[node]
        out[name] = np.zeros(tape.shapes[node]) if g is None else np.asarray(g).reshape(tape.shapes[node])
    return out


def value_and_grad(fn: Callable[[dict[str, Tensor]], Tensor],
                   params: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    loss = fn(tape.params(params))
    return loss.item(), backward(tape, loss)


def finite_diff_check(scalar_fn: Callable[[dict[str, Tensor]], Tensor],
                      params: Mapping[str, np.ndarray], h: float = 1e-5,
                      noise_floor: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    Coordinates whose absolute disagreement is within the rounding noise of
    the difference quotient (``16 * eps * max(1, |f|) / h``) count as exact;
    otherwise exactly-zero gradients would be compared against pure noise.
    ``noise_floor=False`` applies the bare relative error everywhere.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            f0, analytic = value_and_grad(scalar_fn, params)
    except NumericError:
        return float("inf")

    def f(p):
        with np.errstate(over="ignore", invalid="ignore"):
            return scalar_fn({k: Tensor(v) for k, v in p.items()}).item()

    noise = 16.0 * np.finfo(np.float64).eps * max(1.0, abs(float(f0))) / h if noise_floor else -1.0
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            try:
                flat[idx] = orig + h
                fp = f(params)
                flat[idx] = orig - h
                fm = f(params)
            except NumericError:
                return float("inf")
            finally:
                flat[idx] = orig
            n = (fp - fm) / (2.0 * h)
            a = analytic[name].reshape(-1)[idx]
            if not (np.isfinite(n) and np.isfinite(a)):
                return float("inf")
            if abs(a - n) > noise:
                worst = max(worst, abs(a - n) / max(1e-8, abs(a) + abs(n)))
    return worst


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 5e-4
    b1: float = 0.9
    b2: float = 0.99
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new params; ``state`` is advanced in place."""
    if state.t < 0:
        raise ContractError("Adam step counter must be non-negative")
    state.t += 1
    c1 = 1.0 - state.b1 ** state.t
    c2 = 1.0 - state.b2 ** state.t
    new = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"grad for {name}: {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.b1 * m + (1.0 - state.b1) * g
        v = state.b2 * v + (1.0 - state.b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        new[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new, state
