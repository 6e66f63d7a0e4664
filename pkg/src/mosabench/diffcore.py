"""Small reverse-mode differentiation engine on float64 numpy arrays.

Only the handful of operations the forecasting model needs are provided.
Every op records a closure on the output node; :func:`backward` walks the
tape in reverse topological order and accumulates gradients (sum over uses).
Parameters that are not trainable never receive gradients and are never
written by the optimizer.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block (evaluation only). Not thread-safe."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A node on the tape. ``data`` is a C-contiguous float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward=None, op: str = "const"):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self.requires_grad = _grad_enabled and any(p.requires_grad for p in self._parents)
        if not self.requires_grad:
            self._parents = ()
        self._backward = backward if self.requires_grad else None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    # a few operators so model code reads naturally
    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """A named leaf. Gradients accumulate into ``grad`` when trainable."""

    __slots__ = ("name",)

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(np.array(value, dtype=np.float64), op="param")
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(node: Tensor, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad += g


# ---------------------------------------------------------------------------
# operations


def apply_linear(W: Tensor, b: Tensor | None, h: Tensor) -> Tensor:
    """``h @ W.T + b`` over the last axis of ``h`` (any leading batch dims)."""
    h = as_tensor(h)
    if W.data.ndim != 2:
        raise ShapeError(f"weight must be 2-D, got shape {W.shape}")
    d_out, d_in = W.shape
    if h.shape[-1] != d_in:
        raise ShapeError(
            f"linear: input has {h.shape[-1]} features (shape {h.shape}), weight expects {d_in} (shape {W.shape})"
        )
    if b is not None and b.shape != (d_out,):
        raise ShapeError(f"linear: bias shape {b.shape} does not match d_out={d_out}")
    out = h.data @ W.data.T
    if b is not None:
        out = out + b.data
    parents = (W, h) if b is None else (W, b, h)

    def backward(g: np.ndarray) -> None:
        h2 = h.data.reshape(-1, d_in)
        g2 = g.reshape(-1, d_out)
        if W.requires_grad:
            _accum(W, g2.T @ h2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if h.requires_grad:
            _accum(h, g @ W.data)

    return Tensor(out, parents, backward, "linear")


def apply_relu(h: Tensor) -> Tensor:
    mask = h.data > 0.0
    out = np.where(mask, h.data, 0.0)

    def backward(g):
        _accum(h, g * mask)

    return Tensor(out, (h,), backward, "relu")


def apply_layernorm(gamma: Tensor, beta: Tensor, h: Tensor, eps: float = 1e-5) -> Tensor:
    d = h.shape[-1]
    if d < 2:
        raise ShapeError("layernorm needs at least two features")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = h.data.mean(axis=-1, keepdims=True)
    xc = h.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=lead))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=lead))
        if h.requires_grad:
            gx = g * gamma.data
            gh = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(h, gh)

    return Tensor(out, (gamma, beta, h), backward, "layernorm")


def apply_softmax_rows(h: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    z = h.data - h.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(h, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return Tensor(p, (h,), backward, "softmax")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (shapes must agree exactly
    on leading axes)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return Tensor(out, (a, b), backward, "matmul")


def transpose_last(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.swapaxes(g, -1, -2))

    return Tensor(np.swapaxes(a.data, -1, -2), (a,), backward, "transpose")


def add(a, b) -> Tensor:
    """Elementwise sum. A constant (non-Tensor) operand may broadcast; two
    Tensors must have equal shapes."""
    if not isinstance(b, Tensor):
        b_data = np.asarray(b, dtype=np.float64)
        out = a.data + b_data
        if out.shape != a.shape:
            raise ShapeError(f"add: constant of shape {b_data.shape} would change shape {a.shape}")

        def backward_c(g):
            _accum(a, g)

        return Tensor(out, (a,), backward_c, "add_const")
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return Tensor(a.data + b.data, (a, b), backward, "add")


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accum(a, g * c)

    return Tensor(a.data * c, (a,), backward, "scale")


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), (a,), backward, "reshape")


def stack(items: Sequence[Tensor], axis: int) -> Tensor:
    out = np.stack([t.data for t in items], axis=axis)

    def backward(g):
        for i, t in enumerate(items):
            _accum(t, np.take(g, i, axis=axis))

    return Tensor(out, tuple(items), backward, "stack")


def cumsum(a: Tensor, axis: int) -> Tensor:
    def backward(g):
        # reverse cumulative sum
        _accum(a, np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis))

    return Tensor(np.cumsum(a.data, axis=axis), (a,), backward, "cumsum")


def total(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return Tensor(np.asarray(a.data.sum()), (a,), backward, "sum")


def custom(out, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None], op: str) -> Tensor:
    """Hook for fused ops defined elsewhere (e.g. the variety loss)."""
    return Tensor(out, parents, backward, op)


accumulate = _accum


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dparam into every reachable trainable Param."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if not isinstance(node, Param):
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if not isinstance(node, Param):
            node.grad = None  # free intermediates


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float
    nonfinite: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.nonfinite


def rel_err(a: float, n: float, floor: float = 1e-8) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Param],
    h_step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> dict[str, GradCheckEntry]:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``f`` must rebuild the graph from the current parameter values on every
    call. When ``max_entries`` is set, that many entries per parameter are
    probed at random; otherwise every entry is.
    """
    if not 1e-7 <= h_step <= 1e-3:
        raise ValueError("h_step must lie in [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = {p.name: p.grad.copy() for p in params}
    report = {}
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        worst = GradCheckEntry(p.name, 0.0, (), 0.0, 0.0)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h_step
            fp = float(f().data)
            flat[i] = orig - h_step
            fm = float(f().data)
            flat[i] = orig
            ui = np.unravel_index(i, p.shape)
            if not (math.isfinite(fp) and math.isfinite(fm)):
                worst.nonfinite.append(ui)
                continue
            num = (fp - fm) / (2 * h_step)
            ana = float(analytic[p.name].reshape(-1)[i])
            e = rel_err(ana, num, floor)
            if e > worst.max_rel_err or worst.worst_index == ():
                worst.max_rel_err, worst.worst_index = e, ui
                worst.analytic, worst.numeric = ana, num
        report[p.name] = worst
    return report
