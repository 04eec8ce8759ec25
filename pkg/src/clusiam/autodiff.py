"""Reverse-mode automatic differentiation on dense float64 arrays.

The engine is deliberately small: a closed set of primitives recorded on an
explicit :class:`Tape`, reverse accumulation in recording order, and an Adam
optimizer. Forward values are plain numpy arrays and every reduction runs in
a fixed order, so identical tapes produce bitwise-identical values and
gradients.

Only full reductions (``sum``/``mean``) and row-wise broadcasting (a 1-D
vector against the rows of a matrix) are supported; everything richer is
composed from these primitives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

PRIMITIVES = (
    "add",
    "sub",
    "mul_elementwise",
    "matmul",
    "relu",
    "exp",
    "ln",
    "mean",
    "sum",
    "scale",
    "l2_normalize_rows",
    "concat_rows",
    "detach",
)


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A dense float64 array bound to a node on a :class:`Tape`."""

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data: np.ndarray, requires_grad: bool, node_id: int, tape: "Tape"):
        self.data = data
        self.requires_grad = requires_grad
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return self.tape.apply("detach", self)

    # operator sugar over the primitive set
    def __add__(self, other):
        return self.tape.apply("add", self, other)

    def __sub__(self, other):
        return self.tape.apply("sub", self, other)

    def __mul__(self, other):
        return self.tape.apply("mul_elementwise", self, other)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, node={self.node_id})"


@dataclass
class _Op:
    kind: str
    input_ids: tuple[int, ...]
    output_id: int
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive applications.

    Leaves are created with :meth:`leaf` / :meth:`constant`; ops are applied
    with :meth:`apply` (or the convenience wrappers). :meth:`backward` walks
    the record once in reverse and returns a gradient for every leaf that
    was created with ``requires_grad=True`` — zeros when no gradient path
    reaches it (e.g. behind a ``detach``).
    """

    def __init__(self):
        self._ops: list[_Op] = []
        self._next_id = 0
        self._leaves: dict[int, tuple[bool, tuple[int, ...]]] = {}

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, data, requires_grad: bool = False) -> Tensor:
        arr = _as_f64(data)
        t = Tensor(arr, requires_grad, self._new_id(), self)
        self._leaves[t.node_id] = (requires_grad, arr.shape)
        return t

    def constant(self, data) -> Tensor:
        return self.leaf(data, requires_grad=False)

    # -- primitive application ------------------------------------------------

    def apply(self, kind: str, *inputs, **kwargs) -> Tensor:
        if kind not in PRIMITIVES:
            raise ValueError(f"unknown primitive {kind!r}")
        tensors = [x if isinstance(x, Tensor) else self.constant(x) for x in inputs]
        if kind == "detach":
            (x,) = tensors
            # fresh constant leaf: identical values, no gradient path
            return self.leaf(x.data.copy(), requires_grad=False)
        out_data, vjp = _FORWARD[kind](self, tensors, kwargs)
        out = Tensor(out_data, any(t.requires_grad for t in tensors), self._new_id(), self)
        self._ops.append(_Op(kind, tuple(t.node_id for t in tensors), out.node_id, vjp))
        return out

    def add(self, a, b):
        return self.apply("add", a, b)

    def sub(self, a, b):
        return self.apply("sub", a, b)

    def mul(self, a, b):
        return self.apply("mul_elementwise", a, b)

    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def relu(self, x):
        return self.apply("relu", x)

    def exp(self, x):
        return self.apply("exp", x)

    def ln(self, x):
        return self.apply("ln", x)

    def mean(self, x):
        return self.apply("mean", x)

    def sum(self, x):
        return self.apply("sum", x)

    def scale(self, x, factor: float):
        return self.apply("scale", x, factor=factor)

    def l2_normalize_rows(self, x):
        return self.apply("l2_normalize_rows", x)

    def concat_rows(self, *xs):
        return self.apply("concat_rows", *xs)

    # -- reverse pass ----------------------------------------------------------

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.tape is not self:
            raise ValueError("loss tensor does not belong to this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for op in reversed(self._ops):
            g_out = grads.get(op.output_id)
            if g_out is None:
                continue
            for input_id, g_in in zip(op.input_ids, op.vjp(g_out)):
                if g_in is None:
                    continue
                acc = grads.get(input_id)
                grads[input_id] = g_in if acc is None else acc + g_in
        result: dict[int, np.ndarray] = {}
        for node_id, (requires_grad, shape) in self._leaves.items():
            if requires_grad:
                g = grads.get(node_id)
                result[node_id] = np.zeros(shape) if g is None else g
        return result


# -- forward rules + vector-Jacobian products ----------------------------------


def _check_same_or_row(kind: str, a: np.ndarray, b: np.ndarray) -> bool:
    """True when b is a 1-D row broadcast against the rows of 2-D a."""
    if a.shape == b.shape:
        return False
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return True
    raise ValueError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _fw_add(tape, ts, kw):
    a, b = ts
    row = _check_same_or_row("add", a.data, b.data)

    def vjp(g):
        return g, (g.sum(axis=0) if row else g)

    return a.data + b.data, vjp


def _fw_sub(tape, ts, kw):
    a, b = ts
    row = _check_same_or_row("sub", a.data, b.data)

    def vjp(g):
        return g, (-(g.sum(axis=0)) if row else -g)

    return a.data - b.data, vjp


def _fw_mul(tape, ts, kw):
    a, b = ts
    row = _check_same_or_row("mul_elementwise", a.data, b.data)
    av, bv = a.data, b.data

    def vjp(g):
        ga = g * bv
        gb = (g * av).sum(axis=0) if row else g * av
        return ga, gb

    return av * bv, vjp


def _fw_matmul(tape, ts, kw):
    a, b = ts
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    av, bv = a.data, b.data

    def vjp(g):
        return g @ bv.T, av.T @ g

    return av @ bv, vjp


def _fw_relu(tape, ts, kw):
    (x,) = ts
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return np.where(mask, x.data, 0.0), vjp


def _fw_exp(tape, ts, kw):
    (x,) = ts
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return out, vjp


def _fw_ln(tape, ts, kw):
    (x,) = ts
    if np.any(x.data <= 0):
        raise ValueError("ln: non-positive input value; clamp before applying ln")
    xv = x.data

    def vjp(g):
        return (g / xv,)

    return np.log(xv), vjp


def _fw_mean(tape, ts, kw):
    (x,) = ts
    n = x.data.size
    shape = x.data.shape

    def vjp(g):
        return (np.full(shape, float(g) / n),)

    return np.asarray(x.data.mean()), vjp


def _fw_sum(tape, ts, kw):
    (x,) = ts
    shape = x.data.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return np.asarray(x.data.sum()), vjp


def _fw_scale(tape, ts, kw):
    (x,) = ts
    factor = float(kw["factor"])

    def vjp(g):
        return (g * factor,)

    return x.data * factor, vjp


def _fw_l2_normalize_rows(tape, ts, kw):
    (x,) = ts
    xv = x.data
    flat = xv.ndim == 1
    rows = xv[None, :] if flat else xv
    if rows.ndim != 2:
        raise ValueError(f"l2_normalize_rows: expected 1-D or 2-D input, got shape {xv.shape}")
    norms = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    zero = np.flatnonzero(norms.ravel() == 0.0)
    if zero.size:
        raise ValueError(f"l2_normalize_rows: zero-norm row {int(zero[0])}")
    y = rows / norms

    def vjp(g):
        grows = g[None, :] if flat else g
        dot = (grows * y).sum(axis=1, keepdims=True)
        gx = (grows - y * dot) / norms
        return (gx[0] if flat else gx,)

    return y[0] if flat else y, vjp


def _fw_concat_rows(tape, ts, kw):
    mats = [t.data for t in ts]
    if not mats:
        raise ValueError("concat_rows: needs at least one input")
    cols = {m.shape[1] if m.ndim == 2 else -1 for m in mats}
    if -1 in cols or len(cols) != 1:
        raise ValueError(
            "concat_rows: inputs must be 2-D with equal column counts, got "
            + str([m.shape for m in mats])
        )
    counts = [m.shape[0] for m in mats]

    def vjp(g):
        out, start = [], 0
        for c in counts:
            out.append(g[start : start + c])
            start += c
        return tuple(out)

    return np.concatenate(mats, axis=0), vjp


_FORWARD = {
    "add": _fw_add,
    "sub": _fw_sub,
    "mul_elementwise": _fw_mul,
    "matmul": _fw_matmul,
    "relu": _fw_relu,
    "exp": _fw_exp,
    "ln": _fw_ln,
    "mean": _fw_mean,
    "sum": _fw_sum,
    "scale": _fw_scale,
    "l2_normalize_rows": _fw_l2_normalize_rows,
    "concat_rows": _fw_concat_rows,
}


# -- Adam ------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam hyperparameters plus per-parameter moment buffers.

    Weight decay is classical L2: it is folded into the gradient
    (g + weight_decay * theta) before the moment updates.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update with bias correction; params are updated in place."""
    if state.lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {state.lr}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ValueError(
                f"adam_step: gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {theta.shape}"
            )
        if state.weight_decay != 0.0:
            g = g + state.weight_decay * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        theta -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# -- gradient checking -------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    h: float
    n_entries: int


def finite_diff_check(
    fn: Callable[[Tape, Tensor], Tensor],
    point: np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare the tape gradient of ``fn`` against central differences.

    ``fn`` must build a scalar loss on the tape it is given from the single
    leaf tensor. The relative error uses a ``max(1, |analytic|)`` denominator
    per entry. Failures are reported, never raised.
    """
    point = _as_f64(point)
    tape = Tape()
    x = tape.leaf(point, requires_grad=True)
    analytic = tape.backward(fn(tape, x))[x.node_id]

    def value_at(p: np.ndarray) -> float:
        t = Tape()
        return fn(t, t.leaf(p, requires_grad=True)).item()

    numeric = np.zeros_like(point)
    flat_num = numeric.ravel()
    flat_pt = point.ravel()
    for i in range(flat_pt.size):
        orig = flat_pt[i]
        flat_pt[i] = orig + h
        f_plus = value_at(point)
        flat_pt[i] = orig - h
        f_minus = value_at(point)
        flat_pt[i] = orig
        flat_num[i] = (f_plus - f_minus) / (2.0 * h)

    if point.size == 0:
        return GradCheckReport(0.0, True, tol, h, 0)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    max_rel = float(rel.max())
    return GradCheckReport(max_rel, max_rel <= tol, tol, h, point.size)
