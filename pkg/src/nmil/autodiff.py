"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tape` is a static expression graph. Named leaves are bound to
concrete values at forward time, every node caches its value, and
``backward`` sweeps the graph in reverse to accumulate adjoints for the
named leaves. The math kernel set is deliberately small:

    matmul, add, multiply, tanh, sigmoid, exp, log, softmax (over an
    axis), l2-normalize (over an axis), concatenate, reduce-sum /
    reduce-mean / reduce-max

Everything else in this package (subtraction, division by a positive
quantity, powers, log-sum-exp, losses, attention) is composed from those
kernels. Constants and the transpose flags on matmul are structural
plumbing, not arithmetic. A central finite-difference checker is built in
so every differentiable operation can be validated against an
independent numeric derivative.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class TapeError(RuntimeError):
    """Tape misuse: missing inputs, backward before forward, and the like."""


class ShapeError(ValueError):
    """Operands of a primitive do not have compatible shapes."""


class NumericError(ArithmeticError):
    """A forward pass produced a non-finite intermediate value."""


class Tensor:
    """Row-major float64 value. ``shape`` plus C-contiguous ``data``."""

    __slots__ = ("data",)

    def __init__(self, values):
        self.data = np.ascontiguousarray(values, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise TapeError(f"item() on non-scalar tensor of shape {self.shape}")

    def tolist(self):
        return self.data.tolist()

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.ascontiguousarray(x, dtype=np.float64)


class Node:
    __slots__ = ("op", "parents", "attrs")

    def __init__(self, op: str, parents: tuple[int, ...], attrs: dict | None):
        self.op = op
        self.parents = parents
        self.attrs = attrs


class Ref:
    """Handle to a tape node, with operator sugar for composition."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return self.tape.multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.multiply(self, -1.0)

    def __sub__(self, other):
        return self.tape.add(self, self.tape.multiply(other, -1.0))

    def __rsub__(self, other):
        return self.tape.add(self.tape.multiply(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.multiply(self, 1.0 / float(other))
        # general division composed as x * exp(-log(d)); valid for d > 0
        return self.tape.multiply(self, self.tape.exp(-self.tape.log(other)))

    def __matmul__(self, other):
        return self.tape.matmul(self, other)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _restore_axis(g: np.ndarray, axis, keepdims: bool) -> np.ndarray:
    if keepdims or axis is None:
        return g
    return np.expand_dims(g, axis)


# ---------------------------------------------------------------------------
# kernels: op -> (forward(parent_values, attrs), vjp(adjoint, value, parent_values, attrs))
# ---------------------------------------------------------------------------


def _mm_operand(x, flag):
    return x.T if flag else x


def _matmul_fwd(ps, at):
    a, b = ps
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    ta, tb = at["ta"], at["tb"]
    aa, bb = _mm_operand(a, ta), _mm_operand(b, tb)
    if aa.shape[1] != bb.shape[0]:
        raise ShapeError(f"matmul mismatch: {aa.shape} @ {bb.shape}")
    return aa @ bb


def _matmul_vjp(g, y, ps, at):
    a, b = ps
    ta, tb = at["ta"], at["tb"]
    aa, bb = _mm_operand(a, ta), _mm_operand(b, tb)
    ga = g @ bb.T
    gb = aa.T @ g
    return [ga.T if ta else ga, gb.T if tb else gb]


def _ew_check(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _add_fwd(ps, at):
    _ew_check(ps[0], ps[1], "add")
    return ps[0] + ps[1]


def _add_vjp(g, y, ps, at):
    return [_unbroadcast(g, ps[0].shape), _unbroadcast(g, ps[1].shape)]


def _mul_fwd(ps, at):
    _ew_check(ps[0], ps[1], "multiply")
    return ps[0] * ps[1]


def _mul_vjp(g, y, ps, at):
    return [_unbroadcast(g * ps[1], ps[0].shape), _unbroadcast(g * ps[0], ps[1].shape)]


def _softmax_fwd(ps, at):
    x = ps[0]
    m = x.max(axis=at["axis"], keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=at["axis"], keepdims=True)


def _softmax_vjp(g, y, ps, at):
    inner = (g * y).sum(axis=at["axis"], keepdims=True)
    return [y * (g - inner)]


def _l2n_fwd(ps, at):
    x = ps[0]
    n = np.sqrt((x * x).sum(axis=at["axis"], keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        return x / n


def _l2n_vjp(g, y, ps, at):
    x = ps[0]
    n = np.sqrt((x * x).sum(axis=at["axis"], keepdims=True))
    inner = (g * y).sum(axis=at["axis"], keepdims=True)
    return [(g - y * inner) / n]


def _concat_fwd(ps, at):
    axis = at["axis"]
    base = list(ps[0].shape)
    for p in ps[1:]:
        s = list(p.shape)
        if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != axis):
            raise ShapeError(f"concatenate: incompatible part shapes {[q.shape for q in ps]}")
    return np.concatenate(ps, axis=axis)


def _concat_vjp(g, y, ps, at):
    axis = at["axis"]
    sizes = np.cumsum([p.shape[axis] for p in ps])[:-1]
    return list(np.split(g, sizes, axis=axis))


def _rsum_fwd(ps, at):
    return ps[0].sum(axis=at["axis"], keepdims=at["keepdims"])


def _rsum_vjp(g, y, ps, at):
    g = _restore_axis(np.asarray(g), at["axis"], at["keepdims"])
    return [np.broadcast_to(g, ps[0].shape).copy()]


def _rmean_fwd(ps, at):
    return ps[0].mean(axis=at["axis"], keepdims=at["keepdims"])


def _rmean_vjp(g, y, ps, at):
    x = ps[0]
    count = x.size if at["axis"] is None else x.shape[at["axis"]]
    g = _restore_axis(np.asarray(g), at["axis"], at["keepdims"])
    return [np.broadcast_to(g, x.shape).copy() / count]


def _rmax_fwd(ps, at):
    return ps[0].max(axis=at["axis"], keepdims=at["keepdims"])


def _rmax_vjp(g, y, ps, at):
    x = ps[0]
    y_full = _restore_axis(np.asarray(y), at["axis"], at["keepdims"])
    g_full = _restore_axis(np.asarray(g), at["axis"], at["keepdims"])
    mask = (x == y_full)
    # subgradient split evenly across ties so the weights sum to one
    count = mask.sum(axis=at["axis"], keepdims=True) if at["axis"] is not None else mask.sum()
    return [mask * (g_full / count)]


def _exp_fwd(ps, at):
    with np.errstate(over="ignore"):
        return np.exp(ps[0])


def _log_fwd(ps, at):
    # non-positive entries yield -inf/nan and are rejected by the finite check
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(ps[0])


_OPS = {
    "matmul": (_matmul_fwd, _matmul_vjp),
    "add": (_add_fwd, _add_vjp),
    "multiply": (_mul_fwd, _mul_vjp),
    "tanh": (lambda ps, at: np.tanh(ps[0]), lambda g, y, ps, at: [g * (1.0 - y * y)]),
    "sigmoid": (lambda ps, at: expit(ps[0]), lambda g, y, ps, at: [g * y * (1.0 - y)]),
    "exp": (_exp_fwd, lambda g, y, ps, at: [g * y]),
    "log": (_log_fwd, lambda g, y, ps, at: [g / ps[0]]),
    "softmax": (_softmax_fwd, _softmax_vjp),
    "l2_normalize": (_l2n_fwd, _l2n_vjp),
    "concatenate": (_concat_fwd, _concat_vjp),
    "reduce_sum": (_rsum_fwd, _rsum_vjp),
    "reduce_mean": (_rmean_fwd, _rmean_vjp),
    "reduce_max": (_rmax_fwd, _rmax_vjp),
}


class Tape:
    """Static expression graph over the kernel set above.

    Build once with :meth:`input` / :meth:`const` leaves and primitive
    calls, then run :func:`forward` / :func:`backward`. The output is the
    last node added unless :meth:`set_output` says otherwise. A tape must
    stay confined to a single worker; distinct tapes are independent.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.output_index: int | None = None
        self._values: list[np.ndarray] | None = None

    # -- construction -------------------------------------------------

    def _push(self, op: str, parents: tuple[int, ...], attrs: dict | None) -> Ref:
        self.nodes.append(Node(op, parents, attrs))
        self._values = None
        return Ref(self, len(self.nodes) - 1)

    def _coerce(self, x) -> Ref:
        if isinstance(x, Ref):
            if x.tape is not self:
                raise TapeError("ref belongs to a different tape")
            return x
        return self.const(x)

    def input(self, name: str) -> Ref:
        if any(n.op == "input" and n.attrs["name"] == name for n in self.nodes):
            raise TapeError(f"duplicate input name {name!r}")
        return self._push("input", (), {"name": name})

    def const(self, value) -> Ref:
        return self._push("const", (), {"value": _as_array(value)})

    def set_output(self, ref: Ref) -> None:
        self.output_index = self._coerce(ref).index

    # -- kernels --------------------------------------------------------

    def matmul(self, a, b, transpose_a: bool = False, transpose_b: bool = False) -> Ref:
        a, b = self._coerce(a), self._coerce(b)
        return self._push("matmul", (a.index, b.index), {"ta": transpose_a, "tb": transpose_b})

    def add(self, a, b) -> Ref:
        a, b = self._coerce(a), self._coerce(b)
        return self._push("add", (a.index, b.index), None)

    def multiply(self, a, b) -> Ref:
        a, b = self._coerce(a), self._coerce(b)
        return self._push("multiply", (a.index, b.index), None)

    def tanh(self, a) -> Ref:
        return self._push("tanh", (self._coerce(a).index,), None)

    def sigmoid(self, a) -> Ref:
        return self._push("sigmoid", (self._coerce(a).index,), None)

    def exp(self, a) -> Ref:
        return self._push("exp", (self._coerce(a).index,), None)

    def log(self, a) -> Ref:
        return self._push("log", (self._coerce(a).index,), None)

    def softmax(self, a, axis: int) -> Ref:
        return self._push("softmax", (self._coerce(a).index,), {"axis": axis})

    def l2_normalize(self, a, axis: int = -1) -> Ref:
        return self._push("l2_normalize", (self._coerce(a).index,), {"axis": axis})

    def concatenate(self, parts, axis: int) -> Ref:
        refs = [self._coerce(p) for p in parts]
        if not refs:
            raise TapeError("concatenate of zero parts")
        return self._push("concatenate", tuple(r.index for r in refs), {"axis": axis})

    def reduce_sum(self, a, axis: int | None = None, keepdims: bool = False) -> Ref:
        return self._push("reduce_sum", (self._coerce(a).index,), {"axis": axis, "keepdims": keepdims})

    def reduce_mean(self, a, axis: int | None = None, keepdims: bool = False) -> Ref:
        return self._push("reduce_mean", (self._coerce(a).index,), {"axis": axis, "keepdims": keepdims})

    def reduce_max(self, a, axis: int | None = None, keepdims: bool = False) -> Ref:
        return self._push("reduce_max", (self._coerce(a).index,), {"axis": axis, "keepdims": keepdims})

    # -- composites (emit kernel nodes only) ----------------------------

    def power(self, a, exponent: float) -> Ref:
        """x ** exponent for positive x, composed from exp/log/multiply."""
        a = self._coerce(a)
        if exponent == 1.0:
            return a
        if exponent == 2.0:
            return self.multiply(a, a)
        return self.exp(self.multiply(self.log(a), float(exponent)))

    def input_names(self) -> list[str]:
        return [n.attrs["name"] for n in self.nodes if n.op == "input"]


def forward(tape: Tape, inputs: dict | None = None) -> Tensor:
    """Evaluate every node; cache values; return the output tensor.

    ``inputs`` maps leaf names to array-likes / Tensors. Missing or
    non-finite inputs and any non-finite intermediate are rejected with
    the offending node identified.
    """
    inputs = inputs or {}
    vals: list[np.ndarray] = []
    for i, node in enumerate(tape.nodes):
        if node.op == "input":
            name = node.attrs["name"]
            if name not in inputs:
                raise TapeError(f"missing input {name!r}")
            v = _as_array(inputs[name])
        elif node.op == "const":
            v = node.attrs["value"]
        else:
            try:
                v = _OPS[node.op][0]([vals[p] for p in node.parents], node.attrs)
            except ShapeError as e:
                raise ShapeError(f"node {i} ({node.op}): {e}") from None
        if not np.all(np.isfinite(v)):
            raise NumericError(f"node {i} ({node.op}) produced non-finite values")
        vals.append(v)
    if not vals:
        raise TapeError("empty tape")
    tape._values = vals
    out = tape.output_index if tape.output_index is not None else len(vals) - 1
    return Tensor(vals[out])


def backward(tape: Tape, seed_grad: float = 1.0) -> dict[str, Tensor]:
    """Accumulate d(output)/d(leaf) for every named leaf.

    Requires a prior ``forward`` on this tape (values are reused). Leaves
    the output does not depend on get zero gradients.
    """
    if tape._values is None:
        raise TapeError("backward called before forward")
    vals = tape._values
    out = tape.output_index if tape.output_index is not None else len(vals) - 1
    adj: list[np.ndarray | None] = [None] * len(vals)
    adj[out] = np.full(vals[out].shape, float(seed_grad))
    for i in range(out, -1, -1):
        g = adj[i]
        node = tape.nodes[i]
        if g is None or node.op in ("input", "const"):
            continue
        pgrads = _OPS[node.op][1](g, vals[i], [vals[p] for p in node.parents], node.attrs)
        for p, pg in zip(node.parents, pgrads):
            adj[p] = pg if adj[p] is None else adj[p] + pg
    grads: dict[str, Tensor] = {}
    for i, node in enumerate(tape.nodes):
        if node.op == "input":
            g = adj[i] if adj[i] is not None else np.zeros(vals[i].shape)
            grads[node.attrs["name"]] = Tensor(g)
    return grads


def finite_diff_check(
    tape: Tape,
    inputs: dict,
    wrt: list[str] | None = None,
    h: float = 1e-5,
) -> float:
    """Max relative error between backward and central finite differences.

    The tape must be scalar-valued. The error for each perturbed entry is
    |analytic - numeric| / max(1, |numeric|); the maximum over all checked
    entries is returned.
    """
    base = {k: _as_array(v) for k, v in inputs.items()}
    out = forward(tape, base)
    if out.size != 1:
        raise TapeError(f"finite_diff_check needs a scalar output, got shape {out.shape}")
    analytic = backward(tape)
    names = wrt if wrt is not None else sorted(base)
    worst = 0.0
    for name in names:
        x = base[name]
        flat = x.reshape(-1)
        a_flat = analytic[name].data.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            f_hi = forward(tape, base).item()
            flat[j] = keep - h
            f_lo = forward(tape, base).item()
            flat[j] = keep
            numeric = (f_hi - f_lo) / (2.0 * h)
            err = abs(a_flat[j] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    # restore caches for the unperturbed point
    forward(tape, base)
    backward(tape)
    return worst
