"""Reverse-mode autodiff on numpy float64 tensors.

Small tape-based engine covering exactly the primitives the tiny LM and the
preference losses need: add/mul (broadcasting), matmul, gather, layer norm,
softmax/log-softmax, gelu, softplus, slicing and sums. Every op checks its
output for non-finite values. Graphs are single-threaded; distinct graphs
over distinct parameter copies are independent and safe to run in parallel.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

Array = np.ndarray
GradientMap = dict[str, Array]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumericOverflowError(FloatingPointError):
    """A primitive produced a non-finite intermediate."""

    def __init__(self, primitive: str):
        super().__init__(f"non-finite intermediate in primitive '{primitive}'")
        self.primitive = primitive


class Var:
    """One node of a computation graph; holds a float64 value."""

    __slots__ = ("tape", "value", "parents", "vjp", "idx")

    def __init__(self, tape, value, parents, vjp, idx):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.idx = idx

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Records ops in evaluation order; backward walks them reversed."""

    def __init__(self):
        self.nodes: list[Var] = []

    def _node(self, op: str, value, parents: Sequence[Var], vjp) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericOverflowError(op)
        node = Var(self, value, tuple(parents), vjp, len(self.nodes))
        self.nodes.append(node)
        return node

    def leaf(self, values) -> Var:
        return self._node("leaf", values, (), None)

    def const(self, values) -> Var:
        return self._node("const", values, (), None)

    def backward(self, out: Var) -> dict[int, Array]:
        """Adjoints for every node reachable from `out`, keyed by node index."""
        if out.tape is not self:
            raise ValueError("output var belongs to a different tape")
        grads: dict[int, Array] = {out.idx: np.ones_like(out.value)}
        for node in reversed(self.nodes):
            g = grads.pop(node.idx, None)
            if g is None or node.vjp is None:
                if g is not None and node.vjp is None:
                    grads[node.idx] = g  # keep leaf adjoints
                continue
            for parent, contrib in zip(node.parents, node.vjp(g)):
                if contrib is None:
                    continue
                prev = grads.get(parent.idx)
                grads[parent.idx] = contrib if prev is None else prev + contrib
        return grads


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_var(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def add(a: Var, b) -> Var:
    b = _as_var(a.tape, b)
    return a.tape._node(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a: Var, b) -> Var:
    b = _as_var(a.tape, b)
    return a.tape._node(
        "sub",
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a: Var, b) -> Var:
    b = _as_var(a.tape, b)
    return a.tape._node(
        "mul",
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape._node("scale", a.value * c, (a,), lambda g: (g * c,))


def add_const(a: Var, c) -> Var:
    c = np.asarray(c, dtype=np.float64)
    return a.tape._node(
        "add_const", a.value + c, (a,), lambda g: (_unbroadcast(g, a.value.shape),)
    )


def matmul(a: Var, b: Var, transpose_b: bool = False) -> Var:
    """Batched matrix product; broadcasts leading axes like np.matmul."""
    bv = b.value.swapaxes(-1, -2) if transpose_b else b.value

    def vjp(g):
        ga = np.matmul(g, bv.swapaxes(-1, -2))
        gb = np.matmul(a.value.swapaxes(-1, -2), g)
        if transpose_b:
            gb = gb.swapaxes(-1, -2)
        return (
            _unbroadcast(ga, a.value.shape),
            _unbroadcast(gb, b.value.shape),
        )

    return a.tape._node("matmul", np.matmul(a.value, bv), (a, b), vjp)


def gather(table: Var, ids: Array) -> Var:
    """Embedding lookup: rows of `table` selected by integer array `ids`."""
    ids = np.asarray(ids)

    def vjp(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.value.shape[-1]))
        return (gt,)

    return table.tape._node("gather", table.value[ids], (table,), vjp)


def take_last(x: Var, ids: Array) -> Var:
    """Pick one entry along the last axis per leading index (logit gather)."""
    ids = np.asarray(ids)
    idx = ids[..., None]

    def vjp(g):
        gx = np.zeros_like(x.value)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    value = np.take_along_axis(x.value, idx, axis=-1)[..., 0]
    return x.tape._node("take_last", value, (x,), vjp)


def reshape(x: Var, shape) -> Var:
    shape = tuple(shape)
    return x.tape._node(
        "reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(x.value.shape),)
    )


def transpose(x: Var, axes) -> Var:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return x.tape._node(
        "transpose", x.value.transpose(axes), (x,), lambda g: (g.transpose(inv),)
    )


def slice_(x: Var, index) -> Var:
    """Basic slicing with scatter-back gradient."""

    def vjp(g):
        gx = np.zeros_like(x.value)
        gx[index] = g
        return (gx,)

    return x.tape._node("slice", x.value[index], (x,), vjp)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    """Normalize over the last axis, then scale and shift."""
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        n = x.value.shape[-1]
        gg = g * gain.value
        # d xhat / d x folded analytically
        gx = inv * (
            gg
            - gg.mean(axis=-1, keepdims=True)
            - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        )
        ggain = _unbroadcast(g * xhat, gain.value.shape)
        gbias = _unbroadcast(g, bias.value.shape)
        return (gx, ggain, gbias)

    return x.tape._node("layer_norm", xhat * gain.value + bias.value, (x, gain, bias), vjp)


def softmax(x: Var) -> Var:
    m = x.value.max(axis=-1, keepdims=True)
    e = np.exp(x.value - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return x.tape._node("softmax", y, (x,), vjp)


def log_softmax(x: Var) -> Var:
    m = x.value.max(axis=-1, keepdims=True)
    s = x.value - m
    y = s - np.log(np.exp(s).sum(axis=-1, keepdims=True))

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return x.tape._node("log_softmax", y, (x,), vjp)


def gelu(x: Var) -> Var:
    phi = 0.5 * (1.0 + erf(x.value * _INV_SQRT2))
    y = x.value * phi

    def vjp(g):
        dens = np.exp(-0.5 * x.value * x.value) * _INV_SQRT_2PI
        return (g * (phi + x.value * dens),)

    return x.tape._node("gelu", y, (x,), vjp)


def softplus(x: Var) -> Var:
    """log(1 + e^x) with the standard large-argument branch."""
    y = np.maximum(x.value, 0.0) + np.log1p(np.exp(-np.abs(x.value)))

    def vjp(g):
        return (g * expit(x.value),)

    return x.tape._node("softplus", y, (x,), vjp)


def sum_(x: Var, axis=None) -> Var:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.value.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.value.shape).copy(),)

    return x.tape._node("sum", x.value.sum(axis=axis), (x,), vjp)


def mean(x: Var, axis=None) -> Var:
    n = x.value.size if axis is None else x.value.shape[axis]
    return scale(sum_(x, axis=axis), 1.0 / n)


def masked_sum(x: Var, mask: Array, axis=None) -> Var:
    """Sum of x over positions where `mask` (a constant 0/1 array) is 1."""
    return sum_(mul(x, x.tape.const(mask)), axis=axis)


def evaluate(computation: Callable[[Tape, dict[str, Var]], Var], params: dict[str, Array]) -> float:
    """Forward-only evaluation of a scalar computation."""
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    out = computation(tape, leaves)
    if out.value.size != 1:
        raise ValueError("computation must be scalar-valued")
    return float(out.value)


def evaluate_with_gradients(
    computation: Callable[[Tape, dict[str, Var]], Var], params: dict[str, Array]
) -> tuple[float, GradientMap]:
    """Value and d(value)/d(param) for every named parameter.

    Parameters the computation never touches get zero gradients. The forward
    value is the plain evaluation, bit for bit (the tape only records).
    """
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    out = computation(tape, leaves)
    if out.value.size != 1:
        raise ValueError("computation must be scalar-valued")
    adjoints = tape.backward(out)
    grads: GradientMap = {}
    for name, leaf in leaves.items():
        g = adjoints.get(leaf.idx)
        if g is None:
            g = np.zeros_like(leaf.value)
        if not np.all(np.isfinite(g)):
            raise NumericOverflowError("backward")
        grads[name] = g
    return float(out.value), grads


def grad_check(
    computation: Callable[[Tape, dict[str, Var]], Var],
    params: dict[str, Array],
    epsilon: float = 1e-5,
    max_coords_per_param: int | None = None,
    seed: int = 0,
    noise_floor: float = 0.0,
) -> float:
    """Max relative error of analytic gradients vs central differences.

    Error per coordinate is |analytic - central| / max(1e-12, |analytic| +
    |central|). With `max_coords_per_param` set, a seeded subset of
    coordinates is checked per tensor; otherwise every coordinate is.

    `noise_floor` treats absolute disagreements at or below it as zero:
    central differences of a ~O(1) value at epsilon=1e-5 resolve no better
    than ~1e-11, so coordinates with true gradients near that scale would
    otherwise report pure rounding noise as relative error.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    for name, v in params.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"parameter '{name}' contains non-finite values")

    _, grads = evaluate_with_gradients(computation, params)
    work = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, tensor in work.items():
        flat = tensor.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = np.sort(rng.choice(n, size=max_coords_per_param, replace=False))
        else:
            coords = range(n)
        gflat = grads[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = evaluate(computation, work)
            flat[i] = orig - epsilon
            f_minus = evaluate(computation, work)
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * epsilon)
            a = gflat[i]
            if abs(a - central) <= noise_floor:
                continue
            err = abs(a - central) / max(1e-12, abs(a) + abs(central))
            if err > worst:
                worst = err
    return worst
