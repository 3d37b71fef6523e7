"""Reverse-mode automatic differentiation on a flat tape of numpy arrays.

Every differentiable quantity in this package is a node on a ``Tape``: a
float64 array of rank 2 or lower plus the opcode and input ids that produced
it. Node ids are assigned in creation order, so the id order is already a
topological order of the graph; ``backward`` walks it once in reverse.
Tapes are cheap and short-lived: training rebuilds the tape every step.

Square roots and logarithms get a numerical floor at ``FLOOR`` so that
zero-variance inputs stay differentiable: ``log`` clamps its argument to the
floor before evaluating, ``sqrt`` evaluates exactly (``sqrt(0) == 0``), and
both treat the clamp as a constant region (zero gradient below the floor).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

FLOOR = 1e-12

(LEAF, ADD, SUB, MUL, DIV, NEG, MATMUL, SUM, MEAN, SQUARE, SQRT, EXP, LOG,
 SIN, COS, TANH, SOFTPLUS, POW, SCALE, CONCAT, SLICE) = range(21)

OP_NAMES = {
    LEAF: "leaf", ADD: "add", SUB: "sub", MUL: "mul", DIV: "div", NEG: "neg",
    MATMUL: "matmul", SUM: "sum", MEAN: "mean", SQUARE: "square",
    SQRT: "sqrt", EXP: "exp", LOG: "log", SIN: "sin", COS: "cos",
    TANH: "tanh", SOFTPLUS: "softplus", POW: "pow", SCALE: "scale",
    CONCAT: "concat", SLICE: "slice",
}


class TapeError(Exception):
    pass


class Var:
    """Handle to one tape node. Supports numpy-style operator sugar."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.nid]

    @property
    def shape(self) -> tuple:
        return self.tape.values[self.nid].shape

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Var):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, c):
        if c == 2:
            return square(self)
        return powc(self, float(c))

    def __getitem__(self, key):
        return vslice(self, key)

    def sum(self):
        return vsum(self)

    def mean(self):
        return vmean(self)

    def _coerce(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.const_like(self.shape, float(other))

    def __repr__(self):
        op = OP_NAMES[self.tape.ops[self.nid]]
        return f"Var(nid={self.nid}, op={op}, shape={self.shape})"


class Tape:
    """Append-only record of operations, stored as parallel lists."""

    __slots__ = ("ops", "args", "values", "aux", "needs", "_const_cache")

    def __init__(self):
        self.ops: list[int] = []
        self.args: list[tuple] = []
        self.values: list[np.ndarray] = []
        self.aux: list = []
        self.needs: list[bool] = []
        self._const_cache: dict = {}

    def __len__(self):
        return len(self.ops)

    def _push(self, op: int, args: tuple, value: np.ndarray, aux=None) -> Var:
        needs = False
        for a in args:
            if self.needs[a]:
                needs = True
                break
        self.ops.append(op)
        self.args.append(args)
        self.values.append(value)
        self.aux.append(aux)
        self.needs.append(needs)
        return Var(self, len(self.ops) - 1)

    def leaf(self, value, needs_grad: bool = True) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 2:
            raise TapeError(f"tape values must have rank <= 2, got shape {value.shape}")
        self.ops.append(LEAF)
        self.args.append(())
        self.values.append(value)
        self.aux.append(None)
        self.needs.append(needs_grad)
        return Var(self, len(self.ops) - 1)

    def const(self, value) -> Var:
        return self.leaf(value, needs_grad=False)

    def const_like(self, shape: tuple, fill: float) -> Var:
        key = (shape, fill)
        nid = self._const_cache.get(key)
        if nid is None:
            v = self.const(np.full(shape, fill))
            self._const_cache[key] = v.nid
            return v
        return Var(self, nid)

    def ones(self, shape: tuple) -> Var:
        return self.const_like(shape, 1.0)


def _same_tape(a: Var, b: Var):
    if a.tape is not b.tape:
        raise TapeError("operands live on different tapes")


def _check_shapes(op: int, a: Var, b: Var):
    if a.shape != b.shape:
        raise TapeError(
            f"{OP_NAMES[op]} requires identical shapes, got {a.shape} and {b.shape}")


def add(a: Var, b: Var) -> Var:
    _same_tape(a, b)
    _check_shapes(ADD, a, b)
    return a.tape._push(ADD, (a.nid, b.nid), a.value + b.value)


def sub(a: Var, b: Var) -> Var:
    _same_tape(a, b)
    _check_shapes(SUB, a, b)
    return a.tape._push(SUB, (a.nid, b.nid), a.value - b.value)


def mul(a: Var, b: Var) -> Var:
    _same_tape(a, b)
    _check_shapes(MUL, a, b)
    return a.tape._push(MUL, (a.nid, b.nid), a.value * b.value)


def div(a: Var, b: Var) -> Var:
    _same_tape(a, b)
    _check_shapes(DIV, a, b)
    return a.tape._push(DIV, (a.nid, b.nid), a.value / b.value)


def neg(a: Var) -> Var:
    return a.tape._push(NEG, (a.nid,), -a.value)


def matmul(a: Var, b: Var) -> Var:
    _same_tape(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2):
        raise TapeError(f"matmul expects (2-d @ 1-d/2-d), got ranks {av.ndim} and {bv.ndim}")
    if av.shape[1] != bv.shape[0]:
        raise TapeError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    return a.tape._push(MATMUL, (a.nid, b.nid), av @ bv)


def vsum(a: Var) -> Var:
    return a.tape._push(SUM, (a.nid,), np.sum(a.value), aux=a.shape)


def vmean(a: Var) -> Var:
    return a.tape._push(MEAN, (a.nid,), np.mean(a.value), aux=a.shape)


def square(a: Var) -> Var:
    return a.tape._push(SQUARE, (a.nid,), a.value * a.value)


def sqrt(a: Var) -> Var:
    # Exact at zero; the FLOOR only gates the gradient.
    return a.tape._push(SQRT, (a.nid,), np.sqrt(np.maximum(a.value, 0.0)))


def exp(a: Var) -> Var:
    return a.tape._push(EXP, (a.nid,), np.exp(a.value))


def log(a: Var) -> Var:
    return a.tape._push(LOG, (a.nid,), np.log(np.maximum(a.value, FLOOR)))


def sin(a: Var) -> Var:
    return a.tape._push(SIN, (a.nid,), np.sin(a.value))


def cos(a: Var) -> Var:
    return a.tape._push(COS, (a.nid,), np.cos(a.value))


def tanh(a: Var) -> Var:
    return a.tape._push(TANH, (a.nid,), np.tanh(a.value))


def softplus(a: Var) -> Var:
    return a.tape._push(SOFTPLUS, (a.nid,), np.logaddexp(0.0, a.value))


def powc(a: Var, c: float) -> Var:
    return a.tape._push(POW, (a.nid,), a.value ** c, aux=float(c))


def scale(a: Var, c: float) -> Var:
    return a.tape._push(SCALE, (a.nid,), a.value * c, aux=float(c))


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    if not parts:
        raise TapeError("concat needs at least one input")
    tape = parts[0].tape
    for p in parts[1:]:
        _same_tape(parts[0], p)
    vals = [p.value for p in parts]
    ranks = {v.ndim for v in vals}
    if len(ranks) != 1:
        raise TapeError(f"concat inputs must share rank, got ranks {sorted(ranks)}")
    value = np.concatenate(vals, axis=axis)
    sizes = tuple(v.shape[axis] for v in vals)
    return tape._push(CONCAT, tuple(p.nid for p in parts), value, aux=(axis, sizes))


def _normalize_key(key, shape) -> tuple:
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > len(shape):
        raise TapeError(f"slice key {key} has more axes than value of shape {shape}")
    bounds = []
    for axis, k in enumerate(key):
        n = shape[axis]
        if isinstance(k, int):
            raise TapeError("integer indexing is not supported, use a contiguous slice")
        if not isinstance(k, slice) or k.step not in (None, 1):
            raise TapeError(f"only contiguous slices are supported, got {k}")
        start, stop, _ = k.indices(n)
        if stop < start:
            stop = start
        bounds.append((start, stop))
    for axis in range(len(key), len(shape)):
        bounds.append((0, shape[axis]))
    return tuple(bounds)


def vslice(a: Var, key) -> Var:
    bounds = _normalize_key(key, a.shape)
    idx = tuple(np.s_[b0:b1] for b0, b1 in bounds)
    return a.tape._push(SLICE, (a.nid,), a.value[idx], aux=(bounds, a.shape))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    s = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + s), s / (1.0 + s))


class Grads:
    """Gradient buffers from one backward pass, indexed by Var."""

    __slots__ = ("_tape", "_buf")

    def __init__(self, tape: Tape, buf: list):
        self._tape = tape
        self._buf = buf

    def wrt(self, v: Var) -> np.ndarray:
        g = self._buf[v.nid]
        if g is None:
            return np.zeros(self._tape.values[v.nid].shape)
        return g


def backward(root: Var) -> Grads:
    """Accumulate d(root)/d(node) for every node feeding the scalar root.

    Visits ids in decreasing order exactly once; buffers start at zero
    (represented as None), so nodes that do not influence the root, and
    leaves created with ``needs_grad=False``, keep a zero gradient.
    """
    tape = root.tape
    if root.value.shape != ():
        raise TapeError(f"backward root must be scalar, got shape {root.value.shape}")
    ops, args, values, aux, needs = tape.ops, tape.args, tape.values, tape.aux, tape.needs
    grads: list = [None] * len(ops)
    grads[root.nid] = np.asarray(1.0)

    def acc(nid: int, g):
        if not needs[nid]:
            return
        cur = grads[nid]
        grads[nid] = g if cur is None else cur + g

    for nid in range(root.nid, -1, -1):
        g = grads[nid]
        if g is None or not needs[nid]:
            continue
        op = ops[nid]
        if op == LEAF:
            continue
        a = args[nid]
        if op == ADD:
            acc(a[0], g)
            acc(a[1], g)
        elif op == SUB:
            acc(a[0], g)
            acc(a[1], -g)
        elif op == MUL:
            acc(a[0], g * values[a[1]])
            acc(a[1], g * values[a[0]])
        elif op == SCALE:
            acc(a[0], g * aux[nid])
        elif op == MATMUL:
            av, bv = values[a[0]], values[a[1]]
            if needs[a[0]]:
                acc(a[0], np.outer(g, bv) if bv.ndim == 1 else g @ bv.T)
            if needs[a[1]]:
                acc(a[1], av.T @ g)
        elif op == DIV:
            bv = values[a[1]]
            acc(a[0], g / bv)
            acc(a[1], -g * values[a[0]] / (bv * bv))
        elif op == NEG:
            acc(a[0], -g)
        elif op == SUM:
            acc(a[0], np.full(aux[nid], float(g)))
        elif op == MEAN:
            shape = aux[nid]
            size = 1
            for s in shape:
                size *= s
            acc(a[0], np.full(shape, float(g) / size))
        elif op == SQUARE:
            acc(a[0], 2.0 * values[a[0]] * g)
        elif op == SQRT:
            x = values[a[0]]
            mask = x >= FLOOR
            denom = np.where(mask, values[nid], 1.0)
            acc(a[0], np.where(mask, 0.5 / denom, 0.0) * g)
        elif op == EXP:
            acc(a[0], values[nid] * g)
        elif op == LOG:
            x = values[a[0]]
            mask = x >= FLOOR
            acc(a[0], np.where(mask, 1.0 / np.where(mask, x, 1.0), 0.0) * g)
        elif op == SIN:
            acc(a[0], np.cos(values[a[0]]) * g)
        elif op == COS:
            acc(a[0], -np.sin(values[a[0]]) * g)
        elif op == TANH:
            y = values[nid]
            acc(a[0], (1.0 - y * y) * g)
        elif op == SOFTPLUS:
            acc(a[0], _sigmoid(values[a[0]]) * g)
        elif op == POW:
            c = aux[nid]
            acc(a[0], c * values[a[0]] ** (c - 1.0) * g)
        elif op == CONCAT:
            axis, sizes = aux[nid]
            off = 0
            for nid_in, size in zip(a, sizes):
                sl = np.s_[off:off + size]
                acc(nid_in, g[sl] if axis == 0 else g[:, sl])
                off += size
        elif op == SLICE:
            bounds, in_shape = aux[nid]
            buf = np.zeros(in_shape)
            idx = tuple(np.s_[b0:b1] for b0, b1 in bounds)
            buf[idx] = g
            acc(a[0], buf)
        else:
            raise TapeError(f"no backward rule for opcode {op}")
    return Grads(tape, grads)


class GradcheckError(Exception):
    pass


def gradcheck(f: Callable, theta: np.ndarray, h: float = 1e-5) -> float:
    """Compare the analytic gradient of f against central differences.

    ``f(theta)`` must return the scalar loss value; ``f(theta, with_grad=True)``
    must return ``(value, gradient)`` with the gradient aligned to the flat
    parameter vector. Returns the largest relative error
    ``|analytic - fd| / (|fd| + 1e-12)`` across parameters.
    """
    theta = np.asarray(theta, dtype=np.float64)
    value, grad = f(theta, with_grad=True)
    if not np.isfinite(value):
        raise GradcheckError(f"objective is non-finite at the base point: {value}")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise GradcheckError(f"gradient shape {grad.shape} does not match theta {theta.shape}")
    worst = 0.0
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        f_hi = f(theta + step)
        f_lo = f(theta - step)
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise GradcheckError(f"objective is non-finite at parameter index {i}")
        fd = (f_hi - f_lo) / (2.0 * h)
        err = abs(grad[i] - fd) / (abs(fd) + 1e-12)
        if err > worst:
            worst = err
    return worst
