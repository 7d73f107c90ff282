"""Reverse-mode automatic differentiation over dense 2-D float64 tensors.

A deliberately small vocabulary of node kinds. Every node has a static
``(rows, cols)`` shape checked at construction, and a graph is evaluated by
walking a cached topological order, so repeated evaluation of one graph
costs only the numpy work.

Example
-------
>>> x = Input("x", (3, 1))
>>> loss = sum_(square(x))
>>> gradient(loss, {"x": np.array([[1.0], [2.0], [3.0]])}).grads["x"].ravel()
array([2., 4., 6.])
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .exceptions import NonScalarLossError, ShapeMismatchError, UnboundInputError

KINDS = (
    "input", "constant", "matmul", "add", "subtract", "multiply", "scale",
    "elu", "exp", "log", "square", "sum", "row_broadcast_add", "clip",
)


class Expr:
    """Immutable expression node. Build with the helper functions or operators."""

    __slots__ = ("kind", "children", "shape", "name", "value", "param", "_order")

    def __init__(self, kind, children=(), shape=None, name=None, value=None, param=None):
        self.kind = kind
        self.children = tuple(children)
        self.shape = tuple(shape)
        self.name = name
        self.value = value
        self.param = param
        self._order = None

    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    def __radd__(self, other):
        return add(_lift(other, self.shape), self)

    def __sub__(self, other):
        return subtract(self, _lift(other, self.shape))

    def __rsub__(self, other):
        return subtract(_lift(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, Expr):
            if other.shape == (1, 1) and self.shape != (1, 1):
                return scale(other, self)
            if self.shape == (1, 1) and other.shape != (1, 1):
                return scale(self, other)
            return multiply(self, other)
        return scale(constant(np.array([[float(other)]])), self)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(constant(np.array([[-1.0]])), self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Expr({self.kind}{label}, shape={self.shape})"

    def topo_order(self):
        if self._order is None:
            order, seen = [], set()
            stack = [(self, False)]
            while stack:
                node, expanded = stack.pop()
                if expanded:
                    order.append(node)
                    continue
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for c in node.children:
                    if id(c) not in seen:
                        stack.append((c, False))
            self._order = order
        return self._order

    def inputs(self) -> dict:
        return {n.name: n for n in self.topo_order() if n.kind == "input"}


def _lift(other, shape):
    if isinstance(other, Expr):
        return other
    return constant(np.full(shape, float(other)))


def _as2d(value):
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    return a


def Input(name: str, shape) -> Expr:
    return Expr("input", shape=shape, name=name)


def constant(value) -> Expr:
    """Fixed tensor; a scipy sparse matrix is kept sparse (useful as a matmul operand)."""
    if sp.issparse(value):
        value = sp.csr_matrix(value, dtype=np.float64)
        return Expr("constant", shape=value.shape, value=value)
    value = _as2d(value)
    value.setflags(write=False)
    return Expr("constant", shape=value.shape, value=value)


def matmul(a: Expr, b: Expr) -> Expr:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul {a.shape} @ {b.shape}")
    return Expr("matmul", (a, b), (a.shape[0], b.shape[1]))


def _same(kind, a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{kind} of shapes {a.shape} and {b.shape}")
    return Expr(kind, (a, b), a.shape)


def add(a: Expr, b: Expr) -> Expr:
    return _same("add", a, b)


def subtract(a: Expr, b: Expr) -> Expr:
    return _same("subtract", a, b)


def multiply(a: Expr, b: Expr) -> Expr:
    """Elementwise product."""
    return _same("multiply", a, b)


def scale(s: Expr, a: Expr) -> Expr:
    """Product of a ``1 x 1`` expression and any expression."""
    if s.shape != (1, 1):
        raise ShapeMismatchError(f"scale factor must be 1x1, got {s.shape}")
    return Expr("scale", (s, a), a.shape)


def row_broadcast_add(a: Expr, row: Expr) -> Expr:
    """``a + row`` with a ``1 x cols`` row repeated down the rows of ``a``."""
    if row.shape != (1, a.shape[1]):
        raise ShapeMismatchError(f"row broadcast of {row.shape} onto {a.shape}")
    return Expr("row_broadcast_add", (a, row), a.shape)


def elu(a: Expr) -> Expr:
    return Expr("elu", (a,), a.shape)


def exp(a: Expr) -> Expr:
    return Expr("exp", (a,), a.shape)


def log(a: Expr) -> Expr:
    return Expr("log", (a,), a.shape)


def square(a: Expr) -> Expr:
    return Expr("square", (a,), a.shape)


def sum_(a: Expr) -> Expr:
    """Full reduction to ``1 x 1``."""
    return Expr("sum", (a,), (1, 1))


def clip(a: Expr, lo: float, hi: float) -> Expr:
    """Clamp to ``[lo, hi]``; zero gradient where clamped."""
    return Expr("clip", (a,), a.shape, param=(float(lo), float(hi)))


def _elu(x):
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0.0)))


def _forward(order, bindings):
    vals = {}
    for node in order:
        k = node.kind
        if k == "input":
            try:
                v = bindings[node.name]
            except KeyError:
                raise UnboundInputError(f"input {node.name!r} is not bound") from None
            v = _as2d(v)
            if v.shape != node.shape:
                raise ShapeMismatchError(
                    f"input {node.name!r} expects {node.shape}, got {v.shape}")
        elif k == "constant":
            v = node.value
        else:
            c = [vals[id(ch)] for ch in node.children]
            if k == "matmul":
                v = c[0] @ c[1]
            elif k == "add" or k == "row_broadcast_add":
                v = c[0] + c[1]
            elif k == "subtract":
                v = c[0] - c[1]
            elif k == "multiply":
                v = c[0] * c[1]
            elif k == "scale":
                v = c[0][0, 0] * c[1]
            elif k == "elu":
                v = _elu(c[0])
            elif k == "exp":
                v = np.exp(c[0])
            elif k == "log":
                v = np.log(c[0])
            elif k == "square":
                v = c[0] * c[0]
            elif k == "sum":
                v = np.array([[c[0].sum()]])
            elif k == "clip":
                v = np.clip(c[0], *node.param)
            else:  # pragma: no cover
                raise ValueError(f"unknown node kind {k}")
        vals[id(node)] = v
    return vals


def evaluate(expr: Expr, bindings) -> np.ndarray:
    """Forward value of ``expr`` given ``{input name: array}``."""
    return _forward(expr.topo_order(), bindings)[id(expr)]


@dataclass
class GradientResult:
    value: float
    grads: dict
    outputs: dict = field(default_factory=dict)


def _accumulate(adj, node, g):
    key = id(node)
    if key in adj:
        adj[key] = adj[key] + g
    else:
        adj[key] = g


def gradient(expr: Expr, bindings, wrt=None, outputs=None) -> GradientResult:
    """Value and gradients of a ``1 x 1`` expression with respect to its inputs.

    ``wrt`` optionally restricts which inputs get gradients; others are still
    bound but their adjoints are discarded. ``outputs`` maps labels to
    intermediate nodes whose forward values should be returned as well.
    """
    if expr.shape != (1, 1):
        raise NonScalarLossError(f"loss must be 1x1, got {expr.shape}")
    order = expr.topo_order()
    vals = _forward(order, bindings)
    adj = {id(expr): np.ones((1, 1))}
    for node in reversed(order):
        g = adj.get(id(node))
        if g is None or not node.children:
            continue
        k = node.kind
        ch = node.children
        if k == "matmul":
            a, b = vals[id(ch[0])], vals[id(ch[1])]
            if ch[0].kind != "constant":
                _accumulate(adj, ch[0], g @ b.T)
            if ch[1].kind != "constant":
                _accumulate(adj, ch[1], a.T @ g)
        elif k == "add":
            _accumulate(adj, ch[0], g)
            _accumulate(adj, ch[1], g)
        elif k == "row_broadcast_add":
            _accumulate(adj, ch[0], g)
            _accumulate(adj, ch[1], g.sum(axis=0, keepdims=True))
        elif k == "subtract":
            _accumulate(adj, ch[0], g)
            _accumulate(adj, ch[1], -g)
        elif k == "multiply":
            a, b = vals[id(ch[0])], vals[id(ch[1])]
            _accumulate(adj, ch[0], g * b)
            _accumulate(adj, ch[1], g * a)
        elif k == "scale":
            s, a = vals[id(ch[0])], vals[id(ch[1])]
            _accumulate(adj, ch[0], np.array([[np.sum(g * a)]]))
            _accumulate(adj, ch[1], s[0, 0] * g)
        elif k == "elu":
            x = vals[id(ch[0])]
            # one-sided convention at 0: derivative 1
            _accumulate(adj, ch[0], g * np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0))))
        elif k == "exp":
            _accumulate(adj, ch[0], g * vals[id(node)])
        elif k == "log":
            _accumulate(adj, ch[0], g / vals[id(ch[0])])
        elif k == "square":
            _accumulate(adj, ch[0], 2.0 * g * vals[id(ch[0])])
        elif k == "sum":
            _accumulate(adj, ch[0], np.full(ch[0].shape, g[0, 0]))
        elif k == "clip":
            lo, hi = node.param
            x = vals[id(ch[0])]
            _accumulate(adj, ch[0], g * ((x >= lo) & (x <= hi)))
    grads = {}
    for node in order:
        if node.kind == "input" and (wrt is None or node.name in wrt):
            grads[node.name] = adj.get(id(node), np.zeros(node.shape))
    extra = {k: vals[id(n)] for k, n in (outputs or {}).items()}
    return GradientResult(float(vals[id(expr)][0, 0]), grads, extra)


def _elu_inputs(expr, bindings):
    order = expr.topo_order()
    vals = _forward(order, bindings)
    return [np.array(vals[id(n.children[0])]) for n in order if n.kind == "elu"]


def check_gradient(expr: Expr, bindings, eps=1e-5, max_coords=1000, rng=None,
                   floor=1e-3, return_excluded=False):
    """Largest relative discrepancy between reverse-mode and central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Above ``max_coords``
    input coordinates a random subset is checked. A coordinate whose
    ``+-eps`` perturbation moves any ELU input across zero is treated as
    near-kink and excluded.
    """
    rng = np.random.default_rng(rng)
    bindings = {k: _as2d(v).copy() for k, v in bindings.items()}
    res = gradient(expr, bindings)
    coords = [(name, idx) for name, g in res.grads.items() for idx in np.ndindex(g.shape)]
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    has_elu = any(n.kind == "elu" for n in expr.topo_order())
    worst, excluded = 0.0, 0
    for name, idx in coords:
        x = bindings[name]
        orig = x[idx]
        x[idx] = orig + eps
        fp = float(evaluate(expr, bindings)[0, 0])
        up = _elu_inputs(expr, bindings) if has_elu else []
        x[idx] = orig - eps
        fm = float(evaluate(expr, bindings)[0, 0])
        dn = _elu_inputs(expr, bindings) if has_elu else []
        x[idx] = orig
        if any(np.any((u >= 0) != (d >= 0)) for u, d in zip(up, dn)):
            excluded += 1
            continue
        num = (fp - fm) / (2.0 * eps)
        ana = res.grads[name][idx]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    if return_excluded:
        return worst, excluded
    return worst
