"""Dense-tensor expression graphs with two differentiation modes.

Expressions are immutable DAGs built once and evaluated many times against
leaf bindings. Parameter gradients use reverse-mode accumulation (numeric),
input derivatives use forward-mode tangent propagation implemented as a
graph-to-graph transformation, so a directional derivative is itself an
expression that reverse-mode can differentiate (needed for PDE residuals).

All numerics are float64.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Expr",
    "param",
    "inp",
    "const",
    "matmul",
    "sum_",
    "mean",
    "square",
    "sqrt",
    "exp",
    "log",
    "sin",
    "cos",
    "tanh",
    "sigmoid",
    "maximum",
    "take",
    "reshape",
    "evaluate",
    "evaluate_many",
    "param_grads",
    "grad_params",
    "jvp",
    "input_derivative",
    "finite_diff_check",
    "leaves",
    "Graph",
]


def _as_array(value):
    a = np.asarray(value, dtype=np.float64)
    return a


class Tensor:
    """Immutable dense array of float64 values.

    Thin validated wrapper; most APIs also accept raw ndarrays.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        a = _as_array(data)
        if not np.all(np.isfinite(a)):
            raise ValueError("tensor entries must be finite")
        a = a.copy()
        a.flags.writeable = False
        object.__setattr__(self, "data", a)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _shape_of(value):
    if isinstance(value, Expr):
        return value.shape
    return _as_array(value).shape


class Expr:
    """A node in an immutable operation DAG over tensors."""

    __slots__ = ("op", "args", "shape", "payload")

    # keep ndarray <op> Expr from broadcasting into object arrays; numpy then
    # defers to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, op, args, shape, payload=None):
        self.op = op
        self.args = tuple(args)
        self.shape = tuple(int(s) for s in shape)
        self.payload = payload

    def __repr__(self):
        return f"Expr({self.op}, shape={self.shape})"

    # arithmetic sugar; scalars and arrays are lifted to constants
    def __add__(self, other):
        return _binary("add", self, other)

    def __radd__(self, other):
        return _binary("add", other, self)

    def __sub__(self, other):
        return _binary("sub", self, other)

    def __rsub__(self, other):
        return _binary("sub", other, self)

    def __mul__(self, other):
        return _binary("mul", self, other)

    def __rmul__(self, other):
        return _binary("mul", other, self)

    def __truediv__(self, other):
        return _binary("div", self, other)

    def __rtruediv__(self, other):
        return _binary("div", other, self)

    def __neg__(self):
        return Expr("neg", (self,), self.shape)

    def __matmul__(self, other):
        return matmul(self, other)


def param(name, shape):
    """Parameter leaf: differentiated by reverse mode."""
    return Expr("leaf", (), shape, ("param", str(name)))


def inp(name, shape):
    """Input leaf: differentiated by forward-mode input_derivative."""
    return Expr("leaf", (), shape, ("input", str(name)))


def const(value):
    """Constant baked into the graph."""
    if isinstance(value, Tensor):
        a = value.data
    else:
        a = _as_array(value)
    return Expr("const", (), a.shape, a)


def _lift(value):
    return value if isinstance(value, Expr) else const(value)


def _binary(op, a, b):
    a, b = _lift(a), _lift(b)
    shape = np.broadcast_shapes(a.shape, b.shape)
    return Expr(op, (a, b), shape)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if len(a.shape) not in (1, 2) or len(b.shape) not in (1, 2):
        raise ValueError(f"matmul needs 1D/2D operands, got {a.shape} @ {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0]
    if ka != kb:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if len(a.shape) == 2 and len(b.shape) == 2:
        shape = (a.shape[0], b.shape[1])
    elif len(a.shape) == 2:
        shape = (a.shape[0],)
    elif len(b.shape) == 2:
        shape = (b.shape[1],)
    else:
        shape = ()
    return Expr("matmul", (a, b), shape)


def _reduce_shape(shape, axis):
    if axis is None:
        return ()
    axis = axis % len(shape)
    return tuple(s for i, s in enumerate(shape) if i != axis)


def sum_(a, axis=None):
    a = _lift(a)
    return Expr("sum", (a,), _reduce_shape(a.shape, axis), axis)


def mean(a, axis=None):
    a = _lift(a)
    return Expr("mean", (a,), _reduce_shape(a.shape, axis), axis)


def _unary(op, a):
    a = _lift(a)
    return Expr(op, (a,), a.shape)


def square(a):
    return _unary("square", a)


def sqrt(a):
    return _unary("sqrt", a)


def exp(a):
    return _unary("exp", a)


def log(a):
    return _unary("log", a)


def sin(a):
    return _unary("sin", a)


def cos(a):
    return _unary("cos", a)


def tanh(a):
    return _unary("tanh", a)


def sigmoid(a):
    return _unary("sigmoid", a)


def maximum(a, c):
    """Elementwise max(a, c) for a constant threshold c; subgradient 0 at the kink."""
    a = _lift(a)
    return Expr("maxc", (a,), a.shape, float(c))


def take(a, indices, axis=0):
    """Gather rows/entries along an axis with constant integer indices."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("take indices must be one-dimensional")
    shape = list(a.shape)
    axis = axis % len(shape)
    shape[axis] = idx.shape[0]
    return Expr("take", (a,), tuple(shape), (axis, idx))


def reshape(a, shape):
    a = _lift(a)
    shape = tuple(int(s) for s in np.empty(a.shape).reshape(shape).shape)
    return Expr("reshape", (a,), shape)


# ---------------------------------------------------------------------------
# forward evaluation
# ---------------------------------------------------------------------------

def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward(node, vals):
    op = node.op
    if op == "add":
        return vals[0] + vals[1]
    if op == "sub":
        return vals[0] - vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "div":
        return vals[0] / vals[1]
    if op == "neg":
        return -vals[0]
    if op == "matmul":
        return vals[0] @ vals[1]
    if op == "sum":
        return np.sum(vals[0], axis=node.payload)
    if op == "mean":
        return np.mean(vals[0], axis=node.payload)
    if op == "square":
        return vals[0] * vals[0]
    if op == "sqrt":
        return np.sqrt(vals[0])
    if op == "exp":
        return np.exp(vals[0])
    if op == "log":
        return np.log(vals[0])
    if op == "sin":
        return np.sin(vals[0])
    if op == "cos":
        return np.cos(vals[0])
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "sigmoid":
        return _sigmoid(np.asarray(vals[0], dtype=np.float64))
    if op == "maxc":
        return np.maximum(vals[0], node.payload)
    if op == "gtc":
        return (vals[0] > node.payload).astype(np.float64)
    if op == "take":
        axis, idx = node.payload
        return np.take(vals[0], idx, axis=axis)
    if op == "reshape":
        return np.reshape(vals[0], node.shape)
    raise ValueError(f"unknown op {op!r}")


def _unbroadcast(grad, shape):
    # sum gradient over axes that were broadcast in the forward op
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _backward(node, vals, out, g):
    """Adjoints of node's args given adjoint g of its output."""
    op = node.op
    if op == "add":
        return (_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape))
    if op == "sub":
        return (_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape))
    if op == "mul":
        return (
            _unbroadcast(g * vals[1], vals[0].shape),
            _unbroadcast(g * vals[0], vals[1].shape),
        )
    if op == "div":
        ga = g / vals[1]
        gb = -g * vals[0] / (vals[1] * vals[1])
        return (_unbroadcast(ga, vals[0].shape), _unbroadcast(gb, vals[1].shape))
    if op == "neg":
        return (-g,)
    if op == "matmul":
        a, b = vals
        a2 = a if a.ndim == 2 else a[None, :]
        b2 = b if b.ndim == 2 else b[:, None]
        g2 = np.reshape(g, (a2.shape[0], b2.shape[1]))
        ga = g2 @ b2.T
        gb = a2.T @ g2
        return (ga.reshape(a.shape), gb.reshape(b.shape))
    if op == "sum":
        axis = node.payload
        if axis is None:
            return (np.broadcast_to(g, vals[0].shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), vals[0].shape).copy(),)
    if op == "mean":
        axis = node.payload
        n = vals[0].size if axis is None else vals[0].shape[axis]
        if axis is None:
            return (np.broadcast_to(g / n, vals[0].shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), vals[0].shape).copy(),)
    if op == "square":
        return (2.0 * vals[0] * g,)
    if op == "sqrt":
        return (g / (2.0 * out),)
    if op == "exp":
        return (g * out,)
    if op == "log":
        return (g / vals[0],)
    if op == "sin":
        return (g * np.cos(vals[0]),)
    if op == "cos":
        return (-g * np.sin(vals[0]),)
    if op == "tanh":
        return (g * (1.0 - out * out),)
    if op == "sigmoid":
        return (g * out * (1.0 - out),)
    if op == "maxc":
        return (g * (vals[0] > node.payload),)
    if op == "gtc":
        return (np.zeros_like(vals[0]),)
    if op == "take":
        axis, idx = node.payload
        ga = np.zeros(node.args[0].shape, dtype=np.float64)
        np.add.at(ga, (slice(None),) * axis + (idx,), g)
        return (ga,)
    if op == "reshape":
        return (np.reshape(g, vals[0].shape),)
    raise ValueError(f"no gradient rule for op {op!r}")


class Graph:
    """Compiled multi-root view of an expression DAG for hot loops.

    Topological order is computed once; forward/gradient calls then walk a
    flat op list. Safe to share read-only across threads.
    """

    def __init__(self, *roots):
        self.roots = tuple(_lift(r) for r in roots)
        order = []
        index = {}
        stack = [(r, False) for r in reversed(self.roots)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in index:
                continue
            if expanded:
                index[id(node)] = len(order)
                order.append(node)
            else:
                stack.append((node, True))
                for a in reversed(node.args):
                    if id(a) not in index:
                        stack.append((a, False))
        self.order = order
        self.index = index
        self.root_pos = [index[id(r)] for r in self.roots]
        # a leaf name may appear as several distinct nodes (e.g. one model
        # instantiated over two point sets); gradients sum over all of them
        self.leaf_info = {}
        self.leaf_pos = {}
        for pos, node in enumerate(order):
            if node.op == "leaf":
                kind, name = node.payload
                prev = self.leaf_info.get(name)
                if prev is not None and (prev[0] != kind or prev[1] != node.shape):
                    raise ValueError(f"leaf {name!r} declared twice with different kind/shape")
                self.leaf_info[name] = (kind, node.shape)
                self.leaf_pos.setdefault(name, []).append(pos)

    def param_names(self):
        return sorted(n for n, (k, _) in self.leaf_info.items() if k == "param")

    def _values(self, bindings):
        vals = [None] * len(self.order)
        for pos, node in enumerate(self.order):
            if node.op == "leaf":
                kind, name = node.payload
                if name not in bindings:
                    raise KeyError(f"unbound leaf {name!r}")
                v = np.asarray(bindings[name], dtype=np.float64)
                if v.shape != node.shape:
                    raise ValueError(
                        f"leaf {name!r} bound with shape {v.shape}, declared {node.shape}"
                    )
                vals[pos] = v
            elif node.op == "const":
                vals[pos] = node.payload
            else:
                argv = [vals[self.index[id(a)]] for a in node.args]
                vals[pos] = _forward(node, argv)
        return vals

    def forward(self, bindings):
        """Values of every root, sharing one pass over the DAG."""
        vals = self._values(bindings)
        return [np.asarray(vals[p]) for p in self.root_pos]

    def forward_and_grad(self, bindings, wrt=None, root=0):
        """Root values plus d(roots[root])/d(leaf) for the named leaves.

        The differentiated root must be scalar. `wrt` defaults to all
        parameter leaves.
        """
        target = self.roots[root]
        if target.shape != ():
            raise ValueError(f"gradient root must be scalar, got shape {target.shape}")
        if wrt is None:
            wrt = self.param_names()
        vals = self._values(bindings)
        adj = [None] * len(self.order)
        adj[self.root_pos[root]] = np.ones((), dtype=np.float64)
        for pos in range(len(self.order) - 1, -1, -1):
            g = adj[pos]
            if g is None:
                continue
            node = self.order[pos]
            if node.op in ("leaf", "const"):
                continue
            argv = [vals[self.index[id(a)]] for a in node.args]
            for a, ga in zip(node.args, _backward(node, argv, vals[pos], g)):
                p = self.index[id(a)]
                if adj[p] is None:
                    adj[p] = ga
                else:
                    adj[p] = adj[p] + ga
        grads = {}
        for name in wrt:
            if name not in self.leaf_info:
                raise KeyError(f"unknown leaf {name!r}")
            total = None
            for pos in self.leaf_pos[name]:
                if adj[pos] is None:
                    continue
                total = adj[pos] if total is None else total + adj[pos]
            grads[name] = (
                total if total is not None else np.zeros(self.leaf_info[name][1])
            )
        values = [np.asarray(vals[p]) for p in self.root_pos]
        return values, grads


def evaluate(expr, bindings):
    """Forward value of `expr` under leaf `bindings`; pure."""
    return Graph(expr).forward(bindings)[0]


def evaluate_many(exprs, bindings):
    """Forward values of several roots sharing common subexpressions."""
    return Graph(*exprs).forward(bindings)


def param_grads(expr, bindings):
    """Gradient of a scalar expression with respect to every parameter leaf."""
    _, grads = Graph(expr).forward_and_grad(bindings)
    return grads


def grad_params(expr, bindings, params=None):
    """Flat gradient over parameter leaves, concatenated in `params` order.

    `params` defaults to sorted parameter-leaf names; models pass their
    canonical flattening order explicitly.
    """
    g = Graph(expr)
    if params is None:
        params = g.param_names()
    _, grads = g.forward_and_grad(bindings, wrt=params)
    if not params:
        return np.zeros(0)
    return np.concatenate([np.ravel(grads[n]) for n in params])


def leaves(expr):
    """Map of leaf name -> (kind, shape) for every leaf in the DAG."""
    return dict(Graph(expr).leaf_info)


# ---------------------------------------------------------------------------
# forward-mode tangents (input derivatives)
# ---------------------------------------------------------------------------

def _tangent(node, wrt, direction, memo):
    key = id(node)
    if key in memo:
        return memo[key]
    t = None
    if node.op == "leaf":
        kind, name = node.payload
        if name == wrt:
            if kind != "input":
                raise ValueError(f"leaf {name!r} is not registered as an input")
            t = direction
    elif node.op == "const":
        t = None
    else:
        args_t = [_tangent(a, wrt, direction, memo) for a in node.args]
        t = _jvp_rule(node, args_t)
    memo[key] = t
    return t


def _jvp_rule(node, dt):
    op = node.op
    a = node.args[0] if node.args else None
    b = node.args[1] if len(node.args) > 1 else None
    da = dt[0] if dt else None
    db = dt[1] if len(dt) > 1 else None

    if op in ("add", "sub"):
        if da is None and db is None:
            return None
        da = da if da is not None else const(np.zeros(a.shape))
        db = db if db is not None else const(np.zeros(b.shape))
        return _binary(op, da, db)
    if op == "mul":
        terms = []
        if da is not None:
            terms.append(da * b)
        if db is not None:
            terms.append(a * db)
        return _sum_terms(terms)
    if op == "div":
        if da is None and db is None:
            return None
        num = []
        if da is not None:
            num.append(da * b)
        if db is not None:
            num.append(-(a * db))
        return _sum_terms(num) / square(b)
    if op == "neg":
        return None if da is None else -da
    if op == "matmul":
        terms = []
        if da is not None:
            terms.append(matmul(da, b))
        if db is not None:
            terms.append(matmul(a, db))
        return _sum_terms(terms)
    if op in ("sum", "mean"):
        if da is None:
            return None
        return Expr(op, (da,), node.shape, node.payload)
    if op == "square":
        return None if da is None else 2.0 * a * da
    if op == "sqrt":
        return None if da is None else da / (2.0 * node)
    if op == "exp":
        return None if da is None else node * da
    if op == "log":
        return None if da is None else da / a
    if op == "sin":
        return None if da is None else cos(a) * da
    if op == "cos":
        return None if da is None else -(sin(a) * da)
    if op == "tanh":
        return None if da is None else (1.0 - square(node)) * da
    if op == "sigmoid":
        return None if da is None else node * (1.0 - node) * da
    if op == "maxc":
        if da is None:
            return None
        mask = Expr("gtc", (a,), a.shape, node.payload)
        return mask * da
    if op == "gtc":
        return None
    if op == "take":
        if da is None:
            return None
        axis, idx = node.payload
        return Expr("take", (da,), node.shape, (axis, idx))
    if op == "reshape":
        return None if da is None else reshape(da, node.shape)
    raise ValueError(f"no tangent rule for op {op!r}")


def _sum_terms(terms):
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def jvp(expr, wrt, direction):
    """Directional-derivative expression of `expr` along `direction` at input leaf `wrt`.

    The result is an ordinary expression over the same leaves, so parameter
    gradients of anything built from it remain available.
    """
    expr = _lift(expr)
    direction = _lift(direction)
    found = leaves(expr).get(str(wrt))
    if found is None or found[0] != "input":
        raise ValueError(f"leaf {wrt!r} is not an input leaf of this expression")
    if direction.shape != found[1]:
        raise ValueError(
            f"direction shape {direction.shape} does not match leaf shape {found[1]}"
        )
    t = _tangent(expr, str(wrt), direction, {})
    if t is None:
        return const(np.zeros(expr.shape))
    return t


def input_derivative(expr, wrt, direction, bindings):
    """Numeric directional derivative with respect to one input leaf."""
    return evaluate(jvp(expr, wrt, direction), bindings)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_check(expr, bindings, h=1e-5, wrt=None):
    """Max relative error of reverse-mode gradients vs central differences.

    Checks every coordinate of every leaf in `wrt` (default: all parameter
    leaves). Relative error uses a 1e-12 absolute floor.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    g = Graph(expr)
    if wrt is None:
        wrt = g.param_names()
    _, grads = g.forward_and_grad(bindings, wrt=wrt)
    worst = 0.0
    work = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    for name in wrt:
        base = work[name]
        flat = base.reshape(-1)
        ad = np.asarray(grads[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(g.forward(work)[0])
            flat[i] = orig - h
            dn = float(g.forward(work)[0])
            flat[i] = orig
            fd = (up - dn) / (2.0 * h)
            err = abs(ad[i] - fd) / (abs(ad[i]) + 1e-12)
            if not np.isfinite(err):
                return np.inf
            worst = max(worst, err)
    return worst
