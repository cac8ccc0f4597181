"""Define-then-run differentiation graph.

A :class:`Graph` is an append-only list of primitive operations. Node values
are float64 arrays with elementwise (broadcasting) semantics, so one graph
evaluates a scalar expression at a whole batch of spatial points at once;
``matmul``, ``sum``, ``mean``, ``take`` and ``concat`` are the linear glue
needed to vectorize networks and losses over points and snapshots.

Two kinds of derivatives are provided:

* input-derivatives -- first and second derivative of outputs with respect to
  the single spatial input ``x``.  :func:`evaluate_with_input_derivatives`
  propagates ``(value, d/dx, d2/dx2)`` triples numerically, while
  :func:`input_derivatives` appends the derivative computation to the graph
  itself so that it can be part of a loss;
* parameter gradients -- reverse mode over the whole graph
  (:func:`parameter_gradient`), which therefore also differentiates through
  appended input-derivative nodes.

Example
-------
>>> g = Graph()
>>> x, w = g.input("x"), g.parameter("w")
>>> (jet,) = input_derivatives(g, [(w * x).tanh()], wrt=x)
>>> loss = (jet.d1 - 0.5) ** 2
>>> grads = parameter_gradient(g, loss, {"x": 0.0, "w": 1.0})
>>> float(grads["w"])
1.0
"""

from dataclasses import dataclass

import numpy as np

from .errors import ArityError, BindingError, DivisionGuardError, UnsupportedOrderError

__all__ = [
    "Graph",
    "Node",
    "DualValue",
    "Jet",
    "evaluate",
    "evaluate_with_input_derivatives",
    "input_derivatives",
    "parameter_gradient",
    "value_and_gradient",
]

DIV_GUARD = 1e-12
MAX_INPUT_ORDER = 2

_LEAVES = ("const", "var")


def _as_array(value):
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim = len(shape)
    if grad.ndim > ndim:
        grad = grad.sum(axis=tuple(range(grad.ndim - ndim)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _guarded(b):
    if np.any(np.abs(b) < DIV_GUARD):
        raise DivisionGuardError(f"denominator magnitude below {DIV_GUARD:g}")
    return b


def _take(a, attr):
    return np.take(a, attr["index"], axis=attr["axis"])


def _concat(vals, attr):
    return np.concatenate(vals, axis=attr["axis"])


def _pow(a, attr):
    n = attr["n"]
    if n < 0:
        _guarded(a)
    return a ** n


# Forward rules; each receives the tuple of operand values and the attrs.
_FORWARD = {
    "add": lambda v, attr: v[0] + v[1],
    "sub": lambda v, attr: v[0] - v[1],
    "mul": lambda v, attr: v[0] * v[1],
    "div": lambda v, attr: v[0] / _guarded(v[1]),
    "neg": lambda v, attr: -v[0],
    "tanh": lambda v, attr: np.tanh(v[0]),
    "pow": lambda v, attr: _pow(v[0], attr),
    "matmul": lambda v, attr: v[0] @ v[1],
    "sum": lambda v, attr: np.sum(v[0], axis=attr["axis"], keepdims=attr["keepdims"]),
    "mean": lambda v, attr: np.mean(v[0]),
    "take": lambda v, attr: _take(v[0], attr),
    "concat": lambda v, attr: _concat(v, attr),
    "fill": lambda v, attr: np.full(np.shape(v[0]), attr["value"]),
    "bcast": lambda v, attr: np.broadcast_to(v[0], np.broadcast_shapes(v[0].shape, v[1].shape)),
}


def _vjp_take(g, v, out, attr):
    a = v[0]
    axis = attr["axis"] % a.ndim
    res = np.zeros(a.shape)
    idx = [slice(None)] * a.ndim
    idx[axis] = attr["index"]
    np.add.at(res, tuple(idx), g)
    return (res,)


def _vjp_concat(g, v, out, attr):
    axis = attr["axis"]
    cuts = np.cumsum([a.shape[axis] for a in v])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _vjp_sum(g, v, out, attr):
    shape = v[0].shape
    axis = attr["axis"]
    if axis is not None and not attr["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape),)


def _vjp_pow(g, v, out, attr):
    n = attr["n"]
    if n == 0:
        return (None,)
    if n == 1:
        return (g,)
    if n == 2:
        return (g * (2.0 * v[0]),)
    return (g * (n * v[0] ** (n - 1)),)


# Reverse rules: (output cotangent, operand values, output value, attrs)
# -> cotangent per operand (None when there is none).
_VJP = {
    "add": lambda g, v, out, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
    "sub": lambda g, v, out, a: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)),
    "mul": lambda g, v, out, a: (
        _unbroadcast(g * v[1], v[0].shape),
        _unbroadcast(g * v[0], v[1].shape),
    ),
    "div": lambda g, v, out, a: (
        _unbroadcast(g / v[1], v[0].shape),
        _unbroadcast(-g * out / v[1], v[1].shape),
    ),
    "neg": lambda g, v, out, a: (-g,),
    "tanh": lambda g, v, out, a: (g * (1.0 - out * out),),
    "pow": _vjp_pow,
    "matmul": lambda g, v, out, a: (g @ v[1].T, v[0].T @ g),
    "sum": _vjp_sum,
    "mean": lambda g, v, out, a: (np.full(v[0].shape, g / max(v[0].size, 1)),),
    "take": _vjp_take,
    "concat": _vjp_concat,
    "fill": lambda g, v, out, a: (None,),
    "bcast": lambda g, v, out, a: (_unbroadcast(g, v[0].shape), None),
}


def _infer_shape(op, shapes, attr):
    if any(sh is None for sh in shapes):
        return None
    try:
        if op in ("add", "sub", "mul", "div", "bcast"):
            return tuple(np.broadcast_shapes(*shapes))
        if op in ("neg", "tanh", "pow", "fill"):
            return shapes[0]
        if op == "matmul":
            a, b = shapes
            return (a[0], b[1]) if len(a) == 2 and len(b) == 2 else None
        if op == "mean":
            return ()
        if op == "sum":
            return tuple(np.sum(np.empty(shapes[0]), axis=attr["axis"], keepdims=attr["keepdims"]).shape)
        if op == "take":
            sh = list(shapes[0])
            sh[attr["axis"]] = len(attr["index"])
            return tuple(sh)
        if op == "concat":
            sh = list(shapes[0])
            sh[attr["axis"]] = sum(x[attr["axis"]] for x in shapes)
            return tuple(sh)
    except ValueError:
        return None
    return None


class Node:
    """Handle to one node of a :class:`Graph` with operator overloading."""

    __slots__ = ("graph", "id")
    __array_priority__ = 1000

    def __init__(self, graph, id):
        self.graph = graph
        self.id = id

    def __repr__(self):
        return f"Node({self.id}, {self.graph.op(self.id)!r})"

    @property
    def op(self):
        return self.graph.op(self.id)

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __truediv__(self, other):
        return self.graph.div(self, other)

    def __rtruediv__(self, other):
        return self.graph.div(other, self)

    def __neg__(self):
        return self.graph.neg(self)

    def __pow__(self, n):
        return self.graph.pow(self, n)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __rmatmul__(self, other):
        return self.graph.matmul(other, self)

    def tanh(self):
        return self.graph.tanh(self)

    def sum(self, axis=None, keepdims=False):
        return self.graph.sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return self.graph.mean(self)

    def take(self, index, axis=-1):
        return self.graph.take(self, index, axis=axis)


@dataclass(frozen=True)
class DualValue:
    """Value of an output together with its first two derivatives in ``x``."""

    value: np.ndarray
    d_dx: np.ndarray
    d2_dx2: np.ndarray


@dataclass(frozen=True)
class Jet:
    """Graph nodes for an output and its input-derivatives (``None`` = zero)."""

    value: Node
    d1: Node = None
    d2: Node = None


class Graph:
    """Append-only computation graph.

    Nodes are created through the methods below (or the operators of
    :class:`Node`) and always reference earlier nodes, so the node list is a
    topological order.  Operations whose operands are all constants are folded
    at construction time.
    """

    def __init__(self):
        self._ops = []
        self._args = []
        self._attrs = []
        self._shapes = []
        self._consts = {}
        self._var_ids = {}
        self._roles = {}
        self._plans = {}

    def __len__(self):
        return len(self._ops)

    # -- construction ---------------------------------------------------------

    def _append(self, op, args=(), attr=None, shape=None):
        self._ops.append(op)
        self._args.append(tuple(args))
        self._attrs.append(attr)
        if shape is None and op not in _LEAVES:
            shape = _infer_shape(op, [self._shapes[a] for a in args], attr)
        self._shapes.append(shape)
        return Node(self, len(self._ops) - 1)

    def shape(self, node):
        """Static shape of ``node`` or ``None`` when it depends on unshaped variables."""
        return self._shapes[node.id]

    def op(self, node_id):
        return self._ops[node_id]

    def args(self, node_id):
        return self._args[node_id]

    def constant(self, value):
        value = _as_array(value)
        node = self._append("const", shape=value.shape)
        self._consts[node.id] = value
        return node

    def _variable(self, name, role, shape):
        if name in self._var_ids:
            raise ValueError(f"variable {name!r} already defined")
        shape = None if shape is None else tuple(shape)
        node = self._append("var", attr={"name": name}, shape=shape)
        self._var_ids[name] = node.id
        self._roles[name] = role
        return node

    def parameter(self, name, shape=None):
        """Declare a trainable variable (reported by :func:`parameter_gradient`).

        A declared ``shape`` lets derivative construction skip broadcasting
        nodes; bindings must then have exactly that shape.
        """
        return self._variable(name, "parameter", shape)

    def input(self, name, shape=None):
        """Declare a non-trainable variable (spatial input, data, masks)."""
        return self._variable(name, "input", shape)

    def variable(self, name):
        return Node(self, self._var_ids[name])

    @property
    def parameters(self):
        return [n for n, r in self._roles.items() if r == "parameter"]

    @property
    def inputs(self):
        return [n for n, r in self._roles.items() if r == "input"]

    def is_constant(self, node):
        return self._ops[node.id] == "const"

    def constant_value(self, node):
        return self._consts[node.id]

    def _lift(self, x):
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to another graph")
            return x
        return self.constant(x)

    def _make(self, op, operands, attr=None):
        operands = [self._lift(o) for o in operands]
        if all(self._ops[o.id] == "const" for o in operands):
            vals = tuple(self._consts[o.id] for o in operands)
            return self.constant(_FORWARD[op](vals, attr))
        return self._append(op, [o.id for o in operands], attr)

    def add(self, a, b):
        return self._make("add", (a, b))

    def sub(self, a, b):
        return self._make("sub", (a, b))

    def mul(self, a, b):
        return self._make("mul", (a, b))

    def div(self, a, b):
        return self._make("div", (a, b))

    def neg(self, a):
        return self._make("neg", (a,))

    def tanh(self, a):
        return self._make("tanh", (a,))

    def pow(self, a, n):
        if int(n) != n:
            raise ValueError("only integer powers are supported")
        return self._make("pow", (a,), {"n": int(n)})

    def matmul(self, a, b):
        return self._make("matmul", (a, b))

    def sum(self, a, axis=None, keepdims=False):
        return self._make("sum", (a,), {"axis": axis, "keepdims": keepdims})

    def mean(self, a):
        return self._make("mean", (a,))

    def take(self, a, index, axis=-1):
        return self._make("take", (a,), {"index": np.asarray(index, dtype=np.intp), "axis": axis})

    def concat(self, parts, axis=0):
        return self._make("concat", tuple(parts), {"axis": axis})

    def fill_like(self, a, value):
        """Array of ``value`` with the runtime shape of ``a`` (not differentiable)."""
        return self._make("fill", (a,), {"value": float(value)})

    def broadcast_like(self, d, a):
        """``d`` broadcast against the shape of ``a``; a no-op when shapes are known equal."""
        sd, sa = self._shapes[d.id], self._shapes[a.id]
        if sd is not None and sa is not None and np.broadcast_shapes(sd, sa) == sd:
            return d
        return self._make("bcast", (d, a))

    # -- planning -------------------------------------------------------------

    def _ancestors(self, out_ids):
        seen = set()
        stack = list(out_ids)
        while stack:
            i = stack.pop()
            if i in seen:
                continue
            seen.add(i)
            stack.extend(self._args[i])
        return sorted(seen)

    def _plan(self, out_ids, wrt=None):
        key = (tuple(out_ids), wrt, len(self._ops))
        plan = self._plans.get(key)
        if plan is not None:
            return plan
        order = self._ancestors(out_ids)
        forward = []
        needed_vars = []
        for i in order:
            op = self._ops[i]
            if op == "var":
                needed_vars.append((i, self._attrs[i]["name"]))
            elif op != "const":
                forward.append((i, _FORWARD[op], self._args[i], self._attrs[i]))
        backward = None
        if wrt is not None:
            wrt_ids = {self._var_ids[n] for n in wrt}
            live = set()
            for i in order:
                op = self._ops[i]
                if i in wrt_ids or (op != "fill" and any(a in live for a in self._args[i][:1 if op == "bcast" else None])):
                    live.add(i)
            backward = [
                (i, _VJP[self._ops[i]], self._args[i], self._attrs[i],
                 tuple(a in live for a in self._args[i]))
                for i in reversed(order)
                if i in live and self._ops[i] not in _LEAVES
            ]
        plan = (forward, needed_vars, backward)
        self._plans[key] = plan
        return plan

    def _run_forward(self, out_ids, bindings, wrt=None):
        forward, needed_vars, backward = self._plan(out_ids, wrt)
        vals = dict(self._consts)
        for i, name in needed_vars:
            try:
                vals[i] = _as_array(bindings[name])
            except KeyError:
                raise BindingError(f"variable {name!r} is not bound") from None
        for i, fn, args, attr in forward:
            vals[i] = fn(tuple(vals[a] for a in args), attr)
        return vals, backward


def _node_ids(outputs):
    return [o.id for o in outputs]


def evaluate(graph, outputs, bindings):
    """Values of ``outputs`` (a node or list of nodes) under ``bindings``."""
    single = isinstance(outputs, Node)
    outs = [outputs] if single else list(outputs)
    vals, _ = graph._run_forward(_node_ids(outs), bindings)
    res = [vals[o.id] for o in outs]
    return res[0] if single else res


def _resolve_wrt(graph, wrt):
    if wrt is None:
        return tuple(graph.parameters)
    if isinstance(wrt, str):
        return (wrt,)
    return tuple(n.graph._attrs[n.id]["name"] if isinstance(n, Node) else n for n in wrt)


def value_and_gradient(graph, loss, bindings, wrt=None, aux=None):
    """Scalar value of ``loss`` and its reverse-mode gradient.

    ``wrt`` defaults to every parameter of the graph; the gradient is a dict
    from variable name to an array shaped like the binding.  When ``aux`` lists
    further nodes, their values from the same forward pass are returned as a
    third element.
    """
    if not isinstance(loss, Node):
        raise ArityError("parameter_gradient needs exactly one output node")
    names = _resolve_wrt(graph, wrt)
    for n in names:
        if n not in graph._var_ids:
            raise BindingError(f"unknown variable {n!r}")
    aux_ids = [] if aux is None else _node_ids(aux)
    vals, backward = graph._run_forward([loss.id] + aux_ids, bindings, wrt=names)
    out = vals[loss.id]
    if out.size != 1:
        raise ArityError(f"loss must be scalar, got shape {out.shape}")
    grads = {loss.id: np.ones_like(out)} if backward else {}
    for i, vjp, args, attr, mask in backward:
        g = grads.pop(i, None)
        if g is None:
            continue
        contribs = vjp(g, tuple(vals[a] for a in args), vals[i], attr)
        for a, c, live in zip(args, contribs, mask):
            if not live or c is None:
                continue
            prev = grads.get(a)
            grads[a] = c if prev is None else prev + c
    result = {}
    for n in names:
        i = graph._var_ids[n]
        shape = np.shape(bindings[n]) if n in bindings else ()
        g = grads.get(i)
        result[n] = np.zeros(shape) if g is None else np.reshape(g, shape)
    if aux is not None:
        return float(out.reshape(())), result, [vals[i] for i in aux_ids]
    return float(out.reshape(())), result


def parameter_gradient(graph, loss, bindings, wrt=None):
    """Reverse-mode gradient of the scalar ``loss`` node (see :func:`value_and_gradient`)."""
    if isinstance(loss, (list, tuple)):
        if len(loss) != 1:
            raise ArityError(f"expected a single scalar output, got {len(loss)}")
        loss = loss[0]
    return value_and_gradient(graph, loss, bindings, wrt)[1]


# -- input derivatives --------------------------------------------------------


def _check_order(order):
    if order not in (0, 1, 2):
        raise UnsupportedOrderError(
            f"input-derivative order {order} not supported (max {MAX_INPUT_ORDER})"
        )


def evaluate_with_input_derivatives(graph, outputs, bindings, wrt="x", order=2):
    """Forward-propagate ``(value, d/dx, d2/dx2)`` through the graph.

    Returns one :class:`DualValue` per output.  ``wrt`` names the spatial
    input variable; every other variable is treated as constant in ``x``.
    """
    _check_order(order)
    single = isinstance(outputs, Node)
    outs = [outputs] if single else list(outputs)
    name = wrt if isinstance(wrt, str) else graph._attrs[wrt.id]["name"]
    if name not in graph._var_ids:
        raise BindingError(f"unknown input variable {name!r}")
    x_id = graph._var_ids[name]
    vals, _ = graph._run_forward(_node_ids(outs), bindings)
    d1, d2 = {}, {}
    for i in graph._ancestors(_node_ids(outs)):
        op = graph._ops[i]
        if op in _LEAVES:
            if i == x_id:
                d1[i] = np.ones_like(vals[i])
            continue
        args = graph._args[i]
        av = [vals[a] for a in args]
        a1 = [d1.get(a) for a in args]
        a2 = [d2.get(a) for a in args]
        if all(v is None for v in a1) and all(v is None for v in a2):
            continue
        r1, r2 = _numeric_jet_rule(op, graph._attrs[i], av, a1, a2, vals[i])
        if r1 is not None:
            d1[i] = r1
        if r2 is not None:
            d2[i] = r2
    res = []
    for o in outs:
        v = vals[o.id]
        g1 = d1.get(o.id) if order >= 1 else None
        g2 = d2.get(o.id) if order >= 2 else None
        res.append(DualValue(
            v,
            np.zeros_like(v) if g1 is None else np.broadcast_to(g1, v.shape).copy(),
            np.zeros_like(v) if g2 is None else np.broadcast_to(g2, v.shape).copy(),
        ))
    return res[0] if single else res


def _z(x, like):
    return np.zeros_like(like) if x is None else x


def _numeric_jet_rule(op, attr, v, d1, d2, out):
    if op == "add":
        return _nsum(d1[0], d1[1]), _nsum(d2[0], d2[1])
    if op == "sub":
        return _nsum(d1[0], _nneg(d1[1])), _nsum(d2[0], _nneg(d2[1]))
    if op == "neg":
        return _nneg(d1[0]), _nneg(d2[0])
    if op in ("mul", "matmul"):
        f = np.multiply if op == "mul" else np.matmul
        a, b = v
        if op == "matmul":
            d1 = [None if d is None else np.broadcast_to(d, x.shape) for d, x in zip(d1, v)]
            d2 = [None if d is None else np.broadcast_to(d, x.shape) for d, x in zip(d2, v)]
        r1 = _nsum(_nf(f, d1[0], b), _nf(f, a, d1[1]))
        r2 = _nsum(_nsum(_nf(f, d2[0], b), _nf(f, a, d2[1])), _nscale(2.0, _nf(f, d1[0], d1[1])))
        return r1, r2
    if op == "div":
        b = v[1]
        q1 = _nsum(d1[0], _nneg(_nf(np.multiply, out, d1[1])))
        q1 = None if q1 is None else q1 / b
        t = _nsum(d2[0], _nneg(_nscale(2.0, _nf(np.multiply, q1, d1[1]))))
        t = _nsum(t, _nneg(_nf(np.multiply, out, d2[1])))
        return q1, None if t is None else t / b
    if op == "tanh":
        s = 1.0 - out * out
        r1 = None if d1[0] is None else s * d1[0]
        inner = d2[0]
        if d1[0] is not None:
            inner = _nsum(inner, -2.0 * out * d1[0] * d1[0])
        return r1, None if inner is None else s * inner
    if op == "pow":
        n = attr["n"]
        if n == 0:
            return None, None
        a = v[0]
        c1 = n * a ** (n - 1)
        r1 = None if d1[0] is None else c1 * d1[0]
        r2 = None if d2[0] is None else c1 * d2[0]
        if d1[0] is not None and n >= 2:
            r2 = _nsum(r2, n * (n - 1) * a ** (n - 2) * d1[0] * d1[0])
        return r1, r2
    if op in ("sum", "mean", "take"):
        f = _FORWARD[op]
        return (None if d1[0] is None else f((np.broadcast_to(d1[0], v[0].shape),), attr),
                None if d2[0] is None else f((np.broadcast_to(d2[0], v[0].shape),), attr))
    if op == "concat":
        if all(d is None for d in d1):
            r1 = None
        else:
            r1 = _concat([np.broadcast_to(_z(d, a), a.shape) for d, a in zip(d1, v)], attr)
        if all(d is None for d in d2):
            r2 = None
        else:
            r2 = _concat([np.broadcast_to(_z(d, a), a.shape) for d, a in zip(d2, v)], attr)
        return r1, r2
    if op == "bcast":
        return (None if d1[0] is None else np.broadcast_to(d1[0], out.shape),
                None if d2[0] is None else np.broadcast_to(d2[0], out.shape))
    if op == "fill":
        return None, None
    raise UnsupportedOrderError(f"no input-derivative rule for {op!r}")


def _nsum(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _nneg(a):
    return None if a is None else -a


def _nscale(c, a):
    return None if a is None else c * a


def _nf(f, a, b):
    if a is None or b is None:
        return None
    return f(a, b)


def input_derivatives(graph, outputs, wrt, order=2):
    """Append nodes computing d/dx and d2/dx2 of ``outputs`` to the graph.

    Returns one :class:`Jet` per output whose ``d1``/``d2`` are ordinary graph
    nodes (zero derivatives are materialized with ``fill_like``), so a loss
    built from them is differentiable by :func:`parameter_gradient`.
    """
    _check_order(order)
    single = isinstance(outputs, Node)
    outs = [outputs] if single else list(outputs)
    x = wrt if isinstance(wrt, Node) else Node(graph, graph._var_ids[wrt])
    d1, d2 = {}, {}
    for i in graph._ancestors(_node_ids(outs)):
        op = graph._ops[i]
        if op in _LEAVES:
            if i == x.id:
                d1[i] = graph.fill_like(x, 1.0)
            continue
        args = graph._args[i]
        a1 = [d1.get(a) for a in args]
        a2 = [d2.get(a) for a in args] if order >= 2 else [None] * len(args)
        if all(v is None for v in a1) and all(v is None for v in a2):
            continue
        r1, r2 = _symbolic_jet_rule(graph, op, graph._attrs[i], i, args, a1, a2, order)
        if r1 is not None:
            d1[i] = r1
        if r2 is not None:
            d2[i] = r2
    jets = []
    for o in outs:
        j1 = d1.get(o.id) if order >= 1 else None
        j2 = d2.get(o.id) if order >= 2 else None
        jets.append(Jet(
            o,
            None if order < 1 else (j1 if j1 is not None else graph.fill_like(o, 0.0)),
            None if order < 2 else (j2 if j2 is not None else graph.fill_like(o, 0.0)),
        ))
    return jets[0] if single else jets


def _gsum(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _gmul(a, b, f):
    if a is None or b is None:
        return None
    return f(a, b)


def _symbolic_jet_rule(g, op, attr, i, args, d1, d2, order):
    node = Node(g, i)
    operands = [Node(g, a) for a in args]
    if op == "add":
        return _gsum(d1[0], d1[1]), _gsum(d2[0], d2[1])
    if op == "sub":
        neg1 = None if d1[1] is None else -d1[1]
        neg2 = None if d2[1] is None else -d2[1]
        return _gsum(d1[0], neg1), _gsum(d2[0], neg2)
    if op == "neg":
        return (None if d1[0] is None else -d1[0]), (None if d2[0] is None else -d2[0])
    if op in ("mul", "matmul"):
        f = g.mul if op == "mul" else g.matmul
        a, b = operands
        if op == "matmul":
            d1 = [None if d is None else g.broadcast_like(d, o) for d, o in zip(d1, operands)]
            d2 = [None if d is None else g.broadcast_like(d, o) for d, o in zip(d2, operands)]
        r1 = _gsum(_gmul(d1[0], b, f), _gmul(a, d1[1], f))
        r2 = None
        if order >= 2:
            cross = _gmul(d1[0], d1[1], f)
            r2 = _gsum(_gsum(_gmul(d2[0], b, f), _gmul(a, d2[1], f)),
                       None if cross is None else 2.0 * cross)
        return r1, r2
    if op == "div":
        b = operands[1]
        num = _gsum(d1[0], None if d1[1] is None else -(node * d1[1]))
        q1 = None if num is None else num / b
        r2 = None
        if order >= 2:
            t = d2[0]
            if q1 is not None and d1[1] is not None:
                t = _gsum(t, -(2.0 * (q1 * d1[1])))
            if d2[1] is not None:
                t = _gsum(t, -(node * d2[1]))
            r2 = None if t is None else t / b
        return q1, r2
    if op == "tanh":
        s = 1.0 - node * node
        r1 = None if d1[0] is None else s * d1[0]
        r2 = None
        if order >= 2:
            inner = d2[0]
            if d1[0] is not None:
                inner = _gsum(inner, -2.0 * (node * (d1[0] * d1[0])))
            r2 = None if inner is None else s * inner
        return r1, r2
    if op == "pow":
        n = attr["n"]
        if n == 0:
            return None, None
        a = operands[0]
        c1 = float(n) if n == 1 else n * a ** (n - 1)
        r1 = None if d1[0] is None else c1 * d1[0]
        r2 = None
        if order >= 2:
            r2 = None if d2[0] is None else c1 * d2[0]
            if d1[0] is not None and n >= 2:
                c2 = float(n * (n - 1)) if n == 2 else n * (n - 1) * a ** (n - 2)
                r2 = _gsum(r2, c2 * (d1[0] * d1[0]))
        return r1, r2
    if op in ("sum", "mean", "take"):
        def lin(d):
            if d is None:
                return None
            return g._make(op, (g.broadcast_like(d, operands[0]),), attr)
        return lin(d1[0]), lin(d2[0])
    if op == "concat":
        def lin(ds):
            if all(d is None for d in ds):
                return None
            parts = [g.fill_like(o, 0.0) if d is None else g.broadcast_like(d, o)
                     for d, o in zip(ds, operands)]
            return g.concat(parts, axis=attr["axis"])
        return lin(d1), lin(d2)
    if op == "fill":
        return None, None
    raise UnsupportedOrderError(f"no input-derivative rule for {op!r}")
