"""Scalar expression DAG with reverse-mode differentiation and CSE.

Graphs are append-only: every node refers only to earlier nodes, so the node
list is always in topological order. Construction applies cheap exact local
simplifications (constant folding, x+0, x*1, ...) but never deduplicates
non-constant structure; :func:`cse` does that as a separate pass so the
as-built graph remains a meaningful "naive expansion" baseline.
"""

import math
import struct

__all__ = [
    "ExprGraph", "Expr", "GraphError", "EvalDomainError", "CseResult",
    "differentiate", "cse", "eval_graph", "eval_dual", "DualNumber",
    "expansion_size",
    "sin", "cos", "exp", "log", "sqrt",
]

# Op codes, shared with the compiled tape.
OP_CONST = 0
OP_INPUT = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_NEG = 6
OP_SIN = 7
OP_COS = 8
OP_EXP = 9
OP_LOG = 10
OP_POWI = 11
OP_SQRT = 12

OP_NAMES = {
    OP_CONST: "const", OP_INPUT: "input", OP_ADD: "add", OP_SUB: "sub",
    OP_MUL: "mul", OP_DIV: "div", OP_NEG: "neg", OP_SIN: "sin",
    OP_COS: "cos", OP_EXP: "exp", OP_LOG: "log", OP_POWI: "powi",
    OP_SQRT: "sqrt",
}

BINARY_OPS = (OP_ADD, OP_SUB, OP_MUL, OP_DIV)
UNARY_OPS = (OP_NEG, OP_SIN, OP_COS, OP_EXP, OP_LOG, OP_SQRT)

# Evaluation-domain guards. Shared by every evaluator (python graph walk,
# dual numbers, constant folding, compiled tape) so they fail identically.
DIV_GUARD = 1e-300


class GraphError(ValueError):
    """Structural misuse of a graph (duplicate symbol, foreign node, ...)."""


class EvalDomainError(ArithmeticError):
    """Evaluation hit a guarded domain error (division by ~0, log(x<=0), sqrt(x<0))."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


def _const_key(value):
    # Bit-exact key: distinguishes -0.0 from 0.0 and is hashable for NaN.
    return struct.pack("<d", value)


class Expr:
    """Handle to one node of an :class:`ExprGraph`; supports arithmetic operators."""

    __slots__ = ("graph", "idx")

    def __init__(self, graph, idx):
        self.graph = graph
        self.idx = idx

    def _coerce(self, other):
        if isinstance(other, Expr):
            if other.graph is not self.graph:
                raise GraphError("operands belong to different graphs")
            return other
        return self.graph.const(float(other))

    def __add__(self, other):
        return self.graph._binary(OP_ADD, self, self._coerce(other))

    def __radd__(self, other):
        return self._coerce(other).__add__(self)

    def __sub__(self, other):
        return self.graph._binary(OP_SUB, self, self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        return self.graph._binary(OP_MUL, self, self._coerce(other))

    def __rmul__(self, other):
        return self._coerce(other).__mul__(self)

    def __truediv__(self, other):
        return self.graph._binary(OP_DIV, self, self._coerce(other))

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        return self.graph._unary(OP_NEG, self)

    def __pow__(self, exponent):
        if not isinstance(exponent, int):
            raise GraphError("pow is restricted to integer exponents; use exp/log otherwise")
        return self.graph.powi(self, exponent)

    def __repr__(self):
        g = self.graph
        op = g.ops[self.idx]
        if op == OP_INPUT:
            return f"Expr({g.input_name(self.idx)!r}@{self.idx})"
        if op == OP_CONST:
            return f"Expr({g.vals[self.idx]!r}@{self.idx})"
        return f"Expr({OP_NAMES[op]}@{self.idx})"


class ExprGraph:
    """Append-only scalar expression DAG.

    Node storage is four parallel lists: op code, operand indices a/b
    (b doubles as the integer exponent of powi), and the constant value
    (consts only). Input nodes carry their symbol name in ``inputs``.
    """

    def __init__(self):
        self.ops = []
        self.a = []
        self.b = []
        self.vals = []
        self.inputs = {}          # name -> node index
        self._input_names = {}    # node index -> name
        self._const_cache = {}    # value bits -> node index

    def __len__(self):
        return len(self.ops)

    @property
    def n_nodes(self):
        return len(self.ops)

    def input_name(self, idx):
        return self._input_names[idx]

    def is_input(self, e):
        return self.ops[e.idx] == OP_INPUT

    def _emit(self, op, a=-1, b=-1, val=0.0):
        self.ops.append(op)
        self.a.append(a)
        self.b.append(b)
        self.vals.append(val)
        return Expr(self, len(self.ops) - 1)

    def symbol(self, name):
        """Register a named input node. Duplicate names are rejected."""
        if not isinstance(name, str) or not name:
            raise GraphError("symbol name must be a non-empty string")
        if name in self.inputs:
            raise GraphError(f"duplicate symbol {name!r}")
        e = self._emit(OP_INPUT)
        self.inputs[name] = e.idx
        self._input_names[e.idx] = name
        return e

    def const(self, value):
        value = float(value)
        key = _const_key(value)
        idx = self._const_cache.get(key)
        if idx is not None:
            return Expr(self, idx)
        e = self._emit(OP_CONST, val=value)
        self._const_cache[key] = e.idx
        return e

    def _is_const(self, e, value=None):
        if self.ops[e.idx] != OP_CONST:
            return False
        return value is None or self.vals[e.idx] == value

    # -- construction-time local simplification ---------------------------
    # Exact identities only; anything stronger belongs to cse().

    def _binary(self, op, x, y):
        if self._is_const(x) and self._is_const(y):
            folded = _try_fold(op, self.vals[x.idx], self.vals[y.idx])
            if folded is not None:
                return self.const(folded)
        if op == OP_ADD:
            if self._is_const(x, 0.0):
                return y
            if self._is_const(y, 0.0):
                return x
        elif op == OP_SUB:
            if self._is_const(y, 0.0):
                return x
            if self._is_const(x, 0.0):
                return self._unary(OP_NEG, y)
        elif op == OP_MUL:
            if self._is_const(x, 0.0) or self._is_const(y, 0.0):
                return self.const(0.0)
            if self._is_const(x, 1.0):
                return y
            if self._is_const(y, 1.0):
                return x
        elif op == OP_DIV:
            if self._is_const(y, 1.0):
                return x
            if self._is_const(x, 0.0):
                return self.const(0.0)
        return self._emit(op, x.idx, y.idx)

    def _unary(self, op, x):
        if self._is_const(x):
            folded = _try_fold(op, self.vals[x.idx])
            if folded is not None:
                return self.const(folded)
        if op == OP_NEG and self.ops[x.idx] == OP_NEG:
            return Expr(self, self.a[x.idx])
        return self._emit(op, x.idx)

    def powi(self, x, exponent):
        """x ** n for integer n, stored as a single node."""
        if not isinstance(exponent, int):
            raise GraphError("powi exponent must be an int")
        if exponent == 0:
            return self.const(1.0)
        if exponent == 1:
            return x
        if self._is_const(x):
            folded = _try_fold(OP_POWI, self.vals[x.idx], exponent)
            if folded is not None:
                return self.const(folded)
        return self._emit(OP_POWI, x.idx, exponent)

    def sin(self, x):
        return self._unary(OP_SIN, x)

    def cos(self, x):
        return self._unary(OP_COS, x)

    def exp(self, x):
        return self._unary(OP_EXP, x)

    def log(self, x):
        return self._unary(OP_LOG, x)

    def sqrt(self, x):
        return self._unary(OP_SQRT, x)

    def node_tuple(self, idx):
        return (self.ops[idx], self.a[idx], self.b[idx], self.vals[idx])


def sin(x):
    return x.graph.sin(x)


def cos(x):
    return x.graph.cos(x)


def exp(x):
    return x.graph.exp(x)


def log(x):
    return x.graph.log(x)


def sqrt(x):
    return x.graph.sqrt(x)


def _apply_op(op, x, y=0.0, node=None):
    """One node's arithmetic. Single source of truth for evaluation semantics."""
    if op == OP_ADD:
        return x + y
    if op == OP_SUB:
        return x - y
    if op == OP_MUL:
        return x * y
    if op == OP_DIV:
        if abs(y) < DIV_GUARD:
            raise EvalDomainError(f"division guard tripped (|denominator|={abs(y):.3e})", node)
        return x / y
    if op == OP_NEG:
        return -x
    if op == OP_SIN:
        try:
            return math.sin(x)
        except ValueError:       # sin(inf): IEEE says nan, CPython raises
            return math.nan
    if op == OP_COS:
        try:
            return math.cos(x)
        except ValueError:
            return math.nan
    if op == OP_EXP:
        try:
            return math.exp(x)
        except OverflowError:    # exp overflow: IEEE says inf, CPython raises
            return math.inf
    if op == OP_LOG:
        if x <= 0.0:
            raise EvalDomainError(f"log of non-positive argument ({x!r})", node)
        return math.log(x)
    if op == OP_SQRT:
        if x < 0.0:
            raise EvalDomainError(f"sqrt of negative argument ({x!r})", node)
        return math.sqrt(x)
    if op == OP_POWI:
        n = int(y)
        r = 1.0
        for _ in range(abs(n)):
            r *= x
        if n < 0:
            if abs(r) < DIV_GUARD:
                raise EvalDomainError("powi with negative exponent hit division guard", node)
            r = 1.0 / r
        return r
    raise GraphError(f"cannot evaluate op {op}")


def _try_fold(op, x, y=0.0):
    """Constant folding; returns None when the fold would hit a domain guard."""
    try:
        return _apply_op(op, x, y)
    except EvalDomainError:
        return None


def _live_set(graph, roots):
    """Indices reachable from the given root indices (iterative DFS)."""
    live = set()
    stack = list(roots)
    while stack:
        i = stack.pop()
        if i in live:
            continue
        live.add(i)
        op = graph.ops[i]
        if op in BINARY_OPS:
            stack.append(graph.a[i])
            stack.append(graph.b[i])
        elif op in UNARY_OPS or op == OP_POWI:
            stack.append(graph.a[i])
    return live


def eval_graph(graph, outputs, inputs):
    """Recursively evaluate graph nodes at the given input binding.

    Every live node is computed exactly once per call. This is the semantic
    reference the compiled tape is held bitwise-equal to, and the "naive"
    benchmark baseline.

    Args:
        outputs: sequence of Expr handles into ``graph``.
        inputs: mapping symbol name -> float; must bind every live input.

    Returns:
        list of floats, one per output.
    """
    for e in outputs:
        if e.graph is not graph:
            raise GraphError("output node does not belong to this graph")
    values = {}
    for name, idx in graph.inputs.items():
        if name in inputs:
            values[idx] = float(inputs[name])
    ops, aa, bb, vals = graph.ops, graph.a, graph.b, graph.vals
    for root in outputs:
        stack = [root.idx]
        while stack:
            i = stack[-1]
            if i in values:
                stack.pop()
                continue
            op = ops[i]
            if op == OP_CONST:
                values[i] = vals[i]
                stack.pop()
            elif op == OP_INPUT:
                raise GraphError(f"unbound input symbol {graph.input_name(i)!r}")
            elif op in BINARY_OPS:
                a, b = aa[i], bb[i]
                if a in values and b in values:
                    values[i] = _apply_op(op, values[a], values[b], node=i)
                    stack.pop()
                else:
                    if a not in values:
                        stack.append(a)
                    if b not in values:
                        stack.append(b)
            elif op == OP_POWI:
                a = aa[i]
                if a in values:
                    values[i] = _apply_op(op, values[a], bb[i], node=i)
                    stack.pop()
                else:
                    stack.append(a)
            else:
                a = aa[i]
                if a in values:
                    values[i] = _apply_op(op, values[a], node=i)
                    stack.pop()
                else:
                    stack.append(a)
    return [values[e.idx] for e in outputs]


def expansion_size(graph, outputs):
    """Node count of the fully-expanded (sharing-free) form of ``outputs``.

    Counts what the expression forest would hold if every shared
    subexpression were copied at each use, one standalone tree per output:
    the size a per-entry symbolic expansion would have. Grows exponentially
    with reuse depth, which is exactly what it is meant to demonstrate.
    """
    live = sorted(_live_set(graph, [e.idx for e in outputs]))
    size = {}
    ops, aa, bb = graph.ops, graph.a, graph.b
    for i in live:
        op = ops[i]
        if op in (OP_CONST, OP_INPUT):
            size[i] = 1
        elif op in BINARY_OPS:
            size[i] = 1 + size[aa[i]] + size[bb[i]]
        else:
            size[i] = 1 + size[aa[i]]
    return sum(size[e.idx] for e in outputs)


# -- reverse-mode differentiation ------------------------------------------

def differentiate(output, wrt):
    """Reverse-mode derivatives d(output)/d(w) for each w in ``wrt``.

    New nodes expressing the derivatives are appended to the output's own
    graph, sharing the original subexpressions. Returns one Expr per entry
    of ``wrt`` (a literal zero node where the output does not depend on it).
    """
    graph = output.graph
    for w in wrt:
        if w.graph is not graph:
            raise GraphError("wrt node does not belong to the output's graph")
        if graph.ops[w.idx] != OP_INPUT:
            raise GraphError("can only differentiate with respect to input symbols")

    ops, aa, bb = graph.ops, graph.a, graph.b
    live = _live_set(graph, [output.idx])
    zero = graph.const(0.0)
    adj = {output.idx: graph.const(1.0)}

    for i in sorted(live, reverse=True):
        g = adj.get(i)
        if g is None:
            continue
        op = ops[i]
        if op in (OP_CONST, OP_INPUT):
            continue
        a = aa[i]
        node = Expr(graph, i)
        ea = Expr(graph, a)
        if op == OP_ADD:
            _accumulate(adj, a, g)
            _accumulate(adj, bb[i], g)
        elif op == OP_SUB:
            _accumulate(adj, a, g)
            _accumulate(adj, bb[i], -g)
        elif op == OP_MUL:
            b = bb[i]
            _accumulate(adj, a, g * Expr(graph, b))
            _accumulate(adj, b, g * ea)
        elif op == OP_DIV:
            b = bb[i]
            eb = Expr(graph, b)
            _accumulate(adj, a, g / eb)
            # d(a/b)/db = -(a/b)/b, reusing the quotient node itself
            _accumulate(adj, b, -(g * node / eb))
        elif op == OP_NEG:
            _accumulate(adj, a, -g)
        elif op == OP_SIN:
            _accumulate(adj, a, g * graph.cos(ea))
        elif op == OP_COS:
            _accumulate(adj, a, -(g * graph.sin(ea)))
        elif op == OP_EXP:
            _accumulate(adj, a, g * node)  # reuse exp(x)
        elif op == OP_LOG:
            _accumulate(adj, a, g / ea)
        elif op == OP_SQRT:
            _accumulate(adj, a, g / (graph.const(2.0) * node))  # reuse sqrt(x)
        elif op == OP_POWI:
            n = bb[i]
            _accumulate(adj, a, g * (graph.const(float(n)) * graph.powi(ea, n - 1)))
        else:
            raise GraphError(f"no derivative rule for op {op}")

    return [adj.get(w.idx, zero) for w in wrt]


def _accumulate(adj, idx, contribution):
    prior = adj.get(idx)
    adj[idx] = contribution if prior is None else prior + contribution


# -- common-subexpression elimination ----------------------------------------

class CseResult:
    """CSE output: the deduplicated graph plus the old->new index map."""

    __slots__ = ("graph", "index_map")

    def __init__(self, graph, index_map):
        self.graph = graph
        self.index_map = index_map

    def remap(self, expr):
        return Expr(self.graph, self.index_map[expr.idx])


def cse(graph):
    """Structural dedup + constant folding. Values are preserved bitwise.

    No re-association or distribution happens here; two nodes merge only if
    they have identical (op, operand) tuples after their operands merged.
    Nodes whose operands all fold to constants are folded (unless the fold
    would trip a domain guard, in which case the node is kept).
    """
    out = ExprGraph()
    index_map = [0] * len(graph)
    seen = {}  # structural key -> new index
    ops, aa, bb, vals = graph.ops, graph.a, graph.b, graph.vals
    for i in range(len(graph)):
        op = ops[i]
        if op == OP_INPUT:
            e = out.symbol(graph.input_name(i))
            index_map[i] = e.idx
            continue
        if op == OP_CONST:
            index_map[i] = out.const(vals[i]).idx
            continue
        a = index_map[aa[i]]
        if op in BINARY_OPS:
            b = index_map[bb[i]]
        else:
            b = bb[i]  # powi exponent or -1
        # fold if operands are now constants
        if out.ops[a] == OP_CONST and (op not in BINARY_OPS or out.ops[b] == OP_CONST):
            if op in BINARY_OPS:
                folded = _try_fold(op, out.vals[a], out.vals[b])
            elif op == OP_POWI:
                folded = _try_fold(op, out.vals[a], b)
            else:
                folded = _try_fold(op, out.vals[a])
            if folded is not None:
                index_map[i] = out.const(folded).idx
                continue
        key = (op, a, b)
        hit = seen.get(key)
        if hit is not None:
            index_map[i] = hit
        else:
            e = out._emit(op, a, b)
            seen[key] = e.idx
            index_map[i] = e.idx
    return CseResult(out, index_map)


# -- forward mode (dual numbers) ---------------------------------------------

class DualNumber:
    """Value/derivative pair; arithmetic applies the chain rule exactly.

    This is the operator-overloading flavor of derivative propagation, kept
    for cross-validating the reverse-mode graph transformation.
    """

    __slots__ = ("value", "derivative")

    def __init__(self, value, derivative=0.0):
        self.value = float(value)
        self.derivative = float(derivative)

    def _lift(self, other):
        return other if isinstance(other, DualNumber) else DualNumber(other)

    def __add__(self, other):
        o = self._lift(other)
        return DualNumber(self.value + o.value, self.derivative + o.derivative)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        return DualNumber(self.value - o.value, self.derivative - o.derivative)

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        o = self._lift(other)
        return DualNumber(self.value * o.value,
                          self.derivative * o.value + self.value * o.derivative)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        if abs(o.value) < DIV_GUARD:
            raise EvalDomainError("division guard tripped in dual arithmetic")
        q = self.value / o.value
        return DualNumber(q, (self.derivative - q * o.derivative) / o.value)

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        return DualNumber(-self.value, -self.derivative)

    def __repr__(self):
        return f"DualNumber({self.value}, {self.derivative})"


def _dual_apply(op, x, y=None, node=None):
    if op in BINARY_OPS:
        if op == OP_ADD:
            return x + y
        if op == OP_SUB:
            return x - y
        if op == OP_MUL:
            return x * y
        if abs(y.value) < DIV_GUARD:
            raise EvalDomainError("division guard tripped", node)
        return x / y
    if op == OP_NEG:
        return -x
    if op == OP_SIN:
        return DualNumber(math.sin(x.value), math.cos(x.value) * x.derivative)
    if op == OP_COS:
        return DualNumber(math.cos(x.value), -math.sin(x.value) * x.derivative)
    if op == OP_EXP:
        v = math.exp(x.value)
        return DualNumber(v, v * x.derivative)
    if op == OP_LOG:
        if x.value <= 0.0:
            raise EvalDomainError("log of non-positive argument", node)
        return DualNumber(math.log(x.value), x.derivative / x.value)
    if op == OP_SQRT:
        if x.value < 0.0:
            raise EvalDomainError("sqrt of negative argument", node)
        v = math.sqrt(x.value)
        if v == 0.0:
            raise EvalDomainError("sqrt derivative singular at 0", node)
        return DualNumber(v, 0.5 * x.derivative / v)
    if op == OP_POWI:
        n = y
        v = _apply_op(OP_POWI, x.value, n, node)
        d = float(n) * _apply_op(OP_POWI, x.value, n - 1, node) * x.derivative
        return DualNumber(v, d)
    raise GraphError(f"no dual rule for op {op}")


def eval_dual(graph, outputs, inputs, seed):
    """Forward-mode evaluation: values plus directional derivatives.

    Args:
        outputs: sequence of Expr handles.
        inputs: mapping symbol name -> value; every live input must be bound.
        seed: mapping symbol name -> tangent component (missing names seed 0).

    Returns:
        (values, derivatives): two lists aligned with ``outputs``.
    """
    duals = {}
    for name, idx in graph.inputs.items():
        if name in inputs:
            duals[idx] = DualNumber(inputs[name], seed.get(name, 0.0))
    ops, aa, bb = graph.ops, graph.a, graph.b
    for root in outputs:
        if root.graph is not graph:
            raise GraphError("output node does not belong to this graph")
        stack = [root.idx]
        while stack:
            i = stack[-1]
            if i in duals:
                stack.pop()
                continue
            op = ops[i]
            if op == OP_CONST:
                duals[i] = DualNumber(graph.vals[i], 0.0)
                stack.pop()
            elif op == OP_INPUT:
                raise GraphError(f"unbound input symbol {graph.input_name(i)!r}")
            elif op in BINARY_OPS:
                a, b = aa[i], bb[i]
                if a in duals and b in duals:
                    duals[i] = _dual_apply(op, duals[a], duals[b], node=i)
                    stack.pop()
                else:
                    if a not in duals:
                        stack.append(a)
                    if b not in duals:
                        stack.append(b)
            elif op == OP_POWI:
                a = aa[i]
                if a in duals:
                    duals[i] = _dual_apply(op, duals[a], bb[i], node=i)
                    stack.pop()
                else:
                    stack.append(a)
            else:
                a = aa[i]
                if a in duals:
                    duals[i] = _dual_apply(op, duals[a], node=i)
                    stack.pop()
                else:
                    stack.append(a)
    vals = [duals[e.idx].value for e in outputs]
    ders = [duals[e.idx].derivative for e in outputs]
    return vals, ders
