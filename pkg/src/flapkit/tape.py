"""Compile expression graphs to flat evaluation tapes.

A tape is a dense (n_instr, 4) int32 instruction array plus a float64 slot
workspace. Compilation performs dead-code elimination and linear-scan slot
reuse; it does not rewrite arithmetic, so a tape evaluates bitwise-identically
to walking the source graph. The hot interpreter is numba-jitted; a plain
Python interpreter of the same tape is kept as a semantic cross-check.
"""

import math

import numpy as np
from numba import njit

from .exprgraph import (
    BINARY_OPS, DIV_GUARD, OP_CONST, OP_DIV, OP_INPUT, OP_LOG, OP_NAMES,
    OP_POWI, OP_SQRT, UNARY_OPS, EvalDomainError, GraphError, _apply_op,
    _live_set,
)

__all__ = ["CompiledTape", "compile_tape", "compile"]


def compile_tape(graph, inputs=None, outputs=None):
    """Flatten the live part of ``graph`` into a :class:`CompiledTape`.

    Args:
        graph: the source ExprGraph.
        inputs: ordered symbol names fixing the input vector layout
            (default: all graph symbols in registration order). Every input
            the outputs depend on must be listed; extra names are allowed
            and simply occupy a slot.
        outputs: dict name -> Expr or sequence of Expr. Each named group
            evaluates to one float64 array.

    Dead nodes are dropped, shared nodes are computed once, and slots are
    recycled as soon as their last consumer has run.
    """
    if outputs is None:
        raise GraphError("outputs must be given")
    if inputs is None:
        inputs = list(graph.inputs)
    out_groups = []
    for name, exprs in outputs.items():
        group = [exprs] if not isinstance(exprs, (list, tuple)) else list(exprs)
        for e in group:
            if e.graph is not graph:
                raise GraphError(f"output {name!r} contains a node from another graph")
        out_groups.append((name, group))

    for name in inputs:
        if name not in graph.inputs:
            raise GraphError(f"unknown input symbol {name!r}")
    if len(set(inputs)) != len(inputs):
        raise GraphError("duplicate names in input list")

    roots = [e.idx for _, group in out_groups for e in group]
    live = _live_set(graph, roots)

    bound = {graph.inputs[name] for name in inputs}
    for i in sorted(live):
        if graph.ops[i] == OP_INPUT and i not in bound:
            raise GraphError(f"live input symbol {graph.input_name(i)!r} not in input list")

    # -- slot assignment --------------------------------------------------
    # Inputs first (stable layout), then live constants (preloaded once),
    # then temporaries from a LIFO free list.
    slot_of = {}
    for pos, name in enumerate(inputs):
        slot_of[graph.inputs[name]] = pos
    n_fixed = len(inputs)

    const_nodes = sorted(i for i in live if graph.ops[i] == OP_CONST)
    const_slots = []
    const_vals = []
    for i in const_nodes:
        slot_of[i] = n_fixed + len(const_slots)
        const_slots.append(slot_of[i])
        const_vals.append(graph.vals[i])
    n_fixed += len(const_nodes)

    uses = {}
    order = sorted(i for i in live if graph.ops[i] not in (OP_CONST, OP_INPUT))
    for i in order:
        op = graph.ops[i]
        uses[graph.a[i]] = uses.get(graph.a[i], 0) + 1
        if op in BINARY_OPS:
            uses[graph.b[i]] = uses.get(graph.b[i], 0) + 1
    for r in roots:
        uses[r] = uses.get(r, 0) + 1  # outputs stay live forever

    free = []
    n_slots = n_fixed
    code = np.empty((len(order), 4), dtype=np.int32)
    instr_node = np.empty(len(order), dtype=np.int32)

    def release(idx):
        uses[idx] -= 1
        if uses[idx] == 0 and slot_of[idx] >= n_fixed:
            free.append(slot_of[idx])

    for row, i in enumerate(order):
        op = graph.ops[i]
        a_slot = slot_of[graph.a[i]]
        if op in BINARY_OPS:
            b_slot = slot_of[graph.b[i]]
            release(graph.a[i])
            release(graph.b[i])
        elif op == OP_POWI:
            b_slot = graph.b[i]  # exponent, not a slot
            release(graph.a[i])
        else:
            b_slot = -1
            release(graph.a[i])
        if free:
            dst = free.pop()
        else:
            dst = n_slots
            n_slots += 1
        slot_of[i] = dst
        code[row] = (op, a_slot, b_slot, dst)
        instr_node[row] = i

    out_layout = []
    out_slots = []
    for name, group in out_groups:
        out_layout.append((name, len(group)))
        out_slots.extend(slot_of[e.idx] for e in group)

    return CompiledTape(
        code=code,
        n_slots=n_slots,
        input_names=list(inputs),
        input_slots=np.arange(len(inputs), dtype=np.int32),
        const_slots=np.asarray(const_slots, dtype=np.int32),
        const_vals=np.asarray(const_vals, dtype=np.float64),
        out_layout=out_layout,
        out_slots=np.asarray(out_slots, dtype=np.int32),
        instr_node=instr_node,
        n_live_nodes=len(live),
    )


compile = compile_tape


@njit(cache=True)
def _run(code, ws):
    """Execute the instruction array in-place over the slot workspace.

    Returns -1 on success, else the index of the instruction whose domain
    guard tripped (division by ~0, log(x<=0), sqrt(x<0)).
    """
    for k in range(code.shape[0]):
        op = code[k, 0]
        a = ws[code[k, 1]]
        if op == 2:
            ws[code[k, 3]] = a + ws[code[k, 2]]
        elif op == 3:
            ws[code[k, 3]] = a - ws[code[k, 2]]
        elif op == 4:
            ws[code[k, 3]] = a * ws[code[k, 2]]
        elif op == 5:
            b = ws[code[k, 2]]
            if abs(b) < 1e-300:
                return k
            ws[code[k, 3]] = a / b
        elif op == 6:
            ws[code[k, 3]] = -a
        elif op == 7:
            ws[code[k, 3]] = math.sin(a)
        elif op == 8:
            ws[code[k, 3]] = math.cos(a)
        elif op == 9:
            ws[code[k, 3]] = math.exp(a)
        elif op == 10:
            if a <= 0.0:
                return k
            ws[code[k, 3]] = math.log(a)
        elif op == 11:
            n = code[k, 2]
            r = 1.0
            for _ in range(abs(n)):
                r *= a
            if n < 0:
                if abs(r) < 1e-300:
                    return k
                r = 1.0 / r
            ws[code[k, 3]] = r
        elif op == 12:
            if a < 0.0:
                return k
            ws[code[k, 3]] = math.sqrt(a)
    return -1


class CompiledTape:
    """A compiled evaluation tape. Create via :func:`compile_tape`."""

    def __init__(self, code, n_slots, input_names, input_slots, const_slots,
                 const_vals, out_layout, out_slots, instr_node, n_live_nodes):
        self.code = code
        self.n_slots = n_slots
        self.input_names = input_names
        self.input_slots = input_slots
        self.const_slots = const_slots
        self.const_vals = const_vals
        self.out_layout = out_layout
        self.out_slots = out_slots
        self.instr_node = instr_node
        self.n_live_nodes = n_live_nodes
        self._template = np.zeros(n_slots, dtype=np.float64)
        self._template[const_slots] = const_vals
        self._ws = self._template.copy()

    @property
    def n_instructions(self):
        return int(self.code.shape[0])

    def new_workspace(self):
        """Fresh slot workspace (constants preloaded) for concurrent use."""
        return self._template.copy()

    def eval_flat(self, x, workspace=None):
        """Evaluate and return all outputs concatenated into one fresh array.

        Input and constant slots are never used as instruction destinations,
        so the persistent default workspace stays valid across sequential
        calls (including after a raised domain error). For concurrent use,
        pass each caller its own array from :meth:`new_workspace`.
        """
        ws = self._ws if workspace is None else workspace
        ws[self.input_slots] = x
        bad = _run(self.code, ws)
        if bad >= 0:
            self._raise_domain(bad)
        return ws[self.out_slots]

    def eval(self, x, workspace=None):
        """Evaluate at input vector ``x``; returns dict name -> float64 array."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (len(self.input_names),):
            raise GraphError(
                f"expected input vector of length {len(self.input_names)}, got shape {x.shape}")
        flat = self.eval_flat(x, workspace)
        out = {}
        pos = 0
        for name, count in self.out_layout:
            out[name] = flat[pos:pos + count].copy()
            pos += count
        return out

    def eval_dict(self, binding):
        """Evaluate from a name -> value mapping instead of a packed vector."""
        x = np.array([binding[name] for name in self.input_names], dtype=np.float64)
        return self.eval(x)

    def eval_python(self, x):
        """Interpret the tape in pure Python. Slow; for cross-checking only."""
        ws = self._template.copy()
        ws[self.input_slots] = np.asarray(x, dtype=np.float64)
        code = self.code
        for k in range(code.shape[0]):
            op = int(code[k, 0])
            a = float(ws[code[k, 1]])
            if op in BINARY_OPS:
                arg2 = float(ws[code[k, 2]])
            elif op == OP_POWI:
                arg2 = int(code[k, 2])
            else:
                arg2 = 0.0
            try:
                ws[code[k, 3]] = _apply_op(op, a, arg2)
            except EvalDomainError:
                self._raise_domain(k)
        flat = ws[self.out_slots]
        out = {}
        pos = 0
        for name, count in self.out_layout:
            out[name] = flat[pos:pos + count].copy()
            pos += count
        return out

    def _raise_domain(self, row):
        op = int(self.code[row, 0])
        node = int(self.instr_node[row])
        what = {OP_DIV: "division by ~0", OP_LOG: "log of non-positive argument",
                OP_SQRT: "sqrt of negative argument"}.get(op, OP_NAMES[op])
        raise EvalDomainError(
            f"{what} at instruction {row} (graph node {node})", node)

    def dump(self):
        """Human-readable listing, one line per slot binding / instruction."""
        lines = []
        for pos, name in enumerate(self.input_names):
            lines.append(f"slot{pos} = input {name}")
        for slot, val in zip(self.const_slots, self.const_vals):
            lines.append(f"slot{slot} = const {float(val)!r}")
        for k in range(self.code.shape[0]):
            op, a, b, dst = (int(v) for v in self.code[k])
            if op in BINARY_OPS:
                lines.append(f"slot{dst} = {OP_NAMES[op]} slot{a} slot{b}")
            elif op == OP_POWI:
                lines.append(f"slot{dst} = powi slot{a} {b}")
            else:
                lines.append(f"slot{dst} = {OP_NAMES[op]} slot{a}")
        pos = 0
        for name, count in self.out_layout:
            for j in range(count):
                lines.append(f"output {name}[{j}] = slot{self.out_slots[pos]}")
                pos += 1
        return "\n".join(lines) + "\n"

    def __repr__(self):
        outs = ", ".join(f"{n}[{c}]" for n, c in self.out_layout)
        return (f"CompiledTape({self.n_instructions} instructions, "
                f"{self.n_slots} slots, outputs: {outs})")
