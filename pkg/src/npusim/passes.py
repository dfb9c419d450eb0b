"""Graph rewrites run before lowering.

All passes are semantics-preserving and total: each returns a new GraphIR,
never mutates its argument, and terminates on any valid graph.

    algebraic        x + 0 -> x, x * 1 -> x, x * 0 -> zero constant
    transpose_pairs  transpose(transpose(x)) -> x
    fuse_activation  relu folded into a preceding matmul/conv2d it solely
                     consumes (applied in the accumulator, before narrowing)
    fuse_ewchains    runs of add/mul/relu collapsed into one vector-unit
                     pipeline node (kind "ewchain")
    dce              drop nodes that reach no output

Elementwise fusion is restricted to float tensors: a fused chain keeps
intermediates in the vector unit's float32 registers, which matches the
unfused float semantics but would skip the per-edge saturation that integer
chains are defined to have.

When a rewrite would delete a node whose name is a declared output, the node
is replaced by a same-shape reshape alias instead, so output names survive
every pass.
"""

from __future__ import annotations

import dataclasses
from typing import Dict, List, Optional

import numpy as np

from npusim.graph import GraphIR, Node, constant_value

_EW = ("add", "mul", "relu")


def _rebuild(ir: GraphIR, drop: set, rename: Dict[str, str],
             patched: Dict[str, Node]) -> GraphIR:
    """Reassemble in definition order with edges rerouted through `rename`."""
    def trans(n: str) -> str:
        while n in rename:
            n = rename[n]
        return n

    out = GraphIR(name=ir.name)
    for node in ir.nodes.values():
        if node.name in drop:
            continue
        node = patched.get(node.name, node)
        new_in = tuple(trans(i) for i in node.inputs)
        if new_in != node.inputs:
            node = dataclasses.replace(node, inputs=new_in)
        out.nodes[node.name] = node
    out.outputs = list(ir.outputs)
    return out


def _alias(node: Node, src: str) -> Node:
    """Same-shape reshape, the zero-cost way to keep a name alive."""
    return Node("reshape", node.name, (src,),
                (("shape", node.shape),), node.shape, node.dtype)


def _splice(ir: GraphIR, victim: Node, src: str, drop: set,
            rename: Dict[str, str], patched: Dict[str, Node]):
    if victim.name in ir.outputs:
        patched[victim.name] = _alias(victim, src)
    else:
        drop.add(victim.name)
        rename[victim.name] = src


def algebraic(ir: GraphIR) -> GraphIR:
    drop, rename, patched = set(), {}, {}
    for node in ir.nodes.values():
        if node.kind not in ("add", "mul"):
            continue
        for operand, other in ((node.inputs[0], node.inputs[1]),
                               (node.inputs[1], node.inputs[0])):
            cand = ir.nodes[operand]
            if cand.kind != "constant":
                continue
            v = constant_value(cand)
            if node.kind == "add" and not v.any():
                _splice(ir, node, other, drop, rename, patched)
                break
            if node.kind == "mul" and np.all(v == 1):
                _splice(ir, node, other, drop, rename, patched)
                break
            if node.kind == "mul" and not v.any():
                patched[node.name] = Node(
                    "constant", node.name, (),
                    (("dtype", node.dtype), ("init", "zeros"),
                     ("shape", node.shape)), node.shape, node.dtype)
                break
    return _rebuild(ir, drop, rename, patched)


def transpose_pairs(ir: GraphIR) -> GraphIR:
    drop, rename, patched = set(), {}, {}
    for node in ir.nodes.values():
        if node.kind != "transpose":
            continue
        inner = ir.nodes[node.inputs[0]]
        if inner.kind == "transpose" and inner.name not in drop:
            _splice(ir, node, inner.inputs[0], drop, rename, patched)
    return _rebuild(ir, drop, rename, patched)


def fuse_activation(ir: GraphIR, dtypes: tuple = ()) -> GraphIR:
    """relu(contraction) -> contraction with fused_activation, keeping the
    relu's name so downstream references and outputs are untouched.  An
    empty dtypes fuses every candidate; otherwise only relus of the listed
    dtypes fuse (the compiler needs the i32 ones regardless of optimization
    level, since the vector unit has no i32 path)."""
    out = GraphIR(name=ir.name)
    consumers: Dict[str, List[str]] = {}
    for node in ir.nodes.values():
        for i in node.inputs:
            consumers.setdefault(i, []).append(node.name)
    for node in ir.nodes.values():
        if (node.kind == "relu"
                and (not dtypes or node.dtype in dtypes)
                and node.name not in out.nodes          # not yet emitted
                and node.inputs[0] in out.nodes):
            prod = out.nodes[node.inputs[0]]
            if (prod.kind in ("matmul", "conv2d")
                    and prod.fused_activation == "identity"
                    and consumers.get(prod.name) == [node.name]
                    and prod.name not in ir.outputs):
                del out.nodes[prod.name]
                out.nodes[node.name] = dataclasses.replace(
                    prod, name=node.name, fused_activation="relu")
                continue
        out.nodes[node.name] = node
    out.outputs = list(ir.outputs)
    return out


def _chain_inputs(stages: List[Node], members: set) -> List[str]:
    ext: List[str] = []
    for s in stages:
        for i in s.inputs:
            if i not in members and i not in ext:
                ext.append(i)
    return ext


def fuse_ewchains(ir: GraphIR) -> GraphIR:
    """Collapse maximal single-consumer float add/mul/relu runs.

    The fused node keeps the run's final name; `stages` encodes one vector
    stage per member as "op:x:y" with taps a/b (external streams), prev
    (running value), or _ (unused)."""
    consumers: Dict[str, List[str]] = {}
    for node in ir.nodes.values():
        for i in node.inputs:
            consumers.setdefault(i, []).append(node.name)

    def fusable(n: Node) -> bool:
        return n.kind in _EW and n.dtype in ("f16", "f32")

    out = GraphIR(name=ir.name)
    taken: set = set()
    for node in ir.nodes.values():
        if node.name in taken:
            continue
        if not fusable(node):
            out.nodes[node.name] = node
            continue
        run = [node]
        while True:
            tail = run[-1]
            nxt = consumers.get(tail.name, [])
            if len(nxt) != 1 or tail.name in ir.outputs:
                break
            cand = ir.nodes[nxt[0]]
            if not fusable(cand) or cand.name in taken:
                break
            members = {s.name for s in run}
            if len(_chain_inputs(run + [cand], members | {cand.name})) > 2:
                break
            run.append(cand)
        if len(run) == 1:
            out.nodes[node.name] = node
            continue
        members = {s.name for s in run}
        ext = _chain_inputs(run, members)
        tap = {name: t for name, t in zip(ext, ("a", "b"))}
        stage_desc = []
        for idx, s in enumerate(run):
            def resolve(name):
                if idx > 0 and name == run[idx - 1].name:
                    return "prev"
                return tap[name]
            if s.kind == "relu":
                stage_desc.append(f"relu:{resolve(s.inputs[0])}:_")
            else:
                stage_desc.append(
                    f"{s.kind}:{resolve(s.inputs[0])}:{resolve(s.inputs[1])}")
        last = run[-1]
        taken.update(members)
        out.nodes[last.name] = Node(
            "ewchain", last.name, tuple(ext),
            (("stages", tuple(stage_desc)),), last.shape, last.dtype)
    out.outputs = list(ir.outputs)
    return out


def dce(ir: GraphIR) -> GraphIR:
    """Keep what reaches an output; graph inputs stay (interface)."""
    live = set(ir.outputs)
    for node in reversed(list(ir.nodes.values())):
        if node.name in live:
            live.update(node.inputs)
    out = GraphIR(name=ir.name)
    for node in ir.nodes.values():
        if node.name in live or node.kind == "input":
            out.nodes[node.name] = node
    out.outputs = list(ir.outputs)
    return out


def run_all(ir: GraphIR) -> GraphIR:
    ir = algebraic(ir)
    ir = transpose_pairs(ir)
    ir = fuse_activation(ir)
    ir = fuse_ewchains(ir)
    return dce(ir)
