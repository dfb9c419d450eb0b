"""Computation-graph text format, validation, and shape/dtype inference.

One node per line, `<kind> <name> [<input names>...] [key=value ...]`:

    # four-stage chain
    input    x   shape=16x64 dtype=f32
    constant w   shape=64x48 dtype=f32 init=normal seed=5 scale=0.125
    matmul   h   x w
    relu     a   h
    softmax  y   a
    output   y

Every non-output line defines the tensor named by its second token; inputs
must already be defined, which makes well-formed files acyclic by
construction and definition order a topological order.  `output` marks an
existing tensor as a program output and defines nothing.

Supported kinds and their attributes:

    input     shape, dtype
    constant  shape, dtype, init (zeros|ones|normal|uniform|arange),
              seed, scale
    matmul    a b            [odt=...]   (M,K)x(K,N)
    conv2d    x w            stride, pad [odt=...]   NHWC x (kh,kw,Cin,Cout)
    add       a b                        elementwise, same shape
    mul       a b
    relu      x
    softmax   x                          last axis
    layernorm x              eps         last axis
    pool      x              kind (max|avg), k, stride    NHWC
    transpose x                          rank-2 swap
    reshape   x              shape       same element count
    output    x

dtype discipline: the contraction units accept i8/u8/f16/f32 and emit a
declared output type (i32 for integer inputs unless overridden); the vector
unit computes in f32, so elementwise/softmax/layernorm/pool tensors must be
i8, u8, f16, or f32 — i32 streams through the vector unit would silently
lose precision past 24 bits and are rejected instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from npusim.config import DTYPES, dtype_from_tag
from npusim.errors import ParseError, ShapeMismatch, UnsupportedDtype, UnsupportedOp

OP_KINDS = ("input", "constant", "matmul", "conv2d", "add", "mul", "relu",
            "softmax", "layernorm", "pool", "transpose", "reshape", "output")

# input arity per kind (None = defines no tensor)
_ARITY = {"input": 0, "constant": 0, "matmul": 2, "conv2d": 2, "add": 2,
          "mul": 2, "relu": 1, "softmax": 1, "layernorm": 1, "pool": 1,
          "transpose": 1, "reshape": 1, "output": 1}

VECTOR_DTYPES = ("i8", "u8", "f16", "f32")
CONTRACT_DTYPES = ("i8", "u8", "f16", "f32")
_INITS = ("zeros", "ones", "normal", "uniform", "arange")


@dataclass(frozen=True)
class Node:
    """One graph node; also the tensor (edge) it defines, except `output`."""

    kind: str
    name: str
    inputs: Tuple[str, ...]
    attrs: Tuple[Tuple[str, object], ...]   # sorted key/value pairs
    shape: Tuple[int, ...] = ()
    dtype: str = ""
    fused_activation: str = "identity"      # set by the fusion pass

    def attr(self, key: str, default=None):
        for k, v in self.attrs:
            if k == key:
                return v
        return default

    @property
    def elements(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n


@dataclass
class GraphIR:
    """Validated graph: `nodes` in definition (= topological) order."""

    nodes: Dict[str, Node] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    name: str = "graph"

    def node(self, name: str) -> Node:
        return self.nodes[name]

    @property
    def inputs(self) -> List[str]:
        return [n.name for n in self.nodes.values() if n.kind == "input"]

    @property
    def constants(self) -> List[str]:
        return [n.name for n in self.nodes.values() if n.kind == "constant"]

    def compute_nodes(self) -> List[Node]:
        return [n for n in self.nodes.values()
                if n.kind not in ("input", "constant")]

    def consumers(self, name: str) -> List[Node]:
        return [n for n in self.nodes.values() if name in n.inputs]


def _parse_attr_value(key: str, raw: str):
    if key in ("shape", "k"):
        if "x" in raw or key == "shape":
            return tuple(int(p) for p in raw.split("x"))
        return int(raw)
    if key in ("stride", "pad", "seed"):
        return int(raw)
    if key in ("scale", "eps"):
        return float(raw)
    return raw


def _infer(kind: str, name: str, ins: List[Node], attrs: dict):
    """-> (shape, dtype), raising on any inconsistency."""
    if kind == "input" or kind == "constant":
        shape = attrs.get("shape")
        dtype = attrs.get("dtype", "f32")
        if not shape:
            raise ParseError(f"{name}: {kind} needs shape=")
        if dtype not in DTYPES:
            raise UnsupportedDtype(f"{name}: dtype {dtype!r}")
        if kind == "constant" and attrs.get("init", "normal") not in _INITS:
            raise ParseError(f"{name}: init {attrs.get('init')!r}")
        return tuple(shape), dtype

    if kind == "matmul":
        a, b = ins
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"{name}: {a.shape} @ {b.shape}")
        if a.dtype != b.dtype or a.dtype not in CONTRACT_DTYPES:
            raise UnsupportedDtype(f"{name}: {a.dtype} @ {b.dtype}")
        odt = attrs.get("odt") or ("i32" if a.dtype in ("i8", "u8")
                                   else a.dtype)
        return (a.shape[0], b.shape[1]), odt

    if kind == "conv2d":
        x, w = ins
        if len(x.shape) != 4 or len(w.shape) != 4:
            raise ShapeMismatch(f"{name}: conv ranks {x.shape} {w.shape}")
        n, h, wi, cin = x.shape
        kh, kw, wcin, cout = w.shape
        if wcin != cin:
            raise ShapeMismatch(f"{name}: Cin {cin} vs weight {wcin}")
        stride = attrs.get("stride", 1)
        pad = attrs.get("pad", 0)
        if stride < 1 or pad < 0:
            raise ShapeMismatch(f"{name}: stride={stride} pad={pad}")
        if h + 2 * pad < kh or wi + 2 * pad < kw:
            raise ShapeMismatch(f"{name}: kernel exceeds padded input")
        if x.dtype != w.dtype or x.dtype not in CONTRACT_DTYPES:
            raise UnsupportedDtype(f"{name}: {x.dtype} conv {w.dtype}")
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (wi + 2 * pad - kw) // stride + 1
        odt = attrs.get("odt") or ("i32" if x.dtype in ("i8", "u8")
                                   else x.dtype)
        return (n, ho, wo, cout), odt

    if kind in ("add", "mul"):
        a, b = ins
        if a.shape != b.shape:
            raise ShapeMismatch(f"{name}: {a.shape} vs {b.shape}")
        if a.dtype != b.dtype or a.dtype not in VECTOR_DTYPES:
            raise UnsupportedDtype(
                f"{name}: {kind} on {a.dtype}/{b.dtype} (vector unit takes "
                f"{'/'.join(VECTOR_DTYPES)})")
        return a.shape, a.dtype

    if kind == "relu":
        # i32 passes here so relu-after-contraction parses; the vector unit
        # cannot run it standalone, so compilation insists it fuses away
        (x,) = ins
        if x.dtype not in VECTOR_DTYPES + ("i32",):
            raise UnsupportedDtype(f"{name}: relu on {x.dtype}")
        return x.shape, x.dtype

    if kind in ("softmax", "layernorm"):
        (x,) = ins
        if x.dtype not in ("f16", "f32"):
            raise UnsupportedDtype(f"{name}: {kind} on {x.dtype}")
        if x.shape[-1] < 2:
            raise ShapeMismatch(f"{name}: trailing axis {x.shape[-1]}")
        return x.shape, x.dtype

    if kind == "pool":
        (x,) = ins
        if len(x.shape) != 4:
            raise ShapeMismatch(f"{name}: pool wants NHWC, got {x.shape}")
        if x.dtype not in ("f16", "f32"):
            raise UnsupportedDtype(f"{name}: pool on {x.dtype}")
        pk = attrs.get("kind", "max")
        if pk not in ("max", "avg"):
            raise UnsupportedOp(f"{name}: pool kind {pk!r}")
        k = attrs.get("k", 2)
        stride = attrs.get("stride", k)
        n, h, wi, c = x.shape
        if h < k or wi < k:
            raise ShapeMismatch(f"{name}: window {k} on {h}x{wi}")
        return (n, (h - k) // stride + 1, (wi - k) // stride + 1, c), x.dtype

    if kind == "transpose":
        (x,) = ins
        if len(x.shape) != 2:
            raise ShapeMismatch(f"{name}: transpose is rank-2, got {x.shape}")
        return (x.shape[1], x.shape[0]), x.dtype

    if kind == "reshape":
        (x,) = ins
        shape = attrs.get("shape")
        if not shape:
            raise ParseError(f"{name}: reshape needs shape=")
        if math.prod(shape) != x.elements:
            raise ShapeMismatch(
                f"{name}: {x.shape} has {x.elements} elements, "
                f"{tuple(shape)} wants {math.prod(shape)}")
        return tuple(shape), x.dtype

    raise UnsupportedOp(f"{name}: kind {kind!r}")


def load_graph(text: str, name: str = "graph") -> GraphIR:
    """Parse and validate; raises ParseError/ShapeMismatch/UnsupportedOp."""
    ir = GraphIR(name=name)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        kind = toks[0]
        if kind not in OP_KINDS:
            raise UnsupportedOp(f"line {lineno}: op kind {kind!r}")
        args = [t for t in toks[1:] if "=" not in t]
        attrs = {}
        for t in toks[1:]:
            if "=" in t:
                k, _, v = t.partition("=")
                attrs[k] = _parse_attr_value(k, v)
        if kind == "output":
            if len(args) != 1:
                raise ParseError(f"line {lineno}: output takes one name")
            if args[0] not in ir.nodes:
                raise ParseError(f"line {lineno}: output of undefined "
                                 f"{args[0]!r}")
            if args[0] in ir.outputs:
                raise ParseError(f"line {lineno}: duplicate output {args[0]!r}")
            ir.outputs.append(args[0])
            continue
        if len(args) != 1 + _ARITY[kind]:
            raise ParseError(
                f"line {lineno}: {kind} takes a name and {_ARITY[kind]} "
                f"input(s), got {args}")
        nm, in_names = args[0], tuple(args[1:])
        if nm in ir.nodes:
            raise ParseError(f"line {lineno}: {nm!r} redefined")
        missing = [i for i in in_names if i not in ir.nodes]
        if missing:
            raise ParseError(f"line {lineno}: undefined input(s) {missing}")
        ins = [ir.nodes[i] for i in in_names]
        shape, dtype = _infer(kind, nm, ins, attrs)
        ir.nodes[nm] = Node(kind, nm, in_names,
                            tuple(sorted(attrs.items())), shape, dtype)
    if not ir.outputs:
        raise ParseError("graph declares no outputs")
    if not ir.inputs:
        raise ParseError("graph declares no inputs")
    return ir


def load_graph_file(path: str) -> GraphIR:
    with open(path) as fh:
        text = fh.read()
    base = path.rsplit("/", 1)[-1]
    return load_graph(text, name=base.rsplit(".", 1)[0])


def constant_value(node: Node) -> np.ndarray:
    """Deterministic constant payload; shared by staging and the oracle
    (constants are input data, not computed semantics)."""
    dt = dtype_from_tag(node.dtype)
    rng = np.random.default_rng(node.attr("seed", 0))
    init = node.attr("init", "normal")
    scale = node.attr("scale", 1.0)
    n = node.elements
    if init == "zeros":
        flat = np.zeros(n)
    elif init == "ones":
        flat = np.ones(n)
    elif init == "arange":
        flat = np.arange(n) % 251
    elif init == "uniform":
        flat = rng.uniform(-1.0, 1.0, n)
    else:
        flat = rng.standard_normal(n)
    flat = flat * scale
    if dt.np_dtype in (np.int8, np.uint8, np.int32):
        info = np.iinfo(dt.np_dtype)
        flat = np.clip(np.rint(flat), info.min, info.max)
    return flat.astype(dt.np_dtype).reshape(node.shape)


def to_text(ir: GraphIR) -> str:
    """Inverse of load_graph (canonical attribute order)."""
    lines = []
    for n in ir.nodes.values():
        parts = [n.kind, n.name, *n.inputs]
        for k, v in n.attrs:
            if isinstance(v, tuple):
                sep = "x" if all(isinstance(e, int) for e in v) else ","
                v = sep.join(map(str, v))
            parts.append(f"{k}={v}")
        if n.fused_activation != "identity":
            parts.append(f"fused={n.fused_activation}")
        lines.append(" ".join(parts))
    for o in ir.outputs:
        lines.append(f"output {o}")
    return "\n".join(lines) + "\n"
