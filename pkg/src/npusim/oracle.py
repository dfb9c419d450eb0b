"""Reference evaluator for computation graphs, independent of the
cycle-level machine.

Every op is recomputed in a wide domain (int64 for integer tensors, float64
for floating ones) and rounded to the edge's declared dtype at each node
boundary, which is exactly where the machine materializes values.  Integer
contractions wrap through 32-bit accumulation before any final saturation,
matching the accumulate-then-narrow hardware path, so integer graphs must
agree bit for bit; float graphs are compared under per-dtype tolerances
because the machine's vector unit works in float32.
"""

from __future__ import annotations

import math
from typing import Dict

import numpy as np

from npusim.config import dtype_from_tag
from npusim.errors import UnsupportedOp
from npusim.graph import GraphIR, Node, constant_value

TOLERANCE = {"i8": 0.0, "u8": 0.0, "i32": 0.0, "f16": 1e-3, "f32": 1e-5}


def _wide(a: np.ndarray) -> np.ndarray:
    return a.astype(np.int64 if a.dtype.kind in "iu" else np.float64)


def _wrap_i32(x: np.ndarray) -> np.ndarray:
    return ((x + 2 ** 31) % 2 ** 32) - 2 ** 31


def _round_to(x: np.ndarray, tag: str) -> np.ndarray:
    dt = dtype_from_tag(tag)
    if dt.np_dtype in (np.int8, np.uint8, np.int32):
        info = np.iinfo(dt.np_dtype)
        return np.clip(np.rint(x), info.min, info.max).astype(dt.np_dtype)
    return x.astype(dt.np_dtype)


def _contract_epilogue(acc: np.ndarray, node: Node, integer: bool):
    if integer:
        acc = _wrap_i32(acc)
    if node.fused_activation == "relu":
        acc = np.maximum(acc, 0)
    return _round_to(acc, node.dtype)


def _matmul(node: Node, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    acc = _wide(a) @ _wide(b)
    return _contract_epilogue(acc, node, a.dtype.kind in "iu")


def _conv2d(node: Node, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    stride, pad = node.attr("stride", 1), node.attr("pad", 0)
    n, h, wi, cin = x.shape
    kh, kw, _, cout = w.shape
    xw, ww = _wide(x), _wide(w)
    if pad:
        xw = np.pad(xw, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    no, ho, wo, _ = node.shape
    acc = np.zeros((n, ho, wo, cout), dtype=xw.dtype)
    # shift-and-accumulate, one kernel tap at a time
    for i in range(kh):
        for j in range(kw):
            tap = xw[:, i:i + (ho - 1) * stride + 1:stride,
                     j:j + (wo - 1) * stride + 1:stride, :]
            acc += tap @ ww[i, j]
    return _contract_epilogue(acc, node, x.dtype.kind in "iu")


def _softmax(node: Node, x: np.ndarray) -> np.ndarray:
    xw = _wide(x)
    m = xw.max(axis=-1, keepdims=True)
    e = np.exp(xw - m)
    return _round_to(e / e.sum(axis=-1, keepdims=True), node.dtype)


def _layernorm(node: Node, x: np.ndarray) -> np.ndarray:
    eps = node.attr("eps", 1e-5)
    xw = _wide(x)
    mu = xw.mean(axis=-1, keepdims=True)
    var = xw.var(axis=-1, keepdims=True)
    return _round_to((xw - mu) / np.sqrt(var + eps), node.dtype)


def _pool(node: Node, x: np.ndarray) -> np.ndarray:
    k = node.attr("k", 2)
    stride = node.attr("stride", k)
    n, ho, wo, c = node.shape
    xw = _wide(x)
    stack = [xw[:, i:i + (ho - 1) * stride + 1:stride,
               j:j + (wo - 1) * stride + 1:stride, :]
             for i in range(k) for j in range(k)]
    stacked = np.stack(stack)
    red = stacked.max(axis=0) if node.attr("kind", "max") == "max" \
        else stacked.sum(axis=0) / (k * k)
    return _round_to(red, node.dtype)


def eval_node(node: Node, ins: list) -> np.ndarray:
    """One op on concrete arrays; result already in the edge dtype."""
    k = node.kind
    if k == "matmul":
        return _matmul(node, *ins)
    if k == "conv2d":
        return _conv2d(node, *ins)
    if k == "add":
        return _round_to(_wide(ins[0]) + _wide(ins[1]), node.dtype)
    if k == "mul":
        return _round_to(_wide(ins[0]) * _wide(ins[1]), node.dtype)
    if k == "relu":
        return _round_to(np.maximum(_wide(ins[0]), 0), node.dtype)
    if k == "softmax":
        return _softmax(node, ins[0])
    if k == "layernorm":
        return _layernorm(node, ins[0])
    if k == "pool":
        return _pool(node, ins[0])
    if k == "transpose":
        return ins[0].T.copy()
    if k == "reshape":
        return ins[0].reshape(node.shape)
    if k == "ewchain":
        taps = {"a": _wide(ins[0])}
        if len(ins) > 1:
            taps["b"] = _wide(ins[1])
        chain = None
        for st in node.attr("stages"):
            op, x, y = st.split(":")
            xv = chain if x == "prev" else taps[x]
            if op == "relu":
                chain = np.maximum(xv, 0)
            else:
                yv = chain if y == "prev" else taps[y]
                chain = xv + yv if op == "add" else xv * yv
        return _round_to(chain, node.dtype)
    raise UnsupportedOp(f"oracle: {k}")


def run_graph(ir: GraphIR, inputs: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """-> {output name: array in its declared dtype}."""
    vals: Dict[str, np.ndarray] = {}
    for node in ir.nodes.values():
        if node.kind == "input":
            a = inputs[node.name]
            if tuple(a.shape) != node.shape:
                raise ValueError(f"{node.name}: got {a.shape}, "
                                 f"declared {node.shape}")
            vals[node.name] = a.astype(dtype_from_tag(node.dtype).np_dtype,
                                       copy=False)
        elif node.kind == "constant":
            vals[node.name] = constant_value(node)
        else:
            vals[node.name] = eval_node(node, [vals[i] for i in node.inputs])
    return {o: vals[o] for o in ir.outputs}


def random_inputs(ir: GraphIR, seed: int) -> Dict[str, np.ndarray]:
    """Deterministic well-conditioned inputs for every graph input."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in ir.inputs:
        node = ir.node(name)
        dt = dtype_from_tag(node.dtype)
        if dt.np_dtype in (np.int8, np.uint8):
            info = np.iinfo(dt.np_dtype)
            a = rng.integers(info.min, info.max + 1, node.shape)
        else:
            a = rng.standard_normal(node.shape)
        out[name] = a.astype(dt.np_dtype)
    return out


def compare(got: np.ndarray, want: np.ndarray, tag: str):
    """-> (ok, worst error).  Integer tags require exact equality; floats
    use relative tolerance scaled by the reference magnitude."""
    if got.shape != want.shape:
        return False, math.inf
    tol = TOLERANCE[tag]
    if tol == 0.0:
        same = np.array_equal(got, want)
        diff = 0.0 if same else float(
            np.abs(got.astype(np.int64) - want.astype(np.int64)).max())
        return same, diff
    g, w = got.astype(np.float64), want.astype(np.float64)
    if not (np.isfinite(g).all() and np.isfinite(w).all()):
        return False, math.inf
    scale = max(float(np.abs(w).max()), 1.0)
    err = float(np.abs(g - w).max()) / scale
    return err <= tol, err
