"""Functional and timing models for the five TPB execution engines.

TCU  tensor contraction array (8 rows x 64 cols of 4-wide dot units) with a
     widening accumulator and an activation stage on the output path.
CVU  configurable chain of vector operators with scalar registers, grouped
     reductions, and spill buffers for per-row statistics.
DTDU byte mover: copy (local or multicast to remote TPBs), 2-D transpose,
     constant fill.
CSU  doorbell into the cluster service CPU: named routines with fixed costs.
GSDU indexed gather/scatter between local HBSM and a remote space, driven by
     an index table that is itself runtime data.

Everything here is pure: descriptors in, numpy arrays or cycle counts out.
The engine owns storage, walkers, ports, and sync; it calls down into this
module for the math and for the intrinsic cycle counts that grant pacing is
measured against.

Numeric contract: integer paths are exact with i32 wraparound accumulation
and saturating narrowing; float paths accumulate in f32 (TCU) or compute in
f32 throughout (CVU) regardless of stream dtype, with round-to-nearest-even
narrowing.  exp2 is the correctly rounded f32 exponential-base-2, not a
table approximation, so results are reproducible across hosts.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from npusim.config import DTYPES, MachineConfig, TensorDesc, dtype_from_tag
from npusim.errors import (IndexOutOfRange, InvalidPipeline, NonfiniteFault,
                           ShapeMismatch, TileTooLarge, UnsupportedDtype)

ACTIVATIONS = ("identity", "relu", "relu6", "clamp")

# Accumulator dtype forced by input dtype: the array widens i8/u8 into i32
# and f16 into f32, nothing else is wired.
ACC_FOR = {"i8": "i32", "u8": "i32", "f16": "f32", "f32": "f32"}


# ---------------------------------------------------------------------------
# TCU

@dataclass(frozen=True)
class TcuOp:
    """Contraction descriptor: a matmul, or a conv2d expressed as one.

    dims is (M, K, N) for matmul and (N, H, W, Cin, Cout, kh, kw, stride,
    pad) for conv2d.  Either way the array sees a single implicit matmul
    whose contraction length drives the cycle count; conv never materializes
    an im2col copy, the activation walker streams the windows.
    """

    kind: str
    dims: Tuple[int, ...]
    in_dtype: str = "i8"
    out_dtype: str = ""
    activation: str = "identity"
    clamp_lo: float = 0.0
    clamp_hi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.kind not in ("matmul", "conv2d"):
            raise UnsupportedDtype(f"tcu kind {self.kind!r}")
        want = 3 if self.kind == "matmul" else 9
        if len(self.dims) != want:
            raise ShapeMismatch(f"{self.kind} takes {want} dims, got "
                                f"{len(self.dims)}")
        if any(d <= 0 for d in self.dims[:want - 1 if self.kind == "conv2d" else want]):
            raise ShapeMismatch(f"nonpositive dim in {self.dims}")
        if self.kind == "conv2d":
            n, h, w, cin, cout, kh, kw, stride, pad = self.dims
            if pad < 0 or pad >= max(kh, kw):
                raise ShapeMismatch(f"pad {pad} vs kernel {kh}x{kw}")
            if stride <= 0:
                raise ShapeMismatch(f"stride {stride}")
            if h + 2 * pad < kh or w + 2 * pad < kw:
                raise ShapeMismatch("kernel larger than padded input")
        if self.in_dtype not in ACC_FOR:
            raise UnsupportedDtype(f"tcu input {self.in_dtype}")
        if not self.out_dtype:
            object.__setattr__(self, "out_dtype", ACC_FOR[self.in_dtype])
        if self.out_dtype not in DTYPES:
            raise UnsupportedDtype(f"tcu output {self.out_dtype}")
        if self.activation not in ACTIVATIONS:
            raise UnsupportedDtype(f"activation {self.activation!r}")

    @property
    def acc_dtype(self) -> str:
        return ACC_FOR[self.in_dtype]

    @property
    def conv_out_hw(self) -> Tuple[int, int]:
        n, h, w, cin, cout, kh, kw, stride, pad = self.dims
        return ((h + 2 * pad - kh) // stride + 1,
                (w + 2 * pad - kw) // stride + 1)

    def matmul_dims(self) -> Tuple[int, int, int]:
        """(M', K', N') of the implicit matmul the array executes."""
        if self.kind == "matmul":
            return self.dims
        n, h, w, cin, cout, kh, kw, stride, pad = self.dims
        ho, wo = self.conv_out_hw
        return (n * ho * wo, kh * kw * cin, cout)


def _wrap_i32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.int64).astype(np.int32)


def _activate(acc: np.ndarray, op: TcuOp) -> np.ndarray:
    if op.activation == "identity":
        return acc
    if op.activation == "relu":
        return np.maximum(acc, 0)
    lo, hi = ((0, 6) if op.activation == "relu6"
              else (op.clamp_lo, op.clamp_hi))
    if acc.dtype == np.int32:
        lo, hi = int(lo), int(hi)
    return np.clip(acc, lo, hi)


def narrow(acc: np.ndarray, out_dtype: str, nonfinite: str = "fault"):
    """Accumulator-to-output conversion: saturate for ints, RNE for floats.

    Integer targets fault on NaN/Inf coming from a float accumulator unless
    nonfinite="propagate", which maps them through the saturating clip
    (NaN becomes the low rail, numpy's clip convention is not relied on).
    """
    dt = dtype_from_tag(out_dtype)
    if dt.np_dtype in (np.float16, np.float32):
        return acc.astype(dt.np_dtype)
    if acc.dtype in (np.float32, np.float64):
        bad = ~np.isfinite(acc)
        if bad.any():
            if nonfinite == "fault":
                raise NonfiniteFault(
                    f"{int(bad.sum())} nonfinite values into {out_dtype}")
            acc = np.where(np.isnan(acc), -np.inf, acc)
        acc = np.rint(acc)
    info = np.iinfo(dt.np_dtype)
    return np.clip(acc, info.min, info.max).astype(dt.np_dtype)


def tcu_functional(op: TcuOp, act: np.ndarray, wt: np.ndarray) -> np.ndarray:
    """Exact result of the contraction, activation, and narrowing.

    matmul: act (M, K), wt (K, N) -> (M, N).
    conv2d: act (N, H, W, Cin), wt (kh, kw, Cin, Cout) -> (N, Ho, Wo, Cout).
    Integer inputs accumulate in i64 and wrap to i32 (the accumulator is 32
    bits wide); float inputs accumulate in f32 in contraction order.
    """
    if op.kind == "matmul":
        m, k, n = op.dims
        if act.shape != (m, k) or wt.shape != (k, n):
            raise ShapeMismatch(f"matmul {act.shape} x {wt.shape} vs {op.dims}")
        if op.in_dtype in ("i8", "u8"):
            acc = _wrap_i32(act.astype(np.int64) @ wt.astype(np.int64))
        else:
            acc = (act.astype(np.float32) @ wt.astype(np.float32))
            acc = acc.astype(np.float32)
        return narrow(_activate(acc, op), op.out_dtype)

    n, h, w, cin, cout, kh, kw, stride, pad = op.dims
    ho, wo = op.conv_out_hw
    if act.shape != (n, h, w, cin):
        raise ShapeMismatch(f"conv input {act.shape} vs {(n, h, w, cin)}")
    if wt.shape != (kh, kw, cin, cout):
        raise ShapeMismatch(f"conv weight {wt.shape} vs {(kh, kw, cin, cout)}")
    wide = np.int64 if op.in_dtype in ("i8", "u8") else np.float32
    x = act.astype(wide)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]          # (N, Ho, Wo, Cin, kh, kw)
    acc = np.einsum("nxycij,ijco->nxyo", win, wt.astype(wide),
                    optimize=True)
    acc = _wrap_i32(acc) if wide is np.int64 else acc.astype(np.float32)
    assert acc.shape == (n, ho, wo, cout)
    return narrow(_activate(acc, op), op.out_dtype)


def tcu_matrix(op: TcuOp, act2d: np.ndarray, wt2d: np.ndarray) -> np.ndarray:
    """Contraction on matrices already shaped (M', K') x (K', N').

    This is the array's native view: conv2d arrives here too, because the
    activation walker streams kh*kw*Cin windows per output position and the
    weight walker linearizes the kernel, so the engine hands both kinds of
    op to the same matmul.  Accumulation and narrowing match tcu_functional.
    """
    m, k, n = op.matmul_dims()
    if act2d.shape != (m, k) or wt2d.shape != (k, n):
        raise ShapeMismatch(f"array feed {act2d.shape} x {wt2d.shape} "
                            f"vs implicit {op.matmul_dims()}")
    if op.in_dtype in ("i8", "u8"):
        acc = _wrap_i32(act2d.astype(np.int64) @ wt2d.astype(np.int64))
    else:
        acc = (act2d.astype(np.float32) @ wt2d.astype(np.float32))
        acc = acc.astype(np.float32)
    return narrow(_activate(acc, op), op.out_dtype)


def tcu_cycles(op: TcuOp, cfg: MachineConfig) -> Tuple[int, int, int]:
    """(fill, mac, drain) for one tile.

    The array retires ceil(K'/32) partial dot products per output row group
    per cycle; full occupancy gives mac = ceil(K'/(rows*dot)) * M' *
    ceil(N'/cols).  Fill and drain are the fixed pipeline ends.
    """
    m, k, n = op.matmul_dims()
    step = cfg.tcu_rows * cfg.tcu_dot_width
    mac = math.ceil(k / step) * m * math.ceil(n / cfg.tcu_cols)
    if m * k * n > (1 << 40):
        raise TileTooLarge(f"{m}x{k}x{n}")
    return cfg.tcu_fill, mac, cfg.tcu_drain


# ---------------------------------------------------------------------------
# CVU

# operator -> input arity
CVU_OPERATORS = {
    "add": 2, "sub": 2, "mul": 2, "div": 2, "max": 2, "min": 2,
    "select_ge": 2,
    "exp2_approx": 1, "reciprocal": 1, "sqrt": 1, "abs": 1,
    "scale_bias": 1, "convert": 1,
    "reduce_max": 1, "reduce_sum": 1, "broadcast_scalar": 1,
}
_REDUCES = ("reduce_max", "reduce_sum")
_TAP_RE = re.compile(r"^(a|b|prev|imm|s[0-7]|buf[0-3])$")


@dataclass(frozen=True)
class CvuStage:
    """One operator in the vector chain.

    Taps name where each input comes from: the two operand streams ("a",
    "b"), the running chain value ("prev"), an immediate ("imm", value in
    imm), a scalar register ("s0".."s7"), or a spill buffer ("buf0".."buf3").

    dst diverts the result instead of feeding the chain: scalar registers
    hold whole-stream reduction results, buffers hold grouped results such
    as per-row statistics.  group splits a reduction into fixed-size groups
    (one output per group), and turns broadcast_scalar into repeat-each
    (group copies per input element) so buffered row statistics can be
    re-expanded against the stream they describe.
    """

    op: str
    a: str
    b: Optional[str] = None
    dst: Optional[str] = None
    imm: float = 0.0
    imm2: float = 0.0
    group: int = 0

    def __post_init__(self):
        if self.op not in CVU_OPERATORS:
            raise InvalidPipeline(f"unknown operator {self.op!r}")
        arity = CVU_OPERATORS[self.op]
        if (self.b is not None) != (arity == 2):
            raise InvalidPipeline(f"{self.op} takes {arity} input(s)")
        for tap in (self.a, self.b):
            if tap is not None and not _TAP_RE.match(tap):
                raise InvalidPipeline(f"bad tap {tap!r}")
        if self.dst is not None and not re.match(r"^(s[0-7]|buf[0-3])$",
                                                 self.dst):
            raise InvalidPipeline(f"bad dst {self.dst!r}")
        if self.group < 0:
            raise InvalidPipeline(f"group {self.group}")
        if self.op in _REDUCES and self.group == 0 \
                and (self.dst is None or self.dst.startswith("buf")):
            raise InvalidPipeline(
                "whole-stream reduction must land in a scalar register")
        if self.op == "broadcast_scalar" and self.group == 0 \
                and self.a.startswith(("buf", "a", "b", "prev")):
            raise InvalidPipeline(
                "ungrouped broadcast_scalar reads a scalar source")


@dataclass(frozen=True)
class CvuPipeline:
    """Ordered stage chain plus the out binding.

    out is a tap ("prev" for the chain tail, or a buffer); buf_elems sizes
    each spill buffer in f32 elements.  Buffers tapped before any stage
    writes them are preloaded from HBSM scratch by the engine, which is how
    a statistics pass hands row stats to a later normalization pass.
    """

    stages: Tuple[CvuStage, ...]
    out: str = "prev"
    out_dtype: str = "f32"
    buf_elems: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "buf_elems",
                           tuple(int(x) for x in self.buf_elems))
        if not self.stages:
            raise InvalidPipeline("empty stage list")
        if not re.match(r"^(prev|buf[0-3])$", self.out):
            raise InvalidPipeline(f"bad out binding {self.out!r}")
        if self.out_dtype not in DTYPES:
            raise UnsupportedDtype(f"cvu out {self.out_dtype}")
        for i, n in enumerate(self.buf_elems):
            if n <= 0:
                raise InvalidPipeline(f"buf{i} sized {n}")
        for tap in self._tapped_bufs() | ({int(self.out[3:])}
                                          if self.out.startswith("buf")
                                          else set()):
            if tap >= len(self.buf_elems):
                raise InvalidPipeline(f"buf{tap} is not sized")

    def _tapped_bufs(self):
        used = set()
        for st in self.stages:
            for tap in (st.a, st.b, st.dst):
                if tap and tap.startswith("buf"):
                    used.add(int(tap[3:]))
        return used

    def preloaded_bufs(self) -> Tuple[int, ...]:
        """Buffer indices read before any stage writes them."""
        written, preload = set(), set()
        for st in self.stages:
            for tap in (st.a, st.b):
                if tap and tap.startswith("buf") and int(tap[3:]) not in written:
                    preload.add(int(tap[3:]))
            if st.dst and st.dst.startswith("buf"):
                written.add(int(st.dst[3:]))
        return tuple(sorted(preload))

    def written_bufs(self) -> Tuple[int, ...]:
        return tuple(sorted({int(st.dst[3:]) for st in self.stages
                             if st.dst and st.dst.startswith("buf")}))

    def sweeps(self) -> int:
        """1 or 2 stream passes.

        A stage that taps a register or buffer filled by a reduction in this
        same pipeline cannot see the value until the whole stream has gone
        by once, so the chain runs a second pass.
        """
        reduced = {st.dst for st in self.stages if st.op in _REDUCES}
        reduced.discard(None)
        for st in self.stages:
            if st.a in reduced or st.b in reduced:
                return 2
        if self.out in reduced:
            return 2
        return 1


def cvu_out_elems(p: CvuPipeline, length: int) -> int:
    """Output element count for an input stream of `length` elements."""
    if p.out.startswith("buf"):
        return p.buf_elems[int(p.out[3:])]
    cur = length
    for st in p.stages:
        if st.dst is not None:
            continue
        if st.op in _REDUCES and st.group:
            if cur % st.group:
                raise InvalidPipeline(
                    f"stream of {cur} not divisible by group {st.group}")
            cur //= st.group
        elif st.op == "broadcast_scalar" and st.group:
            src = st.a
            n = (p.buf_elems[int(src[3:])] if src.startswith("buf") else cur)
            cur = n * st.group
    return cur


def cvu_eval(p: CvuPipeline, a: np.ndarray, b: Optional[np.ndarray] = None,
             bufs: Optional[Dict[int, np.ndarray]] = None,
             nonfinite: str = "fault"):
    """Run the chain over full streams.

    a and b arrive as f32; returns (out_array in out_dtype, written buffer
    contents as f32, sweep count).  Whole-array evaluation is exactly the
    two-sweep semantics: by the time a dependent stage runs, every reduction
    already saw the complete stream.
    """
    f32 = np.float32
    a = np.ascontiguousarray(a, dtype=f32)
    if b is not None:
        b = np.ascontiguousarray(b, dtype=f32)
    sregs = np.zeros(8, dtype=f32)
    bufs = {k: np.asarray(v, dtype=f32) for k, v in (bufs or {}).items()}
    chain: Optional[np.ndarray] = None

    def read(tap: str, st: CvuStage) -> np.ndarray:
        if tap == "a":
            return a
        if tap == "b":
            if b is None:
                raise InvalidPipeline("stage taps stream b, none bound")
            return b
        if tap == "prev":
            if chain is None:
                raise InvalidPipeline("first stage taps prev")
            return chain
        if tap == "imm":
            return np.asarray(st.imm, dtype=f32)
        if tap.startswith("s"):
            return sregs[int(tap[1:])]
        buf = bufs.get(int(tap[3:]))
        if buf is None:
            raise InvalidPipeline(f"{tap} read before preload")
        return buf

    with np.errstate(all="ignore"):
        for st in p.stages:
            x = read(st.a, st)
            y = read(st.b, st) if st.b is not None else None
            op = st.op
            if op in _REDUCES:
                fn = np.max if op == "reduce_max" else np.add.reduce
                if st.group:
                    if x.size % st.group:
                        raise InvalidPipeline(
                            f"stream of {x.size} not divisible by group "
                            f"{st.group}")
                    r = fn(x.reshape(-1, st.group), axis=1).astype(f32)
                else:
                    r = f32(fn(x))
            elif op == "broadcast_scalar":
                r = (np.repeat(np.atleast_1d(x), st.group) if st.group
                     else np.broadcast_to(np.asarray(x, f32), a.shape).copy())
            elif op == "add":
                r = x + y
            elif op == "sub":
                r = x - y
            elif op == "mul":
                r = x * y
            elif op == "div":
                r = x / y
            elif op == "max":
                r = np.maximum(x, y)
            elif op == "min":
                r = np.minimum(x, y)
            elif op == "select_ge":
                r = np.where(x >= y, x, f32(0))
            elif op == "exp2_approx":
                r = np.exp2(x, dtype=f32)
            elif op == "reciprocal":
                r = f32(1) / x
            elif op == "sqrt":
                r = np.sqrt(x, dtype=f32)
            elif op == "abs":
                r = np.abs(x)
            elif op == "scale_bias":
                r = x * f32(st.imm) + f32(st.imm2)
            else:                      # convert: round to integral, stay f32
                r = np.rint(x).astype(f32)
            r = np.asarray(r, dtype=f32)
            if st.dst is None:
                chain = r
            elif st.dst.startswith("s"):
                if r.ndim and r.size != 1:
                    raise InvalidPipeline(
                        f"{st.op} result of {r.size} into scalar {st.dst}")
                sregs[int(st.dst[1:])] = f32(r)
            else:
                idx = int(st.dst[3:])
                if r.ndim == 0:
                    r = np.full(p.buf_elems[idx], f32(r))
                if r.size != p.buf_elems[idx]:
                    raise InvalidPipeline(
                        f"buf{idx} sized {p.buf_elems[idx]}, wrote {r.size}")
                bufs[idx] = r

    if p.out == "prev":
        if chain is None:
            raise InvalidPipeline("no chain output and out binding is prev")
        out = chain
    else:
        idx = int(p.out[3:])
        if idx not in bufs:
            raise InvalidPipeline(f"out binding {p.out} never written")
        out = bufs[idx]
    written = {k: bufs[k] for k in p.written_bufs()}
    return narrow(out, p.out_dtype, nonfinite), written, p.sweeps()


def cvu_cycles(p: CvuPipeline, length: int,
               cfg: MachineConfig) -> Tuple[int, int, int]:
    """(fill, body, drain): body is sweeps x lane-quantized stream length."""
    body = p.sweeps() * math.ceil(length / cfg.cvu_lanes)
    return cfg.cvu_fill, body, cfg.cvu_drain


# ---------------------------------------------------------------------------
# DTDU

@dataclass(frozen=True)
class DtduOp:
    """copy moves bytes along the walkers, optionally multicasting each beat
    to remote TPBs; transpose2d reorders a rows x cols element grid;
    fill streams a constant pattern with no input."""

    kind: str
    rows: int = 0
    cols: int = 0
    elem_bytes: int = 1
    pattern: bytes = b"\x00"
    dst_tpbs: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "dst_tpbs",
                           tuple((int(c), int(t)) for c, t in self.dst_tpbs))
        if self.kind not in ("copy", "transpose2d", "fill"):
            raise UnsupportedDtype(f"dtdu kind {self.kind!r}")
        if self.kind == "transpose2d":
            if self.rows <= 0 or self.cols <= 0:
                raise ShapeMismatch(f"transpose {self.rows}x{self.cols}")
            if self.elem_bytes not in (1, 2, 4):
                raise UnsupportedDtype(f"element width {self.elem_bytes}")
        if self.kind == "fill" and not 1 <= len(self.pattern) <= 32:
            raise ShapeMismatch(f"fill pattern of {len(self.pattern)} bytes")
        if self.kind != "copy" and self.dst_tpbs:
            raise ShapeMismatch("only copy multicasts")


def transpose2d_bytes(src: bytes, rows: int, cols: int,
                      elem_bytes: int) -> bytes:
    if len(src) != rows * cols * elem_bytes:
        raise ShapeMismatch(f"{len(src)} bytes for {rows}x{cols}")
    arr = np.frombuffer(src, dtype=np.uint8)
    arr = arr.reshape(rows, cols, elem_bytes).transpose(1, 0, 2)
    return arr.tobytes()


def fill_bytes(pattern: bytes, total: int) -> bytes:
    reps = -(-total // len(pattern))
    return (pattern * reps)[:total]


def dtdu_cycles(total_bytes: int, cfg: MachineConfig) -> Tuple[int, int, int]:
    body = math.ceil(total_bytes / cfg.hbsm_bank_width)
    return cfg.dtdu_fill, body, cfg.dtdu_drain


# ---------------------------------------------------------------------------
# CSU / GSDU

@dataclass(frozen=True)
class GatherScatterPlan:
    """gather_in: local[i] = remote[index[i]]; scatter_out the reverse.

    index is an i32 tensor of ELEMENT offsets into the remote descriptor's
    flat element order; duplicates on scatter resolve last-writer-wins in
    index order.  The index table is runtime data: it is read when the
    routine runs, not when the plan is built.
    """

    direction: str
    index: TensorDesc
    local: TensorDesc
    remote: TensorDesc
    element_bytes: int

    def __post_init__(self):
        if self.direction not in ("gather_in", "scatter_out"):
            raise UnsupportedDtype(f"direction {self.direction!r}")
        if self.index.elements != self.local.elements:
            raise ShapeMismatch(
                f"{self.index.elements} indices for {self.local.elements} "
                "local elements")
        if self.element_bytes != self.local.dtype.byte_width:
            raise ShapeMismatch("element_bytes disagrees with local dtype")


@dataclass(frozen=True)
class CsuOp:
    """Service doorbell: run `routine` on the cluster CPU with args.

    launch_gsdu routines carry the gather/scatter plan inline.
    """

    routine: str
    args: Tuple[int, ...] = ()
    plan: Optional[GatherScatterPlan] = None

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(int(x) for x in self.args))


@dataclass(frozen=True)
class RoutineDef:
    """Registry entry: behavior is one of a closed set, never user code."""

    name: str
    cost_cycles: int
    behavior: str = "no_op"           # no_op | launch_gsdu | scalar_postprocess

    def __post_init__(self):
        if self.behavior not in ("no_op", "launch_gsdu", "scalar_postprocess"):
            raise UnsupportedDtype(f"routine behavior {self.behavior!r}")
        if self.cost_cycles < 0:
            raise ShapeMismatch(f"routine cost {self.cost_cycles}")


@dataclass
class ServiceRequest:
    """A pending ask at the cluster CPU, one per CSU instruction."""

    routine: RoutineDef
    op: CsuOp
    cluster: int
    tpb: int
    issued_at: int
    extra_cycles: int = 0             # time beyond the routine's fixed cost


def gsdu_addresses(plan: GatherScatterPlan, index_values: np.ndarray):
    """Element address pairs [(local_addr, remote_addr)] with range checks.

    index_values are the runtime contents of the index table (flat element
    order).  Addresses are space-local byte offsets; the caller routes them.
    """
    if index_values.size != plan.local.elements:
        raise ShapeMismatch("index table size changed under the plan")
    remote_elems = plan.remote.elements
    pairs = []
    lshape, rshape = plan.local.shape, plan.remote.shape
    for i, raw in enumerate(index_values.reshape(-1)):
        j = int(raw)
        if not 0 <= j < remote_elems:
            raise IndexOutOfRange(f"index[{i}] = {j} of {remote_elems}")
        _, laddr = plan.local.element_address(_unflatten(i, lshape))
        _, raddr = plan.remote.element_address(_unflatten(j, rshape))
        pairs.append((laddr, raddr))
    return pairs


def _unflatten(flat: int, shape: Tuple[int, ...]) -> Tuple[int, ...]:
    idx = []
    for dim in reversed(shape):
        idx.append(flat % dim)
        flat //= dim
    return tuple(reversed(idx))


def gsdu_cycles(plan: GatherScatterPlan, cfg: MachineConfig) -> int:
    """Per-element serial cost: no coalescing, one element per mesh/DDR
    round trip slot."""
    per = max(1, math.ceil(plan.element_bytes / cfg.mesh_pair_bytes_per_cycle))
    return plan.local.elements * per
