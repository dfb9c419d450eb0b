"""Tensor-granularity TPB instructions, their size model, and the cluster
instruction queue.

One instruction names a functional unit, carries the walker programs that
generate its operand and result address streams, the op descriptor with the
numeric attributes the unit needs, and the sync actions that stitch it into
producer-consumer order.  A destination mask broadcasts one instruction to
any set of TPBs; each masked TPB decodes an identical private copy.

Ordering contract: the queue keeps one FIFO per (tpb, unit).  Within a FIFO
dispatch order is arrival order; across FIFOs nothing is promised, which is
what lets a DTDU prefetch overtake a stalled TCU.

The size model feeds chain-bus timing only.  Real encodings do not matter,
magnitude does, so the formula below is a documented convention:

    bits = 128 header
         +  96 per walker loop level (all walkers)
         +  64 per sync action
         + opcode payload (see *_payload_bits)
    clamped to a 256-bit minimum slot.

Instructions serialize one per line as whitespace-separated key=value
fields; `to_line`/`from_line` round-trip exactly and the compiler's program
files are built from these records.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from npusim.config import desc_from_short
from npusim.errors import BadDescriptor, OutOfRange, ParseError
from npusim.funits import (CsuOp, CvuPipeline, CvuStage, DtduOp,
                           GatherScatterPlan, TcuOp)
from npusim.walker import LoopLevel, WalkerConfig

UNITS = ("TCU", "CVU", "DTDU", "CSU")

STAGES = ("before_start", "per_chunk", "after_complete")
CCB = -1   # counter owner id for the central control block


@dataclass(frozen=True)
class SyncAction:
    """One counter interaction attached to an instruction.

    counter is (cluster, tpb, index); (-1, -1, index) addresses the central
    block's counter file.  Monitors stall the owning unit until the counter
    reaches `expected`; updates add one.  stage picks the trigger point:
    before_start gates issue, per_chunk fires every chunk_elems elements of
    output, after_complete fires when the last result lands.
    """

    kind: str
    counter: Tuple[int, int, int]
    expected: int = 0
    stage: str = "before_start"
    chunk_elems: int = 0

    def __post_init__(self):
        object.__setattr__(self, "counter", tuple(int(x) for x in self.counter))
        if self.kind not in ("update", "monitor"):
            raise BadDescriptor(f"sync kind {self.kind!r}")
        if self.stage not in STAGES:
            raise BadDescriptor(f"sync stage {self.stage!r}")
        if len(self.counter) != 3:
            raise BadDescriptor(f"counter {self.counter}")
        if self.kind == "monitor" and self.expected < 1:
            raise BadDescriptor("monitor without a positive expected value")
        if self.kind == "update" and self.expected:
            raise BadDescriptor("update carries no expected value")
        if (self.stage == "per_chunk") != (self.chunk_elems > 0):
            raise BadDescriptor("per_chunk requires chunk_elems > 0")

    def short(self) -> str:
        c, t, i = self.counter
        where = f"ccb.{i}" if c == CCB else f"{c}.{t}.{i}"
        stage = {"before_start": "start", "after_complete": "end",
                 "per_chunk": f"chunk.{self.chunk_elems}"}[self.stage]
        if self.kind == "monitor":
            return f"mon:{where}>={self.expected}@{stage}"
        return f"upd:{where}@{stage}"


def sync_from_short(text: str) -> SyncAction:
    try:
        head, stage = text.rsplit("@", 1)
        kind, rest = head.split(":", 1)
        expected = 0
        if kind == "mon":
            rest, exp = rest.split(">=")
            expected = int(exp)
        if rest.startswith("ccb."):
            counter = (CCB, CCB, int(rest[4:]))
        else:
            c, t, i = rest.split(".")
            counter = (int(c), int(t), int(i))
        chunk = 0
        if stage.startswith("chunk."):
            chunk = int(stage[6:])
            stage = "per_chunk"
        else:
            stage = {"start": "before_start", "end": "after_complete"}[stage]
        return SyncAction({"mon": "monitor", "upd": "update"}[kind], counter,
                          expected, stage, chunk)
    except (ValueError, KeyError) as e:
        raise ParseError(f"bad sync record {text!r}: {e}") from None


# ---------------------------------------------------------------------------
# Op descriptor wrappers that exist only at the instruction level

@dataclass(frozen=True)
class VectorOp:
    """CVU work order: the pipeline plus the stream geometry it runs over.

    length counts input elements of stream A; in_dtype covers both operand
    streams.  buf_base is the HBSM byte address where spill buffers live,
    packed dense f32 in index order; the unit reads preloaded buffers from
    there and writes produced ones back.
    """

    pipeline: CvuPipeline
    length: int
    in_dtype: str = "f32"
    buf_base: int = 0

    def __post_init__(self):
        if self.length <= 0:
            raise BadDescriptor(f"stream length {self.length}")
        if self.buf_base < 0:
            raise BadDescriptor(f"buffer base {self.buf_base}")


OP_FOR_UNIT = {"TCU": TcuOp, "CVU": VectorOp, "DTDU": DtduOp, "CSU": CsuOp}


def _tcu_payload_bits(op: TcuOp) -> int:
    return 32 * len(op.dims) + 16 + 8 + 64


def _vector_payload_bits(op: VectorOp) -> int:
    p = op.pipeline
    return 32 + 8 + 16 + 32 + 32 * len(p.buf_elems) + 160 * len(p.stages)


def _dtdu_payload_bits(op: DtduOp) -> int:
    if op.kind == "copy":
        return 16 + 24 * len(op.dst_tpbs)
    if op.kind == "transpose2d":
        return 96 + 16
    return 8 + 8 * len(op.pattern)


def _csu_payload_bits(op: CsuOp) -> int:
    return 32 + 32 * len(op.args) + (32 + 3 * 288 if op.plan else 0)


_PAYLOAD = {TcuOp: _tcu_payload_bits, VectorOp: _vector_payload_bits,
            DtduOp: _dtdu_payload_bits, CsuOp: _csu_payload_bits}

MIN_BITS = 256
HEADER_BITS = 128
LEVEL_BITS = 96
SYNC_BITS = 64


def size_formula(levels: int, syncs: int, payload_bits: int) -> int:
    """The documented size formula on raw counts, 256-bit floor applied."""
    return max(MIN_BITS,
               HEADER_BITS + LEVEL_BITS * levels + SYNC_BITS * syncs
               + payload_bits)


@dataclass(frozen=True)
class TpbInstruction:
    """One unit's work order.

    Each walker value is the byte address of a run of `run` bytes (32 when
    unstated); runs shorter than a scratchpad line express packed access
    like per-window channel reads, runs longer split into line-sized beats.
    out_remote redirects the output stream into another TPB's scratchpad
    over the mesh (the DTDU multicasts through its own op field instead).
    """

    seq: int
    unit: str
    tpb_mask: int
    op: object
    in_walkers: Tuple[WalkerConfig, ...] = ()
    out_walker: Optional[WalkerConfig] = None
    syncs: Tuple[SyncAction, ...] = ()
    in_runs: Tuple[int, ...] = ()
    out_run: int = 32
    out_remote: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "in_walkers", tuple(self.in_walkers))
        object.__setattr__(self, "syncs", tuple(self.syncs))
        if not self.in_runs:
            object.__setattr__(self, "in_runs", (32,) * len(self.in_walkers))
        else:
            object.__setattr__(self, "in_runs",
                               tuple(int(r) for r in self.in_runs))
        if self.out_remote is not None:
            object.__setattr__(self, "out_remote",
                               (int(self.out_remote[0]),
                                int(self.out_remote[1])))
        if len(self.in_runs) != len(self.in_walkers):
            raise BadDescriptor("one run length per input walker")
        if any(r <= 0 for r in self.in_runs) or self.out_run <= 0:
            raise BadDescriptor("run lengths must be positive")
        if self.out_remote is not None and self.unit == "CSU":
            raise BadDescriptor("CSU has no output stream to redirect")
        if self.unit not in UNITS:
            raise BadDescriptor(f"unit {self.unit!r}")
        if self.tpb_mask <= 0:
            raise BadDescriptor("empty destination mask")
        if self.seq < 0:
            raise BadDescriptor(f"seq {self.seq}")
        if not isinstance(self.op, OP_FOR_UNIT[self.unit]):
            raise BadDescriptor(
                f"{self.unit} cannot execute {type(self.op).__name__}")
        n_in = len(self.in_walkers)
        if self.unit == "TCU" and (n_in != 2 or self.out_walker is None):
            raise BadDescriptor("TCU takes 2 input walkers and 1 output")
        if self.unit == "CVU" and not 1 <= n_in <= 2:
            raise BadDescriptor("CVU takes 1 or 2 input walkers")
        if self.unit == "DTDU":
            want = 0 if self.op.kind == "fill" else 1
            if n_in != want or self.out_walker is None:
                raise BadDescriptor(f"DTDU {self.op.kind} takes {want} input "
                                    "walker(s) and 1 output")
        if self.unit == "CSU" and (n_in or self.out_walker is not None):
            raise BadDescriptor("CSU instructions carry no walkers")

    @property
    def encoded_bits(self) -> int:
        levels = sum(len(w.levels) for w in self.in_walkers)
        if self.out_walker is not None:
            levels += len(self.out_walker.levels)
        return size_formula(levels, len(self.syncs),
                            _PAYLOAD[type(self.op)](self.op))

    def tpbs(self, tpbs_per_cluster: int) -> List[Tuple[int, int]]:
        """Masked (cluster, tpb) pairs, ascending."""
        out, mask, i = [], self.tpb_mask, 0
        while mask:
            if mask & 1:
                out.append(divmod(i, tpbs_per_cluster))
            mask >>= 1
            i += 1
        return out

    def clusters(self, tpbs_per_cluster: int) -> List[int]:
        return sorted({c for c, _ in self.tpbs(tpbs_per_cluster)})


def encoded_size(instr: TpbInstruction) -> int:
    return instr.encoded_bits


def icb_cycles(bits: int, bits_per_cycle: int) -> int:
    return math.ceil(bits / bits_per_cycle)


def mask_of(*tpb_ids: int) -> int:
    m = 0
    for i in tpb_ids:
        if i < 0:
            raise OutOfRange(f"tpb id {i}")
        m |= 1 << i
    return m


# ---------------------------------------------------------------------------
# Cluster instruction queue

class InstructionQueue:
    """Per-(tpb, unit) FIFOs with one shared capacity per cluster.

    enqueue returns False (backpressure) when the cluster buffer is full;
    the chain bus holds delivery, nothing is dropped.
    """

    def __init__(self, tpbs: int, capacity: int = 64):
        self.tpbs = tpbs
        self.capacity = capacity
        self.fifos: Dict[Tuple[int, str], deque] = {
            (t, u): deque() for t in range(tpbs) for u in UNITS}
        self.held = 0

    def enqueue(self, tpb: int, instr: TpbInstruction) -> bool:
        if not 0 <= tpb < self.tpbs:
            raise OutOfRange(f"tpb {tpb} of {self.tpbs}")
        if self.held >= self.capacity:
            return False
        self.fifos[(tpb, instr.unit)].append(instr)
        self.held += 1
        return True

    def ready_pop(self, tpb: int, unit: str) -> Optional[TpbInstruction]:
        fifo = self.fifos[(tpb, unit)]
        if not fifo:
            return None
        self.held -= 1
        return fifo.popleft()

    def peek(self, tpb: int, unit: str) -> Optional[TpbInstruction]:
        fifo = self.fifos[(tpb, unit)]
        return fifo[0] if fifo else None

    def pending(self, tpb: int, unit: str) -> int:
        return len(self.fifos[(tpb, unit)])

    def __len__(self) -> int:
        return self.held


# ---------------------------------------------------------------------------
# Text serialization

def _walker_short(w: WalkerConfig) -> str:
    return "/".join(f"{i}:{s}:{f}" for i, s, f in w.triples())


def _walker_parse(text: str) -> WalkerConfig:
    levels = []
    for part in text.split("/"):
        i, s, f = part.split(":")
        levels.append(LoopLevel(int(i), int(s), int(f)))
    return WalkerConfig(tuple(levels))


def _num(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() else repr(float(x))


def _op_short(op) -> str:
    if isinstance(op, TcuOp):
        parts = [op.kind, "dims=" + ",".join(map(str, op.dims)),
                 f"in={op.in_dtype}", f"out={op.out_dtype}"]
        if op.activation != "identity":
            act = op.activation
            if act == "clamp":
                act += f",{_num(op.clamp_lo)},{_num(op.clamp_hi)}"
            parts.append(f"act={act}")
        return ";".join(parts)
    if isinstance(op, VectorOp):
        p = op.pipeline
        parts = ["vector", f"len={op.length}", f"in={op.in_dtype}",
                 f"out={p.out}", f"odt={p.out_dtype}"]
        if p.buf_elems:
            parts.append("bufs=" + ",".join(map(str, p.buf_elems)))
            parts.append(f"base={op.buf_base}")
        for st in p.stages:
            fields = [st.op, st.a, st.b or "-", st.dst or "-",
                      str(st.group), _num(st.imm), _num(st.imm2)]
            parts.append("stage=" + ",".join(fields))
        return ";".join(parts)
    if isinstance(op, DtduOp):
        if op.kind == "copy":
            parts = ["copy"]
            if op.dst_tpbs:
                parts.append("to=" + ",".join(f"{c}.{t}"
                                              for c, t in op.dst_tpbs))
            return ";".join(parts)
        if op.kind == "transpose2d":
            return f"transpose2d;rows={op.rows};cols={op.cols};eb={op.elem_bytes}"
        return f"fill;pat={op.pattern.hex()}"
    if isinstance(op, CsuOp):
        parts = ["csu", f"routine={op.routine}"]
        if op.args:
            parts.append("args=" + ",".join(map(str, op.args)))
        if op.plan:
            pl = op.plan
            parts.append("plan=" + "|".join(
                [pl.direction, pl.index.short(), pl.local.short(),
                 pl.remote.short(), str(pl.element_bytes)]))
        return ";".join(parts)
    raise BadDescriptor(f"unserializable op {type(op).__name__}")


def _op_parse(text: str):
    head, *rest = text.split(";")
    kv = {}
    stages = []
    for item in rest:
        key, _, val = item.partition("=")
        if key == "stage":
            stages.append(val)
        else:
            kv[key] = val
    try:
        if head in ("matmul", "conv2d"):
            act, lo, hi = kv.get("act", "identity"), 0.0, 0.0
            if act.startswith("clamp"):
                act, lo, hi = act.split(",")
                lo, hi = float(lo), float(hi)
            return TcuOp(head, tuple(int(x) for x in kv["dims"].split(",")),
                         kv["in"], kv["out"], act, lo, hi)
        if head == "vector":
            parsed = []
            for st in stages:
                op, a, b, dst, group, imm, imm2 = st.split(",")
                parsed.append(CvuStage(op, a, None if b == "-" else b,
                                       None if dst == "-" else dst,
                                       float(imm), float(imm2), int(group)))
            bufs = (tuple(int(x) for x in kv["bufs"].split(","))
                    if "bufs" in kv else ())
            pipe = CvuPipeline(tuple(parsed), kv["out"], kv["odt"], bufs)
            return VectorOp(pipe, int(kv["len"]), kv["in"],
                            int(kv.get("base", 0)))
        if head == "copy":
            to = (tuple(tuple(map(int, t.split(".")))
                        for t in kv["to"].split(",")) if "to" in kv else ())
            return DtduOp("copy", dst_tpbs=to)
        if head == "transpose2d":
            return DtduOp("transpose2d", rows=int(kv["rows"]),
                          cols=int(kv["cols"]), elem_bytes=int(kv["eb"]))
        if head == "fill":
            return DtduOp("fill", pattern=bytes.fromhex(kv["pat"]))
        if head == "csu":
            args = (tuple(int(x) for x in kv["args"].split(","))
                    if "args" in kv else ())
            plan = None
            if "plan" in kv:
                d, idx, loc, rem, eb = kv["plan"].split("|")
                plan = GatherScatterPlan(d, desc_from_short(idx),
                                         desc_from_short(loc),
                                         desc_from_short(rem), int(eb))
            return CsuOp(kv["routine"], args, plan)
    except (KeyError, ValueError) as e:
        raise ParseError(f"bad op record {text!r}: {e}") from None
    raise ParseError(f"unknown opcode {head!r}")


def _stream_short(w: WalkerConfig, run: int) -> str:
    text = _walker_short(w)
    return text if run == 32 else f"{text}*{run}"


def _stream_parse(text: str):
    body, star, run = text.partition("*")
    return _walker_parse(body), (int(run) if star else 32)


def to_line(instr: TpbInstruction) -> str:
    fields = [f"instr seq={instr.seq}", f"unit={instr.unit}",
              f"mask={instr.tpb_mask:#x}", f"op={_op_short(instr.op)}"]
    fields += [f"in={_stream_short(w, r)}"
               for w, r in zip(instr.in_walkers, instr.in_runs)]
    if instr.out_walker is not None:
        fields.append(f"out={_stream_short(instr.out_walker, instr.out_run)}")
    if instr.out_remote is not None:
        fields.append(f"rto={instr.out_remote[0]}.{instr.out_remote[1]}")
    fields += [f"sync={s.short()}" for s in instr.syncs]
    return " ".join(fields)


def from_line(line: str) -> TpbInstruction:
    toks = line.split()
    if not toks or toks[0] != "instr":
        raise ParseError(f"not an instruction record: {line[:40]!r}")
    kv: Dict[str, str] = {}
    ins, syncs = [], []
    for tok in toks[1:]:
        key, eq, val = tok.partition("=")
        if not eq:
            raise ParseError(f"bad field {tok!r}")
        if key == "in":
            ins.append(val)
        elif key == "sync":
            syncs.append(val)
        else:
            kv[key] = val
    try:
        streams = [_stream_parse(w) for w in ins]
        out_w, out_run = ((None, 32) if "out" not in kv
                          else _stream_parse(kv["out"]))
        remote = None
        if "rto" in kv:
            c, t = kv["rto"].split(".")
            remote = (int(c), int(t))
        return TpbInstruction(
            seq=int(kv["seq"]),
            unit=kv["unit"],
            tpb_mask=int(kv["mask"], 0),
            op=_op_parse(kv["op"]),
            in_walkers=tuple(w for w, _ in streams),
            out_walker=out_w,
            syncs=tuple(sync_from_short(s) for s in syncs),
            in_runs=tuple(r for _, r in streams),
            out_run=out_run,
            out_remote=remote)
    except KeyError as e:
        raise ParseError(f"missing field {e} in {line[:60]!r}") from None
