"""Space-time scheduler: computation graphs to placed machine programs.

The model is a straight pipeline.  Compute nodes are split into consecutive
stages balanced by estimated cycles, one stage per TPB, and every tensor is
chunked along its outermost axis into one global chunk count so chunk i can
flow through the whole pipe while chunk i+1 enters it.

Tensors materialize as regions in the scratchpad of the TPB that reads them:

  ping-pong   two chunk-sized slots, written by the producer's per-chunk
              instructions and reused with depth 2
  full        one tensor-sized buffer, used when any reader needs the whole
              tensor at once (contraction weights, transpose operands), when
              a reshape breaks outer-axis alignment, or when the tensor is a
              program output

Flow control is counters on edges that cross a unit or TPB boundary: a
data-ready counter next to the readers (the producer bumps it as chunk i
completes, the reader of chunk i waits for i+1) and, for ping-pong regions,
one space-free counter per reader next to the producer (the reader bumps it
after finishing a chunk, the producer of chunk i waits for i-1 before
overwriting the slot).  Same-unit edges need neither: the unit's queue is
FIFO and the scratchpad envelope check already serializes overlapping
footprints.

Graph inputs and constants start in DDR and ride the broadcast ring into
the scratchpads.  Each distinct constant travels exactly once no matter how
many TPBs read it; ring-landed regions sit at identical offsets on every
TPB so one descriptor can multicast.  Inputs chunk like any other streamed
edge, with their space-free counter held centrally where the descriptor's
start gate can see it.

Ops lower to one instruction per chunk, except: conv2d with padding first
materializes a padded copy (fill + copy on the data-transform unit, synced
to the array like any other cross-unit edge), softmax takes two vector-unit
passes (statistics + exponentials, then normalize), layernorm takes four,
and reshape is pure aliasing and emits nothing.

Everything here is deterministic: the same graph, machine description, and
options give byte-identical program files.
"""

from __future__ import annotations

import base64
import heapq
import math
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from npusim.config import (DDR, HBSM, AddressSpace, MachineConfig, TensorDesc,
                           desc_from_short, dtype_from_tag)
from npusim.errors import (DoesNotFit, OutOfCounters, ParseError, TooFewTpbs,
                           UnsupportedOp)
from npusim.fabric import DmaDescriptor, dma_from_short
from npusim.funits import (CvuPipeline, CvuStage, DtduOp, RoutineDef, TcuOp,
                           cvu_cycles, dtdu_cycles, tcu_cycles)
from npusim.graph import GraphIR, Node, constant_value
from npusim.isa import (SyncAction, TpbInstruction, VectorOp, from_line,
                        mask_of, to_line)
from npusim.passes import fuse_activation, run_all
from npusim.walker import WalkerConfig, expand

LINE = 32            # scratchpad line width and allocation quantum
DDR_ALIGN = 64
MARGIN = 0.125       # scratchpad head-room fraction kept empty
DEPTH = 2            # ping-pong depth
MAX_CHUNKS = 64
DONE_CTR = 0         # central counter of finished output chunks

UNIT_FOR = {"matmul": "TCU", "conv2d": "TCU", "add": "CVU", "mul": "CVU",
            "relu": "CVU", "softmax": "CVU", "layernorm": "CVU",
            "pool": "CVU", "ewchain": "CVU", "transpose": "DTDU"}

# input slots that read the whole tensor rather than outer-axis chunks
_WHOLE_SLOTS = {("matmul", 1), ("conv2d", 1), ("transpose", 0)}


def _align(n: int, a: int = LINE) -> int:
    return -(-n // a) * a


def _split(extent: int, chunks: int) -> List[Tuple[int, int]]:
    """(row offset, row count) per chunk; the first extent%chunks chunks get
    one extra row, so index 0 always has the largest count."""
    base, rem = divmod(extent, chunks)
    out, off = [], 0
    for i in range(chunks):
        size = base + (1 if i < rem else 0)
        out.append((off, size))
        off += size
    return out


def _flat(base: int, nbytes: int) -> Tuple[WalkerConfig, int]:
    """Line walker over a contiguous block (regions are line-padded)."""
    lines = max(1, -(-nbytes // LINE))
    return WalkerConfig.of((base, LINE, base + LINE * (lines - 1))), LINE


# ---------------------------------------------------------------------------
# plan objects

@dataclass
class _Region:
    tpb: Optional[Tuple[int, int]]    # None = same offset on every TPB
    base: int = 0
    pitch: int = 0                    # bytes per slot, line-aligned
    slots: int = 1

    def slot_base(self, i: int) -> int:
        return self.base + (i % self.slots) * self.pitch


@dataclass
class _Edge:
    name: str
    shape: Tuple[int, ...]
    dtype: str
    producer: Optional[Node]          # None for graph inputs / constants
    # (reader node, slot, aligned): aligned means the reader's view keeps
    # the outermost axis, so per-chunk slices line up byte for byte
    readers: List[Tuple[Node, int, bool]] = field(default_factory=list)
    is_input: bool = False
    is_const: bool = False
    is_output: bool = False
    pingpong: bool = False
    chunks: int = 1                   # producer-side write granularity
    region: Optional[_Region] = None
    ddr_base: int = -1
    dr: Optional[Tuple[int, int, int]] = None   # (-9,-9,i): reader-local i
    sf: Dict[str, Tuple[int, int, int]] = field(default_factory=dict)
    sf_ccb: Optional[int] = None      # central space-free (input streams)

    @property
    def eb(self) -> int:
        return dtype_from_tag(self.dtype).byte_width

    @property
    def nbytes(self) -> int:
        return math.prod(self.shape) * self.eb

    @property
    def row_bytes(self) -> int:
        return (math.prod(self.shape) // self.shape[0]) * self.eb


@dataclass
class _NodePlan:
    node: Node
    unit: str
    stage: int = 0
    tpb: Tuple[int, int] = (0, 0)
    single: bool = False     # whole tensors only: transpose, or a reshape
                             # broke outer-axis alignment on some input
    chunks: int = 1
    scratch: Dict[str, _Region] = field(default_factory=dict)
    dr_int: Optional[Tuple[int, int, int]] = None   # padded copy landed
    sf_int: Optional[Tuple[int, int, int]] = None   # padded slot reusable


@dataclass
class ScheduledProgram:
    """Everything the machine needs to run one compiled graph."""

    streams: List[List[TpbInstruction]]
    dma: List[List[DmaDescriptor]]
    routines: Dict[str, RoutineDef]
    end_waits: List[Optional[Tuple[int, int]]]
    input_map: Dict[str, TensorDesc]
    output_map: Dict[str, TensorDesc]
    preload_bytes: Dict[str, bytes] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def instructions(self) -> List[TpbInstruction]:
        return [i for s in self.streams for i in s]


# ---------------------------------------------------------------------------
# stage balancing cost (coarse; the emitted program is costed exactly by
# estimate_latency)

def _node_cost(node: Node, ir: GraphIR, cfg: MachineConfig) -> int:
    k = node.kind
    if k == "matmul":
        a = ir.nodes[node.inputs[0]]
        op = TcuOp("matmul", (a.shape[0], a.shape[1], node.shape[1]),
                   a.dtype, node.dtype)
        return tcu_cycles(op, cfg)[1]
    if k == "conv2d":
        x, w = ir.nodes[node.inputs[0]], ir.nodes[node.inputs[1]]
        pad = node.attr("pad", 0)
        op = TcuOp("conv2d", (*x.shape, w.shape[3], w.shape[0], w.shape[1],
                              node.attr("stride", 1), pad), x.dtype,
                   node.dtype)
        body = tcu_cycles(op, cfg)[1]
        if pad:
            n, h, wi, cin = x.shape
            padded = n * (h + 2 * pad) * (wi + 2 * pad) * cin \
                * dtype_from_tag(x.dtype).byte_width
            body += 2 * -(-padded // LINE)
        return body
    if k == "transpose":
        eb = dtype_from_tag(node.dtype).byte_width
        return max(1, node.elements * eb // LINE)
    n = node.elements
    if k == "pool":
        n *= node.attr("k", 2) ** 2
    sweeps = {"softmax": 3, "layernorm": 4}.get(k, 1)
    return max(1, sweeps * -(-n // cfg.cvu_lanes))


# ---------------------------------------------------------------------------

class _Builder:
    def __init__(self, ir: GraphIR, cfg: MachineConfig, tpbs: int,
                 chunks: Optional[int]):
        self.ir, self.cfg = ir, cfg
        self.tpbs_budget = tpbs
        self.chunks_req = chunks
        self.base_of: Dict[str, str] = {}
        self.edges: Dict[str, _Edge] = {}
        self.plans: List[_NodePlan] = []
        self.plan_of: Dict[str, _NodePlan] = {}
        self.C = 1
        self.notes: List[str] = []
        self.stream0: List[TpbInstruction] = []
        self.seqs: Dict[Tuple[int, int, str], int] = {}
        self.dma0: List[DmaDescriptor] = []
        self.dma1: List[DmaDescriptor] = []

    # -- graph analysis ----------------------------------------------------

    def _resolve(self, name: str) -> str:
        seen = name
        while self.ir.nodes[seen].kind == "reshape":
            seen = self.ir.nodes[seen].inputs[0]
        return seen

    def _collect(self) -> None:
        ir = self.ir
        for node in ir.nodes.values():
            if node.kind == "reshape":
                self.base_of[node.name] = self._resolve(node.name)
                continue
            self.base_of[node.name] = node.name
            e = _Edge(node.name, node.shape, node.dtype,
                      node if node.kind in UNIT_FOR else None)
            e.is_input = node.kind == "input"
            e.is_const = node.kind == "constant"
            self.edges[node.name] = e
        for node in ir.nodes.values():
            if node.kind not in UNIT_FOR:
                continue
            for slot, iname in enumerate(node.inputs):
                base = self.base_of[iname]
                view = ir.nodes[iname].shape
                aligned = view[0] == self.edges[base].shape[0]
                self.edges[base].readers.append((node, slot, aligned))
        for o in ir.outputs:
            self.edges[self.base_of[o]].is_output = True

    # -- placement ----------------------------------------------------------

    def _place(self) -> None:
        cfg = self.cfg
        if not (1 <= self.tpbs_budget
                <= cfg.num_clusters * cfg.tpbs_per_cluster):
            raise TooFewTpbs(
                f"budget of {self.tpbs_budget} TPBs, machine has "
                f"{cfg.num_clusters * cfg.tpbs_per_cluster}")
        order = [n for n in self.ir.nodes.values() if n.kind in UNIT_FOR]
        nonaligned = {r.name for e in self.edges.values()
                      for r, _, ok in e.readers if not ok}
        for n in order:
            if n.kind == "relu" and n.dtype == "i32":
                raise UnsupportedOp(
                    f"{n.name}: i32 relu only runs fused into the "
                    "contraction that feeds it")
            p = _NodePlan(n, UNIT_FOR[n.kind])
            p.single = n.kind == "transpose" or n.name in nonaligned
            self.plans.append(p)
            self.plan_of[n.name] = p
        if not order:
            return
        costs = [_node_cost(n, self.ir, cfg) for n in order]
        index = {n.name: i for i, n in enumerate(order)}

        groups: List[Set[str]] = []
        for e in self.edges.values():
            rd = {r.name for r, _, _ in e.readers}
            if e.producer is not None and len(rd) > 1:
                groups.append(rd)
            if e.producer is not None and e.is_output and rd:
                groups.append(rd | {e.producer.name})

        k = min(self.tpbs_budget, len(order))
        while True:
            bounds = self._greedy_bounds(costs, k)
            bounds = self._merge_forced(bounds, groups, index)
            sums = [sum(costs[a:b]) for a, b in bounds]
            if len(sums) == 1 or max(sums) <= 2 * (sum(sums) / len(sums)):
                break
            k -= 1
        for s, (a, b) in enumerate(bounds):
            for n in order[a:b]:
                p = self.plan_of[n.name]
                p.stage = s
                p.tpb = divmod(s, cfg.tpbs_per_cluster)

    @staticmethod
    def _greedy_bounds(costs: List[int], k: int) -> List[Tuple[int, int]]:
        n = len(costs)
        bounds, i = [], 0
        for s in range(k):
            left = k - s
            if left == 1:
                bounds.append((i, n))
                break
            limit = n - i - (left - 1)      # keep one node per later stage
            target = sum(costs[i:]) / left
            acc, j = 0, i
            while j < i + limit:
                acc += costs[j]
                j += 1
                if acc >= target:
                    break
            j = max(j, i + 1)
            bounds.append((i, j))
            i = j
        return bounds

    @staticmethod
    def _merge_forced(bounds, groups, index) -> List[Tuple[int, int]]:
        def stage_of(pos):
            for s, (a, b) in enumerate(bounds):
                if a <= pos < b:
                    return s
            raise AssertionError(pos)

        changed = True
        while changed:
            changed = False
            for g in groups:
                ss = sorted(stage_of(index[m]) for m in g)
                if ss[0] != ss[-1]:
                    lo, hi = ss[0], ss[-1]
                    merged = (bounds[lo][0], bounds[hi][1])
                    bounds = bounds[:lo] + [merged] + bounds[hi + 1:]
                    changed = True
                    break
        return bounds

    # -- chunking and allocation --------------------------------------------

    def _structural_pingpong(self, e: _Edge) -> bool:
        if not e.readers or e.is_output or e.is_const:
            return False
        if e.producer is not None and self.plan_of[e.producer.name].single:
            return False
        for node, slot, aligned in e.readers:
            if (node.kind, slot) in _WHOLE_SLOTS or not aligned:
                return False
            if self.plan_of[node.name].single:
                return False
        return True

    def _choose_chunks(self) -> None:
        streaming = [p.node.shape[0] for p in self.plans if not p.single]
        cap = min(streaming) if streaming else 1
        cap = max(1, min(cap, MAX_CHUNKS))
        if self.chunks_req is not None:
            if not (1 <= self.chunks_req <= cap):
                raise DoesNotFit(
                    f"{self.chunks_req} chunks requested, but the narrowest "
                    f"outermost axis allows at most {cap}")
            candidates = [self.chunks_req]
        else:
            candidates = list(range(1, cap + 1))
        for c in candidates:
            if self._allocate(c):
                self.C = c
                return
        raise DoesNotFit(
            "no chunk count up to "
            f"{candidates[-1]} fits the scratchpad budget")

    def _reader_tpb(self, e: _Edge) -> Tuple[int, int]:
        tpbs = {self.plan_of[r.name].tpb for r, _, _ in e.readers}
        if not tpbs:
            return self.plan_of[e.producer.name].tpb
        if len(tpbs) > 1:
            raise AssertionError(f"readers of {e.name} on {sorted(tpbs)}")
        return tpbs.pop()

    def _allocate(self, c: int) -> bool:
        cfg = self.cfg
        budget = int(cfg.hbsm_bytes * (1 - MARGIN))
        for p in self.plans:
            p.chunks = 1 if p.single else c
            p.scratch = {}
        for e in self.edges.values():
            e.pingpong = c > 1 and self._structural_pingpong(e)
            if e.producer is not None:
                e.chunks = self.plan_of[e.producer.name].chunks
            else:
                e.chunks = c if e.pingpong else 1
            e.region = None

        def region_size(e: _Edge) -> Tuple[int, int]:
            if e.pingpong:
                pitch = _align(_split(e.shape[0], c)[0][1] * e.row_bytes)
                return pitch, min(DEPTH, c)
            return _align(e.nbytes), 1

        gptr = 0
        for e in self.edges.values():
            if e.producer is None and e.readers:
                pitch, slots = region_size(e)
                e.region = _Region(None, gptr, pitch, slots)
                gptr += pitch * slots

        used = sorted({p.tpb for p in self.plans})
        ptr = {t: gptr for t in used}

        def bump(tpb, nbytes, slots=1) -> _Region:
            r = _Region(tpb, ptr[tpb], _align(nbytes), slots)
            ptr[tpb] += r.pitch * slots
            return r

        for e in self.edges.values():
            if e.producer is None or not (e.readers or e.is_output):
                continue
            tpb = self._reader_tpb(e)
            pitch, slots = region_size(e)
            e.region = _Region(tpb, ptr[tpb], pitch, slots)
            ptr[tpb] += pitch * slots

        for p in self.plans:
            node = p.node
            if node.kind == "conv2d" and node.attr("pad", 0):
                x = self.ir.nodes[node.inputs[0]]
                pad = node.attr("pad", 0)
                n, h, w, cin = x.shape
                rows = _split(n, p.chunks)[0][1]
                padded = rows * (h + 2 * pad) * (w + 2 * pad) * cin \
                    * dtype_from_tag(x.dtype).byte_width
                p.scratch["padded"] = bump(p.tpb, padded,
                                           min(DEPTH, p.chunks))
            elif node.kind in ("softmax", "layernorm"):
                rows, length = self._group_geometry(node, p.chunks)
                elems = rows * length
                per_row = 2 if node.kind == "softmax" else 1
                p.scratch["stats"] = bump(p.tpb, per_row * rows * 4)
                p.scratch["stream"] = bump(p.tpb, elems * 4)
                if node.kind == "layernorm":
                    p.scratch["rstd"] = bump(p.tpb, rows * 4)

        if any(v > budget for v in ptr.values()) or gptr > budget:
            return False

        dptr = 0
        for e in self.edges.values():
            if e.is_input or (e.is_const and (e.readers or e.is_output)):
                e.ddr_base = dptr
                dptr += _align(e.nbytes, DDR_ALIGN)
        if dptr > cfg.ddr_bytes:
            return False

        for e in self.edges.values():
            if e.region is not None:
                where = "all" if e.region.tpb is None \
                    else "c%d.t%d" % e.region.tpb
                kind = f"pingpong x{e.region.slots}" if e.pingpong else "full"
                self.notes.append(
                    f"buffer {e.name} {where}+{e.region.base} "
                    f"{e.region.pitch}B {kind}")
        return True

    def _group_geometry(self, node: Node, chunks: int) -> Tuple[int, int]:
        """(largest per-chunk row-group count, trailing axis length)."""
        length = node.shape[-1]
        mid = (math.prod(node.shape) // node.shape[0]) // length
        return _split(node.shape[0], chunks)[0][1] * mid, length

    # -- counters -----------------------------------------------------------

    def _counters(self) -> None:
        cfg = self.cfg
        glob = 0
        for e in self.edges.values():
            if e.producer is None and e.readers:
                e.dr = (-9, -9, glob)   # same index in every reader's file
                self.notes.append(f"counter local.{glob} ready {e.name}")
                glob += 1
        nxt: Dict[Tuple[int, int], int] = {}

        def alloc(tpb: Tuple[int, int], label: str) -> Tuple[int, int, int]:
            idx = nxt.setdefault(tpb, glob)
            if idx >= cfg.sync_counters:
                raise OutOfCounters(
                    f"c{tpb[0]}.t{tpb[1]} needs more than "
                    f"{cfg.sync_counters} counters")
            nxt[tpb] = idx + 1
            self.notes.append(f"counter c{tpb[0]}.t{tpb[1]}.{idx} {label}")
            return (tpb[0], tpb[1], idx)

        ccb_next = DONE_CTR + 1
        for e in self.edges.values():
            if e.producer is None:
                if e.pingpong and e.readers:
                    e.sf_ccb = ccb_next
                    self.notes.append(f"counter ccb.{ccb_next} free {e.name}")
                    ccb_next += 1
                continue
            if not e.readers:
                continue
            prod = self.plan_of[e.producer.name]
            cross = [r for r, _, _ in e.readers
                     if (self.plan_of[r.name].tpb, self.plan_of[r.name].unit)
                     != (prod.tpb, prod.unit)]
            if cross:
                e.dr = alloc(self._reader_tpb(e), f"ready {e.name}")
            if e.pingpong:
                for r in {r.name: r for r in cross}.values():
                    e.sf[r.name] = alloc(prod.tpb,
                                         f"free {e.name}->{r.name}")
        if ccb_next > cfg.sync_counters:
            raise OutOfCounters("central counter file exhausted")
        for p in self.plans:
            node = p.node
            if node.kind == "conv2d" and node.attr("pad", 0):
                p.dr_int = alloc(p.tpb, f"ready {node.name}.padded")
                p.sf_int = alloc(p.tpb, f"free {node.name}.padded")

    # -- read/write helpers ---------------------------------------------------

    def _streams(self, e: _Edge, p: _NodePlan, name: str,
                 whole: bool) -> bool:
        """True when reader chunk i only depends on producer chunk i.

        False means the reader waits for the whole edge: whole-operand
        reads, views that break outer-axis alignment, chunk-count
        mismatches, and cuts off line boundaries (reads round up to whole
        lines, so a sliced reader may touch the first bytes of the next
        chunk while it is still being written)."""
        if whole or self.ir.nodes[name].shape[0] != e.shape[0]:
            return False
        if e.pingpong:
            return True
        if e.chunks != p.chunks:
            return False
        return all((o * e.row_bytes) % LINE == 0
                   for o, _ in _split(e.shape[0], e.chunks)[1:])

    def _in_read(self, p: _NodePlan, name: str, i: int, whole: bool):
        """-> (addr, nbytes, rows, monitor or None) for one input operand."""
        base = self.base_of[name]
        e = self.edges[base]
        view = self.ir.nodes[name].shape
        aligned = view[0] == e.shape[0]
        rowb = (math.prod(view) // view[0]) * e.eb
        streams = self._streams(e, p, name, whole)
        if whole or not aligned:
            addr, nbytes, rows = e.region.base, e.nbytes, view[0]
        else:
            off, rows = _split(view[0], p.chunks)[i]
            nbytes = rows * rowb
            addr = e.region.slot_base(i) if e.pingpong \
                else e.region.base + off * rowb
        expected = i + 1 if streams else e.chunks
        mon = None
        if e.dr is not None:
            need = e.producer is None or \
                (self.plan_of[e.producer.name].tpb,
                 self.plan_of[e.producer.name].unit) != (p.tpb, p.unit)
            if need:
                ctr = (p.tpb[0], p.tpb[1], e.dr[2]) if e.dr[0] == -9 else e.dr
                mon = SyncAction("monitor", ctr, max(1, expected))
        return addr, nbytes, rows, mon

    def _in_sf_updates(self, p: _NodePlan, i: int) -> List[SyncAction]:
        out, seen = [], set()
        for name in p.node.inputs:
            base = self.base_of[name]
            if base in seen:
                continue
            seen.add(base)
            e = self.edges[base]
            if not e.pingpong:
                continue
            if e.producer is None:
                out.append(SyncAction("update", (-1, -1, e.sf_ccb),
                                      stage="after_complete"))
            elif p.node.name in e.sf:
                out.append(SyncAction("update", e.sf[p.node.name],
                                      stage="after_complete"))
        return out

    def _out_write(self, p: _NodePlan, i: int):
        """-> (addr, rows, remote, gate monitors, completion updates)."""
        e = self.edges[p.node.name]
        off, rows = _split(e.shape[0], p.chunks)[i]
        if e.pingpong:
            addr = e.region.slot_base(i)
        else:
            addr = e.region.base + off * e.row_bytes
        remote = e.region.tpb if e.region.tpb != p.tpb else None
        mons = []
        if e.pingpong and i >= DEPTH:
            for ctr in e.sf.values():
                mons.append(SyncAction("monitor", ctr, i - 1))
        upds = []
        if e.dr is not None:
            upds.append(SyncAction("update", e.dr, stage="after_complete"))
        if e.is_output and e.producer is not None:
            upds.append(SyncAction("update", (-1, -1, DONE_CTR),
                                   stage="after_complete"))
        return addr, rows, remote, mons, upds

    def _push(self, p: _NodePlan, unit: str, op, ins, out, out_run,
              remote, syncs) -> None:
        c, t = p.tpb
        key = (c, t, unit)
        seq = self.seqs.get(key, 0)
        self.seqs[key] = seq + 1
        walkers = tuple(w for w, _ in ins)
        runs = tuple(r for _, r in ins)
        self.stream0.append(TpbInstruction(
            seq, unit, mask_of(c * self.cfg.tpbs_per_cluster + t), op,
            walkers, out[0] if out else None, tuple(syncs), runs,
            out[1] if out else LINE, remote))

    # -- per-op emitters ------------------------------------------------------

    def _emit_all(self) -> None:
        # units run their queue in order, so per-queue emission order is
        # itself a dependency mechanism (same-unit neighbours get no
        # counters), and a queue head waiting on a counter must never sit
        # ahead of the work that will bump it: emit (node, chunk) groups
        # in dependency order, chunk-major where the graph allows
        deps: Dict[Tuple[int, int], Set[Tuple[int, int]]] = {}
        idx = {p.node.name: k for k, p in enumerate(self.plans)}
        for k, p in enumerate(self.plans):
            for i in range(p.chunks):
                deps[(k, i)] = set() if i == 0 else {(k, i - 1)}
        for k, p in enumerate(self.plans):
            for slot, name in enumerate(p.node.inputs):
                e = self.edges[self.base_of[name]]
                if e.producer is None:
                    continue
                kq = idx[e.producer.name]
                whole = (p.node.kind, slot) in _WHOLE_SLOTS
                streams = self._streams(e, p, name, whole)
                for i in range(p.chunks):
                    deps[(k, i)].add((kq, i if streams else e.chunks - 1))
                if e.pingpong:
                    # writing chunk i reuses the slot this reader must
                    # have drained DEPTH chunks earlier
                    for i in range(DEPTH, e.chunks):
                        deps[(kq, i)].add((k, i - DEPTH))
        after: Dict[Tuple[int, int], List[Tuple[int, int]]] = {}
        for g, d in deps.items():
            for h in d:
                after.setdefault(h, []).append(g)
        heap = [(i, k) for (k, i), d in deps.items() if not d]
        heapq.heapify(heap)
        emitted = 0
        while heap:
            i, k = heapq.heappop(heap)
            p = self.plans[k]
            getattr(self, "_emit_" + p.node.kind)(p, i)
            emitted += 1
            for g in after.get((k, i), ()):
                deps[g].discard((k, i))
                if not deps[g]:
                    heapq.heappush(heap, (g[1], g[0]))
        assert emitted == sum(p.chunks for p in self.plans), \
            "instruction dependency cycle"
        self._emit_dma()

    def _emit_matmul(self, p: _NodePlan, i: int) -> None:
        node = p.node
        a_name, b_name = node.inputs
        kdim = self.ir.nodes[a_name].shape[1]
        ncol = node.shape[1]
        in_dt = self.ir.nodes[a_name].dtype
        a_addr, a_bytes, rows, a_mon = self._in_read(p, a_name, i, False)
        b_addr, b_bytes, _, b_mon = self._in_read(p, b_name, i, True)
        o_addr, o_rows, remote, mons, upds = self._out_write(p, i)
        op = TcuOp("matmul", (rows, kdim, ncol), in_dt, node.dtype,
                   activation=node.fused_activation)
        ebo = dtype_from_tag(node.dtype).byte_width
        syncs = [m for m in (a_mon, b_mon) if m] + mons + upds \
            + self._in_sf_updates(p, i)
        self._push(p, "TCU", op,
                   [_flat(a_addr, a_bytes), _flat(b_addr, b_bytes)],
                   _flat(o_addr, o_rows * ncol * ebo), None, remote, syncs)

    def _emit_conv2d(self, p: _NodePlan, i: int) -> None:
        node = p.node
        x_name, w_name = node.inputs
        x = self.ir.nodes[x_name]
        w = self.ir.nodes[w_name]
        pad = node.attr("pad", 0)
        stride = node.attr("stride", 1)
        _, h, wi, cin = x.shape
        kh, kw, _, cout = w.shape
        eb = dtype_from_tag(x.dtype).byte_width
        x_addr, x_bytes, rows, x_mon = self._in_read(p, x_name, i, False)
        w_addr, w_bytes, _, w_mon = self._in_read(p, w_name, i, True)
        o_addr, o_rows, remote, mons, upds = self._out_write(p, i)

        syncs_conv: List[SyncAction] = []
        if pad:
            hp, wp = h + 2 * pad, wi + 2 * pad
            slot = p.scratch["padded"]
            s_addr = slot.slot_base(i)
            padded_bytes = rows * hp * wp * cin * eb
            fill_syncs = []
            if i >= DEPTH:
                fill_syncs.append(SyncAction("monitor", p.sf_int, i - 1))
            self._push(p, "DTDU", DtduOp("fill"), [],
                       _flat(s_addr, padded_bytes), None, None, fill_syncs)
            rb = cin * eb
            first = s_addr + (pad * wp + pad) * rb
            out_w = WalkerConfig.of(
                (first, hp * wp * rb, first + (rows - 1) * hp * wp * rb),
                (0, wp * rb, (h - 1) * wp * rb))
            copy_syncs = [m for m in (x_mon,) if m]
            copy_syncs.append(SyncAction("update", p.dr_int,
                                         stage="after_complete"))
            self._push(p, "DTDU", DtduOp("copy"),
                       [_flat(x_addr, x_bytes)], (out_w, wi * rb),
                       None, None, copy_syncs)
            syncs_conv.append(SyncAction("monitor", p.dr_int, i + 1))
            syncs_conv.append(SyncAction("update", p.sf_int,
                                         stage="after_complete"))
            act_base, ah, aw = s_addr, hp, wp
        else:
            act_base, ah, aw = x_addr, h, wi
            if x_mon:
                syncs_conv.append(x_mon)

        op = TcuOp("conv2d", (rows, ah, aw, cin, cout, kh, kw, stride, 0),
                   x.dtype, node.dtype, activation=node.fused_activation)
        ho, wo = op.conv_out_hw
        rb = cin * eb
        act_w = WalkerConfig.of(
            (act_base, ah * aw * rb, act_base + (rows - 1) * ah * aw * rb),
            (0, stride * aw * rb, (ho - 1) * stride * aw * rb),
            (0, stride * rb, (wo - 1) * stride * rb),
            (0, aw * rb, (kh - 1) * aw * rb),
            (0, rb, (kw - 1) * rb))
        ebo = dtype_from_tag(node.dtype).byte_width
        if w_mon:
            syncs_conv.append(w_mon)
        syncs_conv += mons + upds + self._in_sf_updates(p, i)
        self._push(p, "TCU", op,
                   [(act_w, rb), _flat(w_addr, w_bytes)],
                   _flat(o_addr, o_rows * ho * wo * cout * ebo),
                   None, remote, syncs_conv)

    def _vector(self, p: _NodePlan, i: int, pipe: CvuPipeline, length: int,
                in_dtype: str, ins, out, remote, syncs,
                buf_base: int = 0) -> None:
        op = VectorOp(pipe, length, in_dtype, buf_base)
        self._push(p, "CVU", op, ins, out, None, remote, syncs)

    def _emit_elemwise(self, p: _NodePlan, i: int,
                       stages: Tuple[CvuStage, ...]) -> None:
        node = p.node
        ins, mons = [], []
        for name in node.inputs:
            addr, nbytes, rows, mon = self._in_read(p, name, i, False)
            ins.append(_flat(addr, nbytes))
            if mon:
                mons.append(mon)
        o_addr, o_rows, remote, sf_mons, upds = self._out_write(p, i)
        length = o_rows * (node.elements // node.shape[0])
        ebo = dtype_from_tag(node.dtype).byte_width
        pipe = CvuPipeline(stages, out_dtype=node.dtype)
        syncs = mons + sf_mons + upds + self._in_sf_updates(p, i)
        self._vector(p, i, pipe, length, self.ir.nodes[node.inputs[0]].dtype,
                     ins, _flat(o_addr, length * ebo), remote, syncs)

    def _emit_add(self, p, i):
        self._emit_elemwise(p, i, (CvuStage("add", "a", "b"),))

    def _emit_mul(self, p, i):
        self._emit_elemwise(p, i, (CvuStage("mul", "a", "b"),))

    def _emit_relu(self, p, i):
        self._emit_elemwise(p, i, (CvuStage("max", "a", "imm", imm=0.0),))

    def _emit_ewchain(self, p, i):
        stages = []
        for st in p.node.attr("stages"):
            kind, a, b = st.split(":")
            if kind == "relu":
                stages.append(CvuStage("max", a, "imm", imm=0.0))
            else:
                stages.append(CvuStage(kind, a, b))
        self._emit_elemwise(p, i, tuple(stages))

    def _emit_pool(self, p: _NodePlan, i: int) -> None:
        node = p.node
        x = self.ir.nodes[node.inputs[0]]
        k = node.attr("k", 2)
        stride = node.attr("stride", k)
        _, h, wi, ch = x.shape
        _, ho, wo, _ = node.shape
        eb = dtype_from_tag(x.dtype).byte_width
        addr, _, rows, mon = self._in_read(p, node.inputs[0], i, False)
        win = WalkerConfig.of(
            (addr, h * wi * ch * eb, addr + (rows - 1) * h * wi * ch * eb),
            (0, stride * wi * ch * eb, (ho - 1) * stride * wi * ch * eb),
            (0, stride * ch * eb, (wo - 1) * stride * ch * eb),
            (0, eb, (ch - 1) * eb),
            (0, wi * ch * eb, (k - 1) * wi * ch * eb),
            (0, ch * eb, (k - 1) * ch * eb))
        group = k * k
        if node.attr("kind", "max") == "max":
            stages = (CvuStage("reduce_max", "a", group=group),)
        else:
            stages = (CvuStage("reduce_sum", "a", group=group),
                      CvuStage("scale_bias", "prev", imm=1.0 / group))
        o_addr, o_rows, remote, sf_mons, upds = self._out_write(p, i)
        out_elems = o_rows * ho * wo * ch
        ebo = dtype_from_tag(node.dtype).byte_width
        pipe = CvuPipeline(stages, out_dtype=node.dtype)
        syncs = ([mon] if mon else []) + sf_mons + upds \
            + self._in_sf_updates(p, i)
        self._vector(p, i, pipe, out_elems * group, x.dtype, [(win, eb)],
                     _flat(o_addr, out_elems * ebo), remote, syncs)

    def _emit_softmax(self, p: _NodePlan, i: int) -> None:
        node = p.node
        x = self.ir.nodes[node.inputs[0]]
        length = node.shape[-1]
        addr, nbytes, rows0, mon = self._in_read(p, node.inputs[0], i, False)
        rows = rows0 * (math.prod(node.shape) // node.shape[0]) // length
        n = rows * length
        stats = p.scratch["stats"].base
        scratch = p.scratch["stream"].base
        p1 = CvuPipeline((
            CvuStage("reduce_max", "a", group=length, dst="buf0"),
            CvuStage("broadcast_scalar", "buf0", group=length),
            CvuStage("sub", "a", "prev"),
            CvuStage("scale_bias", "prev", imm=math.log2(math.e)),
            CvuStage("exp2_approx", "prev"),
            CvuStage("reduce_sum", "prev", group=length, dst="buf1"),
        ), buf_elems=(rows, rows))
        self._vector(p, i, p1, n, x.dtype, [_flat(addr, nbytes)],
                     _flat(scratch, n * 4), None,
                     [mon] if mon else [], buf_base=stats)
        o_addr, o_rows, remote, sf_mons, upds = self._out_write(p, i)
        ebo = dtype_from_tag(node.dtype).byte_width
        p2 = CvuPipeline((
            CvuStage("broadcast_scalar", "buf1", group=length),
            CvuStage("div", "a", "prev"),
        ), out_dtype=node.dtype, buf_elems=(rows, rows))
        syncs = sf_mons + upds + self._in_sf_updates(p, i)
        self._vector(p, i, p2, n, "f32", [_flat(scratch, n * 4)],
                     _flat(o_addr, n * ebo), remote, syncs, buf_base=stats)

    def _emit_layernorm(self, p: _NodePlan, i: int) -> None:
        # mean first, then the variance of the centered values: the naive
        # sum-of-squares form cancels catastrophically in f32 once an
        # upstream contraction inflates the scale
        node = p.node
        x = self.ir.nodes[node.inputs[0]]
        length = node.shape[-1]
        eps = node.attr("eps", 1e-5)
        addr, nbytes, rows0, mon = self._in_read(p, node.inputs[0], i, False)
        rows = rows0 * (math.prod(node.shape) // node.shape[0]) // length
        n = rows * length
        stats = p.scratch["stats"].base
        scratch = p.scratch["stream"].base
        rstd = p.scratch["rstd"].base
        inv = 1.0 / length
        p1 = CvuPipeline((
            CvuStage("reduce_sum", "a", group=length, dst="buf0"),
        ), out="buf0", buf_elems=(rows,))
        self._vector(p, i, p1, n, x.dtype, [_flat(addr, nbytes)], None, None,
                     [mon] if mon else [], buf_base=stats)
        # center against the per-row mean
        mon2 = self._in_read(p, node.inputs[0], i, False)[3]
        p2 = CvuPipeline((
            CvuStage("broadcast_scalar", "buf0", group=length),
            CvuStage("scale_bias", "prev", imm=inv),
            CvuStage("sub", "a", "prev"),
        ), buf_elems=(rows,))
        self._vector(p, i, p2, n, x.dtype, [_flat(addr, nbytes)],
                     _flat(scratch, n * 4), None,
                     [mon2] if mon2 else [], buf_base=stats)
        # per-row reciprocal stddev from the centered stream
        p3 = CvuPipeline((
            CvuStage("mul", "a", "a"),
            CvuStage("reduce_sum", "prev", group=length),
            CvuStage("scale_bias", "prev", imm=inv, imm2=eps),
            CvuStage("sqrt", "prev"),
            CvuStage("reciprocal", "prev"),
        ))
        self._vector(p, i, p3, n, "f32", [_flat(scratch, n * 4)],
                     _flat(rstd, 4 * rows), None, [])
        o_addr, o_rows, remote, sf_mons, upds = self._out_write(p, i)
        ebo = dtype_from_tag(node.dtype).byte_width
        p4 = CvuPipeline((
            CvuStage("broadcast_scalar", "buf0", group=length),
            CvuStage("mul", "a", "prev"),
        ), out_dtype=node.dtype, buf_elems=(rows,))
        syncs = sf_mons + upds + self._in_sf_updates(p, i)
        self._vector(p, i, p4, n, "f32", [_flat(scratch, n * 4)],
                     _flat(o_addr, n * ebo), remote, syncs, buf_base=rstd)

    def _emit_transpose(self, p: _NodePlan, i: int) -> None:
        node = p.node
        x = self.ir.nodes[node.inputs[0]]
        eb = dtype_from_tag(node.dtype).byte_width
        addr, nbytes, _, mon = self._in_read(p, node.inputs[0], i, True)
        o_addr, _, remote, sf_mons, upds = self._out_write(p, i)
        op = DtduOp("transpose2d", x.shape[0], x.shape[1], eb)
        syncs = ([mon] if mon else []) + sf_mons + upds \
            + self._in_sf_updates(p, i)
        self._push(p, "DTDU", op, [_flat(addr, nbytes)],
                   _flat(o_addr, nbytes), None, remote, syncs)

    # -- staging ----------------------------------------------------------

    def _emit_dma(self) -> None:
        for e in self.edges.values():
            if not e.is_const or not e.readers:
                continue
            targets = tuple(sorted({self.plan_of[r.name].tpb
                                    for r, _, _ in e.readers}))
            self.dma1.append(DmaDescriptor(
                DDR, e.ddr_base, "drb", e.region.base, e.nbytes,
                targets, None, e.dr[2]))
        full_inputs = [e for e in self.edges.values()
                       if e.is_input and e.readers and not e.pingpong]
        for e in full_inputs:
            targets = tuple(sorted({self.plan_of[r.name].tpb
                                    for r, _, _ in e.readers}))
            self.dma0.append(DmaDescriptor(
                DDR, e.ddr_base, "drb", e.region.base, e.nbytes,
                targets, None, e.dr[2]))
        streamed = [e for e in self.edges.values()
                    if e.is_input and e.pingpong]
        for i in range(self.C):
            for e in streamed:
                off, rows = _split(e.shape[0], self.C)[i]
                targets = tuple(sorted({self.plan_of[r.name].tpb
                                        for r, _, _ in e.readers}))
                n_readers = len({r.name for r, _, _ in e.readers})
                wait = None
                if i >= DEPTH:
                    wait = (e.sf_ccb, (i - 1) * n_readers)
                self.dma0.append(DmaDescriptor(
                    DDR, e.ddr_base + off * e.row_bytes, "drb",
                    e.region.slot_base(i), rows * e.row_bytes,
                    targets, wait, e.dr[2]))

    # -- assembly -----------------------------------------------------------

    def build(self) -> ScheduledProgram:
        self._collect()
        self._place()
        self._choose_chunks()
        self._counters()
        self._emit_all()

        cfg = self.cfg
        input_map: Dict[str, TensorDesc] = {}
        preload: Dict[str, bytes] = {}
        for e in self.edges.values():
            if e.ddr_base < 0:
                continue
            desc = TensorDesc.dense(e.shape, dtype_from_tag(e.dtype),
                                    AddressSpace(DDR), e.ddr_base)
            input_map[e.name] = desc
            if e.is_const:
                preload[e.name] = constant_value(
                    self.ir.nodes[e.name]).tobytes()

        output_map: Dict[str, TensorDesc] = {}
        for o in self.ir.outputs:
            base = self.base_of[o]
            e = self.edges[base]
            shape = self.ir.nodes[o].shape
            dt = dtype_from_tag(e.dtype)
            if e.producer is None:
                output_map[o] = TensorDesc.dense(shape, dt,
                                                 AddressSpace(DDR),
                                                 e.ddr_base)
            else:
                c, t = e.region.tpb
                output_map[o] = TensorDesc.dense(shape, dt,
                                                 AddressSpace(HBSM, c, t),
                                                 e.region.base)

        total = sum(e.chunks for e in self.edges.values()
                    if e.is_output and e.producer is not None)
        n_disp = cfg.dispatcher_contexts
        end_waits: List[Optional[Tuple[int, int]]] = [None] * n_disp
        streams: List[List[TpbInstruction]] = [[] for _ in range(n_disp)]
        streams[0] = self.stream0
        if total:
            end_waits[0] = (DONE_CTR, total)

        stages = sorted({p.stage for p in self.plans}) if self.plans else []
        prog = ScheduledProgram(
            streams, [self.dma0, self.dma1], {}, end_waits,
            input_map, output_map, preload, self.notes,
            {"graph": self.ir.name, "chunks": str(self.C),
             "stages": str(len(stages))})
        prog.meta["estimate"] = str(estimate_latency(prog, cfg))
        return prog


def compile_graph(ir: GraphIR, cfg: MachineConfig, *, tpbs: int = 4,
                  chunks: Optional[int] = None,
                  optimize: bool = True) -> ScheduledProgram:
    """Lower a validated graph to a program for the given machine."""
    if optimize:
        ir = run_all(ir)
    else:
        # not an optimization: the vector unit has no i32 path, so a relu
        # on accumulator outputs only exists fused into its contraction
        ir = fuse_activation(ir, dtypes=("i32",))
    return _Builder(ir, cfg, tpbs, chunks).build()


# ---------------------------------------------------------------------------
# latency estimate: a lower bound from per-unit work alone

def estimate_latency(program: ScheduledProgram, cfg: MachineConfig) -> int:
    """Max over units of the unit's summed unstalled instruction latencies.

    Each unit is exclusive while an instruction runs, so its own sum is a
    hard lower bound on the makespan; taking the bottleneck unit keeps the
    estimate below any feasible schedule while still reflecting balance."""
    busy: Dict[Tuple[int, str], int] = {}
    for instr in program.instructions:
        op = instr.op
        if isinstance(op, TcuOp):
            f, b, d = tcu_cycles(op, cfg)
        elif isinstance(op, VectorOp):
            f, b, d = cvu_cycles(op.pipeline, op.length, cfg)
        elif isinstance(op, DtduOp):
            nb = len(expand(instr.out_walker)) * instr.out_run
            f, b, d = dtdu_cycles(nb, cfg)
        else:
            f, b, d = 0, cfg.csu_overhead, 0
        key = (instr.tpb_mask, instr.unit)
        busy[key] = busy.get(key, 0) + f + b + d
    return max(busy.values(), default=0)


# ---------------------------------------------------------------------------
# program files

_MAGIC = "program npusim-v1"


def program_to_text(prog: ScheduledProgram) -> str:
    lines = [_MAGIC]
    for k in sorted(prog.meta):
        lines.append(f"meta {k}={prog.meta[k]}")
    for name, routine in sorted(prog.routines.items()):
        lines.append(f"routine {name} {routine.cost_cycles} "
                     f"{routine.behavior}")
    for name, desc in prog.input_map.items():
        if name in prog.preload_bytes:
            blob = base64.b64encode(
                zlib.compress(prog.preload_bytes[name])).decode()
            lines.append(f"const {name} {desc.short()} {blob}")
        else:
            lines.append(f"ddr {name} {desc.short()}")
    for name, desc in prog.output_map.items():
        lines.append(f"out {name} {desc.short()}")
    for d, wait in enumerate(prog.end_waits):
        if wait is not None:
            lines.append(f"endwait {d} {wait[0]} {wait[1]}")
    for e, descs in enumerate(prog.dma):
        for desc in descs:
            lines.append(f"dma {e} {desc.short()}")
    for d, stream in enumerate(prog.streams):
        if not stream:
            continue
        lines.append(f"stream {d}")
        for instr in stream:
            lines.append(to_line(instr))
        lines.append("endstream")
    for note in prog.notes:
        lines.append(f"note {note}")
    return "\n".join(lines) + "\n"


def program_from_text(text: str, cfg: MachineConfig) -> ScheduledProgram:
    lines = text.splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ParseError("not a program file")
    n_disp = cfg.dispatcher_contexts
    prog = ScheduledProgram([[] for _ in range(n_disp)], [[], []], {},
                            [None] * n_disp, {}, {})
    stream: Optional[int] = None
    for ln in lines[1:]:
        ln = ln.strip()
        if not ln:
            continue
        if stream is not None:
            if ln == "endstream":
                stream = None
                continue
            prog.streams[stream].append(from_line(ln))
            continue
        head, _, rest = ln.partition(" ")
        if head == "meta":
            k, _, v = rest.partition("=")
            prog.meta[k] = v
        elif head == "routine":
            name, cost, behavior = rest.split()
            prog.routines[name] = RoutineDef(name, int(cost), behavior)
        elif head == "ddr":
            name, short = rest.split(" ", 1)
            prog.input_map[name] = desc_from_short(short)
        elif head == "const":
            name, short, blob = rest.split(" ", 2)
            prog.input_map[name] = desc_from_short(short)
            prog.preload_bytes[name] = zlib.decompress(
                base64.b64decode(blob))
        elif head == "out":
            name, short = rest.split(" ", 1)
            prog.output_map[name] = desc_from_short(short)
        elif head == "endwait":
            d, idx, val = rest.split()
            prog.end_waits[int(d)] = (int(idx), int(val))
        elif head == "dma":
            e, short = rest.split(" ", 1)
            prog.dma[int(e)].append(dma_from_short(short))
        elif head == "stream":
            stream = int(rest)
        elif head == "note":
            prog.notes.append(rest)
        else:
            raise ParseError(f"unknown program record {head!r}")
    return prog


def save_program(path: str, prog: ScheduledProgram) -> None:
    with open(path, "w") as fh:
        fh.write(program_to_text(prog))


def load_program_file(path: str, cfg: MachineConfig) -> ScheduledProgram:
    with open(path) as fh:
        return program_from_text(fh.read(), cfg)
