"""The three interconnects plus the central control block.

IcbChannel   daisy chain that carries instructions cluster to cluster at 64
             bits/cycle.  One transmission occupies the chain head for
             ceil(bits/64) cycles; a masked cluster taps the stream as it
             passes, so multicast is a single send with arrival staggered by
             hop count.  A full instruction buffer stalls the whole chain
             behind the blocked delivery, nothing is dropped.
DrbRing      broadcast ring with a fixed aggregate byte budget.  Active
             streams split the budget equally (integer shares, remainder to
             the oldest), recomputed only when a stream starts or ends, so
             schedules are deterministic.
MeshFabric   4x4 grid, dimension-ordered (column then row) routing, equal
             link sharing, fixed per-hop latency, per source-destination
             pair FIFO ordering.
CcbState     dispatcher cursors, the banked control SRAM, two DMA engines
             drawing on one shared DDR byte pool, the central counter file
             used for barriers and end-of-task, and the interrupt log.

Node map for the mesh: node 0 is the control block (DDR side), node 1 the
control SRAM, nodes 2..15 the TPB clusters in index order.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from npusim.config import CCB_SRAM, DDR, MachineConfig
from npusim.errors import BadDescriptor, OutOfRange, UnroutableTarget
from npusim.hbsm import BankedMemory
from npusim.isa import TpbInstruction, icb_cycles
from npusim.sync import SyncCounterFile

NEVER = (1 << 62)   # sentinel "no event scheduled" cycle


# ---------------------------------------------------------------------------
# Instruction chain

@dataclass
class _Delivery:
    arrival: int
    cluster: int
    tpbs: Tuple[int, ...]     # local tpb indices to enqueue at
    instr: TpbInstruction
    dispatcher: int


class IcbChannel:
    """Serializing instruction pipe with per-hop tap-off.

    send() may only be called when free_at <= now; the engine picks which
    dispatcher goes next (lowest index among the ready).  Deliveries come
    back in chain order through head_due/pop_head so a blocked cluster
    buffer holds everything behind it.
    """

    def __init__(self, cfg: MachineConfig):
        self.bits_per_cycle = cfg.icb_bits_per_cycle
        self.hop = cfg.icb_hop_latency
        self.tpbs_per_cluster = cfg.tpbs_per_cluster
        self.free_at = 0
        self.pending: deque[_Delivery] = deque()
        self.sent = 0

    def send(self, dispatcher: int, instr: TpbInstruction, now: int) -> int:
        if now < self.free_at:
            raise OutOfRange(f"chain busy until {self.free_at}, send at {now}")
        span = icb_cycles(instr.encoded_bits, self.bits_per_cycle)
        self.free_at = now + span
        per_cluster: Dict[int, List[int]] = {}
        for c, t in instr.tpbs(self.tpbs_per_cluster):
            per_cluster.setdefault(c, []).append(t)
        for c in sorted(per_cluster):
            self.pending.append(_Delivery(
                now + span + (c + 1) * self.hop, c,
                tuple(per_cluster[c]), instr, dispatcher))
        self.sent += 1
        return self.free_at

    def head_due(self, now: int) -> Optional[_Delivery]:
        if self.pending and self.pending[0].arrival <= now:
            return self.pending[0]
        return None

    def pop_head(self) -> _Delivery:
        return self.pending.popleft()

    def busy(self) -> bool:
        return bool(self.pending)

    def next_event(self, now: int) -> int:
        if not self.pending:
            return NEVER
        return max(now + 1, self.pending[0].arrival)


# ---------------------------------------------------------------------------
# Broadcast ring

@dataclass
class _Stream:
    sid: int
    nbytes: int
    moved: int = 0
    rate_cap: int = 1 << 30   # extra per-cycle cap (DDR-fed streams)
    on_complete: Optional[Callable[[int], None]] = None


class DrbRing:
    """Equal-share broadcast ring.

    Shares are integers: capacity // n per stream, remainder spread one
    byte each to the oldest streams.  Recomputation happens implicitly
    every cycle from the active set, which only changes at stream start
    and completion, so between boundaries rates are constant.
    """

    def __init__(self, cfg: MachineConfig):
        self.capacity = cfg.drb_aggregate_bytes_per_cycle
        self.active: Dict[int, _Stream] = {}
        self._next_sid = 0

    def start(self, nbytes: int,
              on_complete: Optional[Callable[[int], None]] = None,
              rate_cap: int = 1 << 30) -> int:
        if nbytes <= 0:
            raise BadDescriptor(f"stream of {nbytes} bytes")
        sid = self._next_sid
        self._next_sid += 1
        self.active[sid] = _Stream(sid, nbytes, 0, rate_cap, on_complete)
        return sid

    def set_cap(self, sid: int, rate_cap: int) -> None:
        self.active[sid].rate_cap = rate_cap

    def shares(self) -> Dict[int, int]:
        n = len(self.active)
        if not n:
            return {}
        base, rem = divmod(self.capacity, n)
        out = {}
        for i, sid in enumerate(sorted(self.active)):
            out[sid] = base + (1 if i < rem else 0)
        return out

    def step(self, now: int) -> List[int]:
        done = []
        for sid, share in self.shares().items():
            st = self.active[sid]
            st.moved += min(share, st.rate_cap, st.nbytes - st.moved)
            if st.moved >= st.nbytes:
                done.append(sid)
        for sid in done:
            st = self.active.pop(sid)
            if st.on_complete:
                st.on_complete(now)
        return done

    def moved(self, sid: int) -> int:
        return self.active[sid].moved

    def busy(self) -> bool:
        return bool(self.active)

    def next_event(self, now: int) -> int:
        if not self.active:
            return NEVER
        eta = NEVER
        for sid, share in self.shares().items():
            st = self.active[sid]
            rate = max(1, min(share, st.rate_cap))
            eta = min(eta, now + math.ceil((st.nbytes - st.moved) / rate))
        return eta


# ---------------------------------------------------------------------------
# Mesh

MESH_DIM = 4
NODE_CCB = 0
NODE_SRAM = 1


def cluster_node(cluster: int) -> int:
    return cluster + 2


def node_xy(node: int) -> Tuple[int, int]:
    if not 0 <= node < MESH_DIM * MESH_DIM:
        raise UnroutableTarget(f"mesh node {node}")
    return node % MESH_DIM, node // MESH_DIM


def route_links(src: int, dst: int) -> List[Tuple[int, int]]:
    """Directed unit links, column direction first then row."""
    if src == dst:
        raise UnroutableTarget("zero-length route")
    x0, y0 = node_xy(src)
    x1, y1 = node_xy(dst)
    links, x, y = [], x0, y0
    while x != x1:
        nx = x + (1 if x1 > x else -1)
        links.append((y * MESH_DIM + x, y * MESH_DIM + nx))
        x = nx
    while y != y1:
        ny = y + (1 if y1 > y else -1)
        links.append((y * MESH_DIM + x, ny * MESH_DIM + x))
        y = ny
    return links


@dataclass
class _Transfer:
    tid: int
    src: int
    dst: int
    nbytes: int
    links: Tuple[Tuple[int, int], ...]
    ready_at: int
    moved: int = 0
    on_complete: Optional[Callable[[int], None]] = None


class MeshFabric:
    """Dimension-ordered grid with equal link sharing.

    A transfer's first byte leaves after hops * hop_latency; same-pair
    transfers go strictly one at a time (FIFO), which keeps arrivals
    ordered no matter how link contention shifts rates.
    """

    def __init__(self, cfg: MachineConfig):
        self.link_rate = cfg.mesh_pair_bytes_per_cycle
        self.hop = cfg.mesh_hop_latency
        self.active: Dict[int, _Transfer] = {}
        self._wait: Dict[Tuple[int, int], deque] = {}
        self._next_tid = 0

    def start(self, src: int, dst: int, nbytes: int, now: int,
              on_complete: Optional[Callable[[int], None]] = None) -> int:
        if nbytes <= 0:
            raise BadDescriptor(f"transfer of {nbytes} bytes")
        links = tuple(route_links(src, dst))
        tid = self._next_tid
        self._next_tid += 1
        tr = _Transfer(tid, src, dst, nbytes, links,
                       now + len(links) * self.hop, 0, on_complete)
        pair = (src, dst)
        queue = self._wait.setdefault(pair, deque())
        if queue or any(t.src == src and t.dst == dst
                        for t in self.active.values()):
            queue.append(tr)
        else:
            self.active[tid] = tr
        return tid

    def _link_users(self, now: int) -> Dict[Tuple[int, int], int]:
        users: Dict[Tuple[int, int], int] = {}
        for tr in self.active.values():
            if tr.ready_at <= now:
                for ln in tr.links:
                    users[ln] = users.get(ln, 0) + 1
        return users

    def step(self, now: int) -> List[int]:
        users = self._link_users(now)
        done = []
        for tid in sorted(self.active):
            tr = self.active[tid]
            if tr.ready_at > now:
                continue
            rate = min(self.link_rate // users[ln] for ln in tr.links)
            tr.moved += min(max(rate, 1), tr.nbytes - tr.moved)
            if tr.moved >= tr.nbytes:
                done.append(tid)
        for tid in done:
            tr = self.active.pop(tid)
            queue = self._wait.get((tr.src, tr.dst))
            if queue:
                nxt = queue.popleft()
                nxt.ready_at = max(nxt.ready_at,
                                   now + 1 + len(nxt.links) * self.hop)
                self.active[nxt.tid] = nxt
            if tr.on_complete:
                tr.on_complete(now)
        return done

    def busy(self) -> bool:
        return bool(self.active) or any(self._wait.values())

    def next_event(self, now: int) -> int:
        if not self.active:
            return NEVER
        users = self._link_users(now)
        eta = NEVER
        for tr in self.active.values():
            if tr.ready_at > now:
                eta = min(eta, tr.ready_at)
                continue
            rate = max(1, min(self.link_rate // users[ln] for ln in tr.links))
            eta = min(eta, now + math.ceil((tr.nbytes - tr.moved) / rate))
        return eta


# ---------------------------------------------------------------------------
# Central control block

@dataclass(frozen=True)
class DmaDescriptor:
    """One copy order for a DMA engine.

    Spaces are "ddr" and "ccb_sram"; a nonempty drb_targets set turns the
    copy into a ring broadcast that lands the same bytes at dst_addr in
    every listed (cluster, tpb) scratchpad.  wait gates the start on a
    central counter reaching a value; update bumps a central counter when
    the last byte lands.
    """

    src_space: str
    src_addr: int
    dst_space: str
    dst_addr: int
    nbytes: int
    drb_targets: Tuple[Tuple[int, int], ...] = ()
    wait: Optional[Tuple[int, int]] = None      # (ccb counter index, expected)
    update: Optional[int] = None                # ccb counter index

    def __post_init__(self):
        object.__setattr__(self, "drb_targets",
                           tuple((int(c), int(t)) for c, t in self.drb_targets))
        if self.nbytes <= 0:
            raise BadDescriptor(f"dma of {self.nbytes} bytes")
        if self.src_space not in (DDR, CCB_SRAM):
            raise BadDescriptor(f"dma source {self.src_space!r}")
        if self.drb_targets:
            if self.dst_space != "drb":
                raise BadDescriptor("broadcast descriptor must target 'drb'")
        elif {self.src_space, self.dst_space} != {DDR, CCB_SRAM}:
            raise BadDescriptor(
                f"{self.src_space}->{self.dst_space} is not a dma path")

    def short(self) -> str:
        parts = [f"{self.src_space}+{self.src_addr}",
                 f"{self.dst_space}+{self.dst_addr}", str(self.nbytes)]
        if self.drb_targets:
            parts.append("to=" + ",".join(f"{c}.{t}"
                                          for c, t in self.drb_targets))
        if self.wait:
            parts.append(f"wait={self.wait[0]}>={self.wait[1]}")
        if self.update is not None:
            parts.append(f"update={self.update}")
        return " ".join(parts)


def dma_from_short(text: str) -> DmaDescriptor:
    toks = text.split()
    src_space, src_addr = toks[0].rsplit("+", 1)
    dst_space, dst_addr = toks[1].rsplit("+", 1)
    kw: Dict[str, object] = {}
    for tok in toks[3:]:
        key, _, val = tok.partition("=")
        if key == "to":
            kw["drb_targets"] = tuple(tuple(map(int, p.split(".")))
                                      for p in val.split(","))
        elif key == "wait":
            idx, exp = val.split(">=")
            kw["wait"] = (int(idx), int(exp))
        elif key == "update":
            kw["update"] = int(val)
        else:
            raise BadDescriptor(f"dma field {tok!r}")
    return DmaDescriptor(src_space, int(src_addr), dst_space, int(dst_addr),
                         int(toks[2]), **kw)


@dataclass
class Dispatcher:
    """Cursor over one instruction stream plus its end-of-task condition."""

    instrs: List[TpbInstruction] = field(default_factory=list)
    pos: int = 0
    end_wait: Optional[Tuple[int, int]] = None  # (ccb counter, expected)
    ended_at: Optional[int] = None

    @property
    def drained(self) -> bool:
        return self.pos >= len(self.instrs)

    def head(self) -> Optional[TpbInstruction]:
        return None if self.drained else self.instrs[self.pos]


@dataclass
class Interrupt:
    cycle: int
    source: str
    code: str


class _DmaEngine:
    def __init__(self, eid: int):
        self.eid = eid
        self.queue: deque[DmaDescriptor] = deque()
        self.current: Optional[DmaDescriptor] = None
        self.moved = 0
        self.stream_sid: Optional[int] = None


class CcbState:
    """Control block: SRAM, DDR pool, DMA engines, counters, interrupts.

    step() runs one cycle of DMA progress.  DDR bandwidth is granted from
    one shared pool: external claims (gather/scatter traffic) are taken
    first, the engines split the remainder equally; under the "dual" port
    model each engine instead owns a fixed half port and claims come off
    engine 0's half.  Broadcast descriptors feed ring streams whose per
    cycle cap is the engine's DDR share, so a ring-fed copy can never out
    run its DDR side.
    """

    def __init__(self, cfg: MachineConfig, drb: DrbRing,
                 land_broadcast=None):
        self.cfg = cfg
        self.sram = BankedMemory(cfg.ccb_sram_bytes, cfg.ccb_sram_banks,
                                 cfg.ccb_interleave, cfg.ccb_sram_ports,
                                 cfg.ccb_sram_latency)
        self.ddr = bytearray(cfg.ddr_bytes)
        self.counters = SyncCounterFile(cfg.sync_counters)
        self.dispatchers = [Dispatcher() for _ in range(cfg.dispatcher_contexts)]
        self.interrupts: List[Interrupt] = []
        self.engines = [_DmaEngine(e) for e in range(cfg.ccb_dma_engines)]
        self.drb = drb
        self.land_broadcast = land_broadcast   # fn(desc, now) at stream end
        self.ddr_used_now = 0
        self.ddr_trace: List[Tuple[int, int]] = []   # (cycle, bytes) samples
        self._claims = 0

    # --- DDR pool ---

    def claim_ddr(self, nbytes: int) -> int:
        """Reserve pool bytes this cycle (gather/scatter side); returns the
        bytes actually granted."""
        free = self.cfg.ddr_bytes_per_cycle - self._claims
        got = max(0, min(nbytes, free))
        self._claims += got
        return got

    def raise_interrupt(self, now: int, source: str, code: str) -> None:
        self.interrupts.append(Interrupt(now, source, code))

    def submit_dma(self, engine: int, desc: DmaDescriptor) -> None:
        self.engines[engine].queue.append(desc)

    # --- cycle step ---

    def _engine_share(self, live: List[_DmaEngine]) -> Dict[int, int]:
        pool = self.cfg.ddr_bytes_per_cycle - self._claims
        if self.cfg.ddr_port_model == "dual":
            half = self.cfg.ddr_bytes_per_cycle // 2
            shares = {}
            for e in live:
                cap = half
                if e.eid == 0:
                    cap = max(0, self.cfg.ddr_bytes_per_cycle - half
                              - self._claims)
                shares[e.eid] = cap
            return shares
        n = len(live)
        base, rem = divmod(max(0, pool), n)
        return {e.eid: base + (1 if i < rem else 0)
                for i, e in enumerate(live)}

    def step(self, now: int) -> None:
        for eng in self.engines:
            if eng.current is None and eng.queue:
                head = eng.queue[0]
                if head.wait is not None:
                    idx, expected = head.wait
                    if self.counters.value(idx) < expected:
                        continue
                eng.current = eng.queue.popleft()
                eng.moved = 0
                if eng.current.drb_targets:
                    desc = eng.current
                    eng.stream_sid = self.drb.start(
                        desc.nbytes,
                        on_complete=lambda t, e=eng, d=desc:
                            self._finish_broadcast(e, d, t),
                        rate_cap=0)

        live = [e for e in self.engines if e.current is not None]
        if live:
            shares = self._engine_share(live)
            for eng in live:
                desc = eng.current
                give = shares[eng.eid]
                if eng.stream_sid is not None:
                    # ring paces the copy; DDR cap follows this cycle's share
                    cap = give if desc.src_space == DDR else 1 << 30
                    self.drb.set_cap(eng.stream_sid, cap)
                    before = self.drb.moved(eng.stream_sid) \
                        if eng.stream_sid in self.drb.active else None
                    if before is not None and desc.src_space == DDR:
                        # account what the ring will pull this cycle
                        share = self.drb.shares().get(eng.stream_sid, 0)
                        pull = min(cap, share, desc.nbytes - before)
                        self.ddr_used_now += pull
                    continue
                take = min(give, desc.nbytes - eng.moved)
                if take > 0:
                    self._copy(desc, eng.moved, take)
                    eng.moved += take
                    self.ddr_used_now += take
                if eng.moved >= desc.nbytes:
                    self._finish_plain(eng, desc, now)

        self.ddr_trace.append((now, self.ddr_used_now + self._claims))

    def end_cycle(self) -> None:
        self._claims = 0
        self.ddr_used_now = 0

    def _copy(self, desc: DmaDescriptor, offset: int, nbytes: int) -> None:
        lo_s = desc.src_addr + offset
        lo_d = desc.dst_addr + offset
        src = self.ddr if desc.src_space == DDR else self.sram.storage
        dst = self.ddr if desc.dst_space == DDR else self.sram.storage
        dst[lo_d:lo_d + nbytes] = src[lo_s:lo_s + nbytes]

    def _finish_plain(self, eng: _DmaEngine, desc: DmaDescriptor,
                      now: int) -> None:
        eng.current = None
        if desc.update is not None:
            self.counters.update(desc.update)

    def _finish_broadcast(self, eng: _DmaEngine, desc: DmaDescriptor,
                          now: int) -> None:
        # update on a broadcast bumps each TARGET's local counter (inside
        # land_broadcast): units monitor only their own file, so a central
        # bump would be invisible to the consumers the copy feeds.
        eng.current = None
        eng.stream_sid = None
        if self.land_broadcast:
            self.land_broadcast(desc, now)

    def dma_busy(self) -> bool:
        return any(e.current is not None or e.queue for e in self.engines)

    def next_event(self, now: int) -> int:
        """Earliest cycle the DMA side could make progress on its own."""
        if any(e.current is not None for e in self.engines):
            return now + 1
        for e in self.engines:
            if e.queue:
                head = e.queue[0]
                if head.wait is None:
                    return now + 1
                idx, expected = head.wait
                if self.counters.value(idx) >= expected:
                    return now + 1
        return NEVER
