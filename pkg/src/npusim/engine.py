"""Deterministic cycle engine for the whole machine.

Settlement order inside one cycle:

  1 fabric delivery   ring/mesh byte movement and landings, chain-bus
                      instruction drop-off into cluster queues
  2 sync settlement   counter updates queued earlier become visible
  3 monitor release   stalled units re-evaluate their wait conditions
  4 issue             queue pops, functional evaluation, dispatcher sends,
                      service-CPU pops
  5 memory grants     every scratchpad arbitrates one cycle of beats
  6 compute progress  units advance, DMA moves bytes, CPUs tick
  7 bookkeeping       trace, termination, deadlock and watchdog checks

Functional results are computed eagerly at issue: operand bytes are
gathered through the input walkers, the unit math runs in one shot, and
result bytes land in storage immediately.  Beats then replay the same
footprint purely for timing, sync firing, and race detection.  Sync
monitors gate issue, so by the time a consumer evaluates, its producers
have already evaluated; the race detector catches programs that violate
that ordering instead of silently reading stale bytes.

Unit timing is grant-paced: body step k of K needs ceil((k+1)*B/K) granted
beats from every input stream of B total beats, and one cycle each after
the documented fill.  Output beats drain decoupled from the unit (the unit
frees after fill+body+drain; completion syncs fire at the last output
grant or remote landing), which is what lets back-to-back instructions
overlap their writeback with successor compute.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from npusim import funits
from npusim.config import DDR, HBSM, MachineConfig, dtype_from_tag
from npusim.errors import (BadDescriptor, DeadlockDetected, RaceDetected,
                           SimError, UnknownRoutine, UnroutableTarget,
                           WatchdogExpired)
from npusim.fabric import (NEVER, NODE_CCB, NODE_SRAM, CcbState, DmaDescriptor,
                           DrbRing, IcbChannel, MeshFabric, cluster_node,
                           node_xy)
from npusim.funits import (CsuOp, DtduOp, RoutineDef, ServiceRequest, TcuOp)
from npusim.hbsm import (PORT_CVU_IN, PORT_CVU_OUT, PORT_DTDU, PORT_SVC,
                         PORT_TCU_ACT, PORT_TCU_OUT, PORT_TCU_WT_A,
                         PORT_TCU_WT_B, BankedMemory)
from npusim.isa import (InstructionQueue, SyncAction, TpbInstruction,
                        VectorOp)
from npusim.sync import SyncCounterFile
from npusim.trace import Trace
from npusim.walker import WalkerConfig, expand

UNIT_ORDER = ("TCU", "CVU", "DTDU", "CSU")
INTRA_CLUSTER_LANDING = 4      # cycles for a TPB-to-TPB hop inside a cluster
LINE = 32                      # scratchpad line, walker beat granularity

IN_PORTS = {
    ("TCU", 0): (PORT_TCU_ACT,),
    ("TCU", 1): (PORT_TCU_WT_A, PORT_TCU_WT_B),
    ("CVU", 0): (PORT_CVU_IN,),
    ("CVU", 1): (PORT_CVU_IN,),
    ("DTDU", 0): (PORT_DTDU,),
}
OUT_PORT = {"TCU": PORT_TCU_OUT, "CVU": PORT_CVU_OUT, "DTDU": PORT_DTDU,
            "CSU": PORT_SVC}


def _pieces(addrs: np.ndarray, run: int) -> Tuple[np.ndarray, np.ndarray]:
    """Split (walker value, run) pairs at line boundaries -> (addr, len)."""
    if run <= LINE and int((addrs % LINE).max(initial=0)) + run <= LINE:
        return addrs, np.full(len(addrs), run, dtype=np.int64)
    out_a: List[int] = []
    out_l: List[int] = []
    for a in addrs.tolist():
        end = a + run
        while a < end:
            take = min(end, (a // LINE + 1) * LINE) - a
            out_a.append(a)
            out_l.append(take)
            a += take
    return np.asarray(out_a, dtype=np.int64), np.asarray(out_l, dtype=np.int64)


def _flat_idx(addrs: np.ndarray, run: int) -> np.ndarray:
    return (addrs[:, None] + np.arange(run, dtype=np.int64)[None, :]).ravel()


@dataclass
class _Stream:
    """One operand or result byte stream of an active instruction."""

    role: str                       # in0 | in1 | out
    ports: Tuple[int, ...]
    addrs: np.ndarray               # piece addresses
    lens: np.ndarray                # piece lengths
    submitted: int = 0
    granted: int = 0
    triggers: List[Tuple[int, SyncAction]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.addrs)

    def done(self) -> bool:
        return self.granted >= self.total


@dataclass
class _Active:
    """Engine-side state of one in-flight instruction."""

    instr: TpbInstruction
    cluster: int
    tpb: int
    state: str = "wait"             # wait -> run -> (unit freed) -> done
    start: int = -1
    fill: int = 0
    body: int = 0
    drain: int = 0
    steps: int = 0
    end_busy: int = -1              # exclusive end of unit occupancy
    ins: List[_Stream] = field(default_factory=list)
    out: Optional[_Stream] = None
    remote_left: int = 0            # pending remote landings
    completed: bool = False
    service: Optional[ServiceRequest] = None
    stall: str = ""

    @property
    def key(self) -> Tuple[int, int, str]:
        return (self.cluster, self.tpb, self.instr.unit)

    def grant_steps(self) -> int:
        if not self.ins:
            return self.body
        lim = self.body
        for st in self.ins:
            if st.total:
                lim = min(lim, st.granted * self.body // st.total)
        return lim


@dataclass
class _Envelope:
    lo: int
    hi: int                         # exclusive
    write: bool
    owner: Tuple[int, int, str]
    ai: _Active


class _ClusterCpu:
    """One service CPU per cluster: strictly one routine at a time."""

    def __init__(self, cluster: int):
        self.cluster = cluster
        self.queue: deque[ServiceRequest] = deque()
        self.current: Optional[ServiceRequest] = None
        self.busy_until = 0

    def busy(self) -> bool:
        return self.current is not None or bool(self.queue)


@dataclass
class RunResult:
    outputs: Dict[str, np.ndarray]
    makespan: int
    trace: Trace
    instr_log: List[dict]
    interrupts: List[Tuple[int, str, str]]


class Engine:
    """Owns every component and steps them in settlement order.

    Construct, optionally preload storage, then either run a compiled
    program (run_program) or drive instructions straight into cluster
    queues (inject + run_until_idle) for focused tests.
    """

    def __init__(self, cfg: MachineConfig):
        self.cfg = cfg
        self.cycle = 0
        self.trace = Trace()
        self.hbsms = [[BankedMemory(cfg.hbsm_bytes, cfg.hbsm_banks,
                                    cfg.hbsm_bank_width, cfg.hbsm_ports,
                                    cfg.hbsm_latency)
                       for _ in range(cfg.tpbs_per_cluster)]
                      for _ in range(cfg.num_clusters)]
        self.counters = [[SyncCounterFile(cfg.sync_counters)
                          for _ in range(cfg.tpbs_per_cluster)]
                         for _ in range(cfg.num_clusters)]
        self.iqs = [InstructionQueue(cfg.tpbs_per_cluster, cfg.iq_capacity)
                    for _ in range(cfg.num_clusters)]
        self.cpus = [_ClusterCpu(c) for c in range(cfg.num_clusters)]
        self.drb = DrbRing(cfg)
        self.mesh = MeshFabric(cfg)
        self.icb = IcbChannel(cfg)
        self.ccb = CcbState(cfg, self.drb, self._land_dma_broadcast)
        self.routines: Dict[str, RoutineDef] = {}

        self.units: Dict[Tuple[int, int, str], Optional[_Active]] = {}
        self.live_units: List[Tuple[int, int, str]] = []
        self._live_set = set()
        self.active: List[_Active] = []
        self.busy_mems: Dict[Tuple[int, int], BankedMemory] = {}
        self.envelopes: Dict[Tuple[int, int], List[_Envelope]] = {}
        self.pending_updates: deque = deque()   # (fire_cycle, file, index)
        self.landings: List[dict] = []          # scheduled intra-cluster hops
        self._tags: Dict[Tuple[int, int], Dict[int, Tuple[_Active, _Stream]]] = {}
        self._tag_next = 0
        self.instr_log: List[dict] = []
        self.progress = False

    # ------------------------------------------------------------------
    # plumbing helpers

    def hbsm(self, cluster: int, tpb: int) -> BankedMemory:
        return self.hbsms[cluster][tpb]

    def counter_file(self, cluster: int, tpb: int) -> SyncCounterFile:
        if cluster < 0:
            return self.ccb.counters
        return self.counters[cluster][tpb]

    def _unit_slot(self, key):
        return self.units.get(key)

    def _wake_unit(self, key) -> None:
        if key not in self._live_set:
            self._live_set.add(key)
            self.live_units.append(key)
            self.live_units.sort()

    def _touch_mem(self, cluster: int, tpb: int) -> None:
        self.busy_mems[(cluster, tpb)] = self.hbsms[cluster][tpb]

    def queue_update(self, counter: Tuple[int, int, int]) -> None:
        c, t, i = counter
        self.pending_updates.append((self.cycle + 1,
                                     self.counter_file(c, t), i))

    def _fire_actions(self, ai: _Active, stage: str) -> None:
        for act in ai.instr.syncs:
            if act.kind == "update" and act.stage == stage:
                self.queue_update(act.counter)

    # ------------------------------------------------------------------
    # envelopes (race detection)

    def _env_key(self, cluster: int, tpb: int) -> Tuple[int, int]:
        return (cluster, tpb)

    def _space_key(self, space) -> Tuple[int, int]:
        if space.kind == HBSM:
            return (space.cluster, space.tpb)
        return (-2, 0) if space.kind == DDR else (-3, 0)

    def _register_env(self, key, lo, hi, write, ai: _Active) -> Optional[str]:
        """Returns None when registered, "stall" when the unit must retry,
        raises RaceDetected on a cross-unit conflict."""
        bucket = self.envelopes.setdefault(key, [])
        for env in bucket:
            if env.ai is ai:
                continue
            if env.hi <= lo or hi <= env.lo:
                continue
            if not (write or env.write):
                continue
            if env.owner == ai.key:
                return "stall"
            raise RaceDetected(
                f"cycle {self.cycle}: {ai.instr.unit} seq {ai.instr.seq} on "
                f"c{ai.cluster}.t{ai.tpb} {'writes' if write else 'reads'} "
                f"[{lo},{hi}) of tpb {key} while "
                f"{env.owner[2]} seq {env.ai.instr.seq} of "
                f"c{env.owner[0]}.t{env.owner[1]} holds "
                f"[{env.lo},{env.hi}) for {'write' if env.write else 'read'}")
        bucket.append(_Envelope(lo, hi, write, ai.key, ai))
        return None

    def _release_env(self, key, ai: _Active, write: bool) -> None:
        bucket = self.envelopes.get(key, [])
        self.envelopes[key] = [e for e in bucket
                               if not (e.ai is ai and e.write == write)]

    # ------------------------------------------------------------------
    # issue: functional evaluation and stream construction

    def _storage_np(self, cluster: int, tpb: int) -> np.ndarray:
        return self.hbsms[cluster][tpb].np

    def _gather_bytes(self, cluster, tpb, walker: WalkerConfig,
                      run: int, need: int) -> np.ndarray:
        addrs = expand(walker)
        data = self._storage_np(cluster, tpb)[_flat_idx(addrs, run)]
        return data[:need]

    def _scatter_bytes(self, cluster, tpb, walker: WalkerConfig, run: int,
                       data: np.ndarray) -> None:
        addrs = expand(walker)
        idx = _flat_idx(addrs, run)
        buf = np.zeros(len(idx), dtype=np.uint8)
        buf[:len(data)] = data
        self._storage_np(cluster, tpb)[idx] = buf

    def _stream_for(self, unit: str, slot: int, walker: WalkerConfig,
                    run: int) -> _Stream:
        addrs, lens = _pieces(expand(walker), run)
        role = "out" if slot < 0 else f"in{slot}"
        ports = (OUT_PORT[unit],) if slot < 0 else IN_PORTS[(unit, slot)]
        return _Stream(role, ports, addrs, lens)

    def _eval_tcu(self, ai: _Active) -> None:
        instr, op = ai.instr, ai.instr.op
        m, k, n = op.matmul_dims()
        eb = dtype_from_tag(op.in_dtype).byte_width
        a = self._gather_bytes(ai.cluster, ai.tpb, instr.in_walkers[0],
                               instr.in_runs[0], m * k * eb)
        b = self._gather_bytes(ai.cluster, ai.tpb, instr.in_walkers[1],
                               instr.in_runs[1], k * n * eb)
        np_in = dtype_from_tag(op.in_dtype).np_dtype
        out = funits.tcu_matrix(op, a.view(np_in).reshape(m, k),
                                b.view(np_in).reshape(k, n))
        self._land_out(ai, out.tobytes())
        ai.fill, ai.body, ai.drain = funits.tcu_cycles(op, self.cfg)

    def _eval_cvu(self, ai: _Active) -> None:
        instr = ai.instr
        op: VectorOp = instr.op
        pipe = op.pipeline
        eb = dtype_from_tag(op.in_dtype).byte_width
        raw = self._gather_bytes(ai.cluster, ai.tpb, instr.in_walkers[0],
                                 instr.in_runs[0], op.length * eb)
        a = raw.view(dtype_from_tag(op.in_dtype).np_dtype).astype(np.float32)
        b = None
        if len(instr.in_walkers) > 1:
            raw = self._gather_bytes(ai.cluster, ai.tpb, instr.in_walkers[1],
                                     instr.in_runs[1], op.length * eb)
            b = raw.view(dtype_from_tag(op.in_dtype).np_dtype) \
                   .astype(np.float32)
        store = self._storage_np(ai.cluster, ai.tpb)
        offs = np.cumsum((0,) + tuple(4 * e for e in pipe.buf_elems))
        bufs = {}
        for bi in pipe.preloaded_bufs():
            lo = op.buf_base + int(offs[bi])
            bufs[bi] = store[lo:lo + 4 * pipe.buf_elems[bi]] \
                .view(np.float32).copy()
        out, written, _ = funits.cvu_eval(pipe, a, b, bufs)
        if instr.out_walker is not None:
            self._land_out(ai, out.tobytes())
        for bi, arr in written.items():
            lo = op.buf_base + int(offs[bi])
            store[lo:lo + 4 * pipe.buf_elems[bi]] = \
                np.frombuffer(arr.astype(np.float32).tobytes(), np.uint8)
        ai.fill, ai.body, ai.drain = funits.cvu_cycles(pipe, op.length,
                                                       self.cfg)

    def _eval_dtdu(self, ai: _Active) -> None:
        instr = ai.instr
        op: DtduOp = instr.op
        out_addrs = expand(instr.out_walker)
        out_bytes = len(out_addrs) * instr.out_run
        if op.kind == "fill":
            data = np.frombuffer(funits.fill_bytes(op.pattern, out_bytes),
                                 np.uint8)
        else:
            src = self._gather_bytes(ai.cluster, ai.tpb, instr.in_walkers[0],
                                     instr.in_runs[0], out_bytes)
            if op.kind == "transpose2d":
                src = np.frombuffer(
                    funits.transpose2d_bytes(
                        src[:op.rows * op.cols * op.elem_bytes].tobytes(),
                        op.rows, op.cols, op.elem_bytes), np.uint8)
            data = src
        self._land_out(ai, data.tobytes())
        ai.fill, ai.body, ai.drain = funits.dtdu_cycles(out_bytes, self.cfg)

    def _eval_csu(self, ai: _Active) -> None:
        op: CsuOp = ai.instr.op
        routine = self.routines.get(op.routine)
        if routine is None:
            raise UnknownRoutine(f"routine {op.routine!r} is not registered")
        extra = 0
        if routine.behavior == "launch_gsdu":
            if op.plan is None:
                raise BadDescriptor("launch_gsdu without a plan")
            extra = self._run_gsdu(ai, op.plan)
        req = ServiceRequest(routine, op, ai.cluster, ai.tpb, self.cycle,
                             extra)
        ai.service = req
        self.cpus[ai.cluster].queue.append(req)
        ai.fill = ai.body = ai.drain = 0

    def _gsdu_storage(self, space) -> np.ndarray:
        if space.kind == HBSM:
            return self._storage_np(space.cluster, space.tpb)
        if space.kind == DDR:
            return np.frombuffer(self.ccb.ddr, np.uint8)
        return self.ccb.sram.np

    def _run_gsdu(self, ai: _Active, plan) -> int:
        idx_store = self._gsdu_storage(plan.index.space)
        n = plan.index.elements
        base = plan.index.base
        raw = idx_store[base:base + 4 * n]
        index = raw.view(np.int32).copy()
        pairs = funits.gsdu_addresses(plan, index)
        local = self._gsdu_storage(plan.local.space)
        remote = self._gsdu_storage(plan.remote.space)
        eb = plan.element_bytes
        for laddr, raddr in pairs:
            if plan.direction == "gather_in":
                local[laddr:laddr + eb] = remote[raddr:raddr + eb]
            else:
                remote[raddr:raddr + eb] = local[laddr:laddr + eb]
        bytes_moved = n * eb
        self.trace.bump("gsdu_bytes", bytes_moved)
        if plan.remote.space.kind == DDR:
            self.trace.bump("ddr_bytes", bytes_moved)
        if plan.remote.space.kind == HBSM:
            far = cluster_node(plan.remote.space.cluster)
        else:
            far = NODE_CCB if plan.remote.space.kind == DDR else NODE_SRAM
        hops = max(1, _node_hops(cluster_node(ai.cluster), far))
        return funits.gsdu_cycles(plan, self.cfg) \
            + hops * self.cfg.mesh_hop_latency

    def _land_out(self, ai: _Active, payload: bytes) -> None:
        """Functional landing of the output stream (local or remote)."""
        instr = ai.instr
        data = np.frombuffer(payload, np.uint8)
        targets: List[Tuple[int, int]] = []
        if instr.out_remote is not None:
            targets = [instr.out_remote]
        elif isinstance(instr.op, DtduOp) and instr.op.dst_tpbs:
            targets = list(instr.op.dst_tpbs)
        if not targets:
            self._scatter_bytes(ai.cluster, ai.tpb, instr.out_walker,
                                instr.out_run, data)
            return
        for c, t in targets:
            if not (0 <= c < self.cfg.num_clusters
                    and 0 <= t < self.cfg.tpbs_per_cluster):
                raise UnroutableTarget(f"tpb c{c}.t{t}")
            self._scatter_bytes(c, t, instr.out_walker, instr.out_run, data)

    # ------------------------------------------------------------------
    # issue step

    def _monitors_ok(self, ai: _Active) -> bool:
        for act in ai.instr.syncs:
            if act.kind != "monitor" or act.stage != "before_start":
                continue
            c, t, i = act.counter
            if c >= 0 and (c, t) != (ai.cluster, ai.tpb):
                raise BadDescriptor(
                    f"monitor on c{c}.t{t} from c{ai.cluster}.t{ai.tpb}: "
                    "units watch only their own counter file")
            if self.counter_file(c, t).value(i) < act.expected:
                ai.stall = (f"counter {act.counter} < {act.expected} "
                            f"(= {self.counter_file(c, t).value(i)})")
                return False
        ai.stall = ""
        return True

    def _try_start(self, ai: _Active) -> bool:
        """Envelope registration, functional eval, stream submission."""
        instr = ai.instr
        key_local = self._env_key(ai.cluster, ai.tpb)
        regs: List[Tuple[Tuple[int, int], int, int, bool]] = []
        for w, run in zip(instr.in_walkers, instr.in_runs):
            addrs = expand(w)
            regs.append((key_local, int(addrs.min()),
                         int(addrs.max()) + run, False))
        if instr.out_walker is not None:
            addrs = expand(instr.out_walker)
            lo, hi = int(addrs.min()), int(addrs.max()) + instr.out_run
            if instr.out_remote is not None:
                regs.append((self._env_key(*instr.out_remote), lo, hi, True))
            elif isinstance(instr.op, DtduOp) and instr.op.dst_tpbs:
                for c, t in instr.op.dst_tpbs:
                    regs.append((self._env_key(c, t), lo, hi, True))
            else:
                regs.append((key_local, lo, hi, True))
        if isinstance(instr.op, VectorOp) and instr.op.pipeline.buf_elems:
            pipe = instr.op.pipeline
            total = 4 * sum(pipe.buf_elems)
            regs.append((key_local, instr.op.buf_base,
                         instr.op.buf_base + total, bool(pipe.written_bufs())))
        if isinstance(instr.op, CsuOp) and instr.op.plan is not None:
            pl = instr.op.plan
            gather = pl.direction == "gather_in"
            for desc, write in ((pl.index, False), (pl.local, gather),
                                (pl.remote, not gather)):
                lo, hi = desc.footprint()
                regs.append((self._space_key(desc.space), lo, hi, write))

        placed = []
        for key, lo, hi, write in regs:
            verdict = self._register_env(key, lo, hi, write, ai)
            if verdict == "stall":
                for key2, write2 in placed:
                    self._release_env(key2, ai, write2)
                ai.stall = "writeback of an earlier instruction in flight"
                return False
            placed.append((key, write))

        evals = {"TCU": self._eval_tcu, "CVU": self._eval_cvu,
                 "DTDU": self._eval_dtdu, "CSU": self._eval_csu}
        evals[instr.unit](ai)

        # build timing streams and push input beats
        mem = self.hbsms[ai.cluster][ai.tpb]
        tags = self._tags.setdefault((ai.cluster, ai.tpb), {})
        for slot, (w, run) in enumerate(zip(instr.in_walkers, instr.in_runs)):
            st = self._stream_for(instr.unit, slot, w, run)
            ai.ins.append(st)
            for i in range(st.total):
                tag = self._tag_next
                self._tag_next += 1
                tags[tag] = (ai, st)
                mem.core.submit(st.ports[i % len(st.ports)],
                                int(st.addrs[i]), int(st.lens[i]),
                                False, tag, None, False)
            st.submitted = st.total
        if instr.out_walker is not None and instr.out_remote is None \
                and not (isinstance(instr.op, DtduOp) and instr.op.dst_tpbs):
            ai.out = self._stream_for(instr.unit, -1, instr.out_walker,
                                      instr.out_run)
            self._attach_triggers(ai)
        elif instr.out_walker is not None:
            n_targets = (1 if instr.out_remote is not None
                         else len(instr.op.dst_tpbs))
            ai.remote_left = n_targets
        self._touch_mem(ai.cluster, ai.tpb)
        ai.state = "run"
        ai.start = self.cycle
        self.active.append(ai)
        return True

    def _attach_triggers(self, ai: _Active) -> None:
        """Map per_chunk actions to output piece indexes."""
        instr = ai.instr
        if ai.out is None:
            return
        csum = np.cumsum(ai.out.lens)
        for act in instr.syncs:
            if act.stage != "per_chunk":
                continue
            eb = _elem_bytes(instr.op)
            step = act.chunk_elems * eb
            boundary = step
            while boundary <= int(csum[-1]):
                piece = int(np.searchsorted(csum, boundary))
                ai.out.triggers.append((min(piece, ai.out.total - 1), act))
                boundary += step
        ai.out.triggers.sort(key=lambda p: p[0])

    def _issue_step(self) -> None:
        # dispatcher -> chain bus
        if self.icb.free_at <= self.cycle:
            for d, disp in enumerate(self.ccb.dispatchers):
                head = disp.head()
                if head is None:
                    continue
                start = self.cycle
                end = self.icb.send(d, head, self.cycle)
                self.trace.span("icb", f"send#{head.seq}", start, end,
                                bits=head.encoded_bits, dispatcher=d)
                self.trace.bump("icb_bits", head.encoded_bits)
                disp.pos += 1
                self.progress = True
                break

        for key in list(self.live_units):
            cluster, tpb, unit = key
            ai = self.units.get(key)
            if ai is None:
                nxt = self.iqs[cluster].ready_pop(tpb, unit)
                if nxt is None:
                    self._live_set.discard(key)
                    self.live_units.remove(key)
                    continue
                ai = _Active(nxt, cluster, tpb)
                self.units[key] = ai
                self.progress = True
            if ai.state == "wait":
                if self._monitors_ok(ai) and self._try_start(ai):
                    self.progress = True

        for cpu in self.cpus:
            if cpu.current is None and cpu.queue:
                req = cpu.queue.popleft()
                cpu.current = req
                cpu.busy_until = self.cycle + self.cfg.csu_overhead \
                    + req.routine.cost_cycles + req.done
                self.progress = True

    # ------------------------------------------------------------------
    # memory grants

    def _grant_step(self) -> None:
        for (cluster, tpb), mem in list(self.busy_mems.items()):
            if not mem.busy():
                del self.busy_mems[(cluster, tpb)]
                continue
            grants, _ = mem.cycle(self.cycle)
            if not grants:
                continue
            self.progress = True
            self.trace.bump("hbsm_grants", len(grants))
            tags = self._tags.get((cluster, tpb), {})
            for g in grants:
                if g.sync_on_grant is not None:
                    self.queue_update(g.sync_on_grant.counter)
                hit = tags.pop(g.tag, None)
                if hit is None:
                    continue
                ai, st = hit
                st.granted += 1
                while st.triggers and st.triggers[0][0] < st.granted:
                    _, act = st.triggers.pop(0)
                    self.queue_update(act.counter)
                if st.done():
                    if st.role == "out":
                        self._release_env(
                            self._env_key(cluster, tpb), ai, True)
                        self._maybe_complete(ai)
                    elif all(s.done() for s in ai.ins):
                        self._release_env(
                            self._env_key(cluster, tpb), ai, False)

    def _maybe_complete(self, ai: _Active) -> None:
        if ai.completed:
            return
        if ai.out is not None and not ai.out.done():
            return
        if ai.remote_left > 0:
            return
        if ai.steps < ai.body:
            return
        ai.completed = True
        self._fire_actions(ai, "after_complete")
        self.trace.bump("instrs_completed")

    # ------------------------------------------------------------------
    # compute progress

    def _compute_step(self) -> None:
        still: List[_Active] = []
        for ai in self.active:
            if ai.instr.unit == "CSU":
                still.append(ai)
                continue
            before = ai.steps
            if self.cycle >= ai.start + ai.fill:
                allowed = self.cycle - ai.start - ai.fill + 1
                ai.steps = min(ai.body, allowed, ai.grant_steps())
            if ai.steps > before:
                self.progress = True
            if ai.out is not None and ai.body:
                ready = ai.steps * ai.out.total // ai.body
                self._submit_out(ai, ready)
            if ai.steps >= ai.body and ai.end_busy < 0:
                ai.end_busy = self.cycle + ai.drain + 1
                if ai.remote_left:
                    self._launch_remote(ai)
                self._maybe_complete(ai)
            if ai.end_busy >= 0 and self.cycle + 1 >= ai.end_busy:
                self._retire(ai)
            else:
                still.append(ai)
        self.active = still

        for cpu in self.cpus:
            req = cpu.current
            if req is not None and self.cycle >= cpu.busy_until:
                self._finish_service(cpu, req)
                self.progress = True

    def _submit_out(self, ai: _Active, ready: int) -> None:
        st = ai.out
        if st is None or st.submitted >= ready:
            return
        mem = self.hbsms[ai.cluster][ai.tpb]
        tags = self._tags.setdefault((ai.cluster, ai.tpb), {})
        while st.submitted < min(ready, st.total):
            i = st.submitted
            tag = self._tag_next
            self._tag_next += 1
            tags[tag] = (ai, st)
            mem.core.submit(st.ports[0], int(st.addrs[i]), int(st.lens[i]),
                            True, tag, None, False)
            st.submitted += 1
        self._touch_mem(ai.cluster, ai.tpb)

    def _launch_remote(self, ai: _Active) -> None:
        instr = ai.instr
        addrs = expand(instr.out_walker)
        nbytes = len(addrs) * instr.out_run
        targets = ([instr.out_remote] if instr.out_remote is not None
                   else list(instr.op.dst_tpbs))
        if len(targets) > 1:
            # one-to-many rides the broadcast ring
            self.drb.start(nbytes, on_complete=lambda now, a=ai, ts=targets:
                           self._remote_landed(a, ts, now))
            self.trace.bump("drb_bytes", nbytes)
            return
        (c, t) = targets[0]
        if c == ai.cluster:
            self.landings.append({
                "at": self.cycle + INTRA_CLUSTER_LANDING,
                "ai": ai, "targets": [(c, t)]})
            return
        src, dst = cluster_node(ai.cluster), cluster_node(c)
        self.mesh.start(src, dst, nbytes, self.cycle,
                        on_complete=lambda now, a=ai, ts=[(c, t)]:
                        self._remote_landed(a, ts, now))
        self.trace.bump("mesh_bytes", nbytes)

    def _remote_landed(self, ai: _Active, targets, now: int) -> None:
        for (c, t) in targets:
            self._release_env(self._env_key(c, t), ai, True)
            for act in ai.instr.syncs:
                if act.kind == "update" and act.stage == "after_complete" \
                        and (act.counter[0], act.counter[1]) == (c, t):
                    self.queue_update(act.counter)
            ai.remote_left -= 1
        self.progress = True
        if ai.remote_left == 0:
            ai.completed = True
            for act in ai.instr.syncs:
                if act.kind == "update" and act.stage == "after_complete" \
                        and (act.counter[0], act.counter[1]) \
                        not in targets:
                    self.queue_update(act.counter)
            self.trace.bump("instrs_completed")

    def _retire(self, ai: _Active) -> None:
        key = ai.key
        self.units[key] = None
        self._wake_unit(key)
        self.progress = True       # a freed unit can unblock its queue
        self.trace.span(f"c{ai.cluster}.t{ai.tpb}.{ai.instr.unit}",
                        _op_name(ai.instr), ai.start, ai.end_busy,
                        seq=ai.instr.seq, fill=ai.fill, body=ai.body,
                        drain=ai.drain)
        self.instr_log.append({
            "cluster": ai.cluster, "tpb": ai.tpb, "unit": ai.instr.unit,
            "seq": ai.instr.seq, "op": _op_name(ai.instr),
            "issue": ai.start, "fill": ai.fill, "body": ai.body,
            "drain": ai.drain, "end": ai.end_busy,
            "latency": ai.end_busy - ai.start})
        if ai.out is None and ai.instr.unit != "CSU":
            if ai.remote_left == 0:
                self._maybe_complete(ai)
            # no out stream means no grant will ever clear a write
            # envelope (spill-buffer region writes land at eval)
            self._release_env(self._env_key(ai.cluster, ai.tpb), ai, True)
        for st in ai.ins:
            if not st.done():
                return
        if not ai.ins:
            self._release_env(self._env_key(ai.cluster, ai.tpb), ai, False)

    def _finish_service(self, cpu: _ClusterCpu, req: ServiceRequest) -> None:
        cpu.current = None
        key = (req.cluster, req.tpb, "CSU")
        ai = self.units.get(key)
        self.trace.span(f"cpu{cpu.cluster}", req.routine.name,
                        req.issued_at, self.cycle + 1, tpb=req.tpb)
        if ai is not None and ai.service is req:
            ai.completed = True
            self._fire_actions(ai, "after_complete")
            plan = req.op.plan
            if plan is not None:
                for space in (plan.index.space, plan.local.space,
                              plan.remote.space):
                    self._release_env(self._space_key(space), ai, True)
                    self._release_env(self._space_key(space), ai, False)
            self.units[key] = None
            self._wake_unit(key)
            if ai in self.active:
                self.active.remove(ai)
            self.trace.span(f"c{req.cluster}.t{req.tpb}.CSU",
                            f"csu:{req.routine.name}", ai.start,
                            self.cycle + 1, seq=ai.instr.seq)
            self.instr_log.append({
                "cluster": req.cluster, "tpb": req.tpb, "unit": "CSU",
                "seq": ai.instr.seq, "op": f"csu:{req.routine.name}",
                "issue": ai.start, "fill": 0, "body": 0, "drain": 0,
                "end": self.cycle + 1,
                "latency": self.cycle + 1 - ai.start})
            self.trace.bump("instrs_completed")

    # ------------------------------------------------------------------
    # fabric steps

    def _delivery_step(self) -> None:
        while True:
            d = self.icb.head_due(self.cycle)
            if d is None:
                break
            iq = self.iqs[d.cluster]
            if len(iq) + len(d.tpbs) > iq.capacity:
                break
            for t in d.tpbs:
                iq.enqueue(t, d.instr)
                self._wake_unit((d.cluster, t, d.instr.unit))
            self.icb.pop_head()
            self.progress = True

        if self.drb.step(self.cycle) or self.drb.active:
            self.progress = True
        if self.mesh.step(self.cycle) or self.mesh.active:
            self.progress = True

        if self.landings:
            keep = []
            for land in self.landings:
                if land["at"] <= self.cycle:
                    self._remote_landed(land["ai"], land["targets"],
                                        self.cycle)
                else:
                    keep.append(land)
            self.landings = keep

    def _settle_step(self) -> None:
        n = len(self.pending_updates)
        for _ in range(n):
            fire, file, idx = self.pending_updates.popleft()
            if fire <= self.cycle:
                file.update(idx)
                self.progress = True
            else:
                self.pending_updates.append((fire, file, idx))

    def _land_dma_broadcast(self, desc: DmaDescriptor, now: int) -> None:
        src = self.ccb.ddr if desc.src_space == DDR else self.ccb.sram.storage
        payload = bytes(src[desc.src_addr:desc.src_addr + desc.nbytes])
        lo, hi = desc.dst_addr, desc.dst_addr + desc.nbytes
        for (c, t) in desc.drb_targets:
            for env in self.envelopes.get((c, t), ()):
                if env.lo < hi and lo < env.hi:
                    raise RaceDetected(
                        f"cycle {now}: dma broadcast lands [{lo},{hi}) on "
                        f"c{c}.t{t} while {env.owner[2]} seq "
                        f"{env.ai.instr.seq} holds [{env.lo},{env.hi})")
            mem = self.hbsms[c][t]
            mem.storage[lo:hi] = payload
            if desc.update is not None:
                self.pending_updates.append((now + 1,
                                             self.counter_file(c, t),
                                             desc.update))
        self.trace.bump("drb_bytes", desc.nbytes)
        if desc.src_space == DDR:
            self.trace.bump("ddr_bytes", desc.nbytes)
        self.progress = True

    # ------------------------------------------------------------------
    # main loop

    def _dispatch_done(self) -> bool:
        ended = True
        for d, disp in enumerate(self.ccb.dispatchers):
            if disp.ended_at is not None:
                continue
            if not disp.drained:
                ended = False
                continue
            if disp.end_wait is not None:
                idx, expected = disp.end_wait
                if self.ccb.counters.value(idx) < expected:
                    ended = False
                    continue
            disp.ended_at = self.cycle
            self.ccb.raise_interrupt(self.cycle, f"dispatcher{d}",
                                     "end-of-task")
            self.progress = True
        return ended

    def _quiescent(self) -> bool:
        if self.active or self.pending_updates or self.landings:
            return False
        if any(a is not None for a in self.units.values()):
            return False
        if any(len(q) for q in self.iqs):
            return False
        if self.icb.busy() or self.drb.busy() or self.mesh.busy():
            return False
        if self.ccb.dma_busy() or any(c.busy() for c in self.cpus):
            return False
        return not any(m.busy() for m in self.busy_mems.values())

    def _next_event(self) -> int:
        now = self.cycle
        nxt = NEVER
        if self.active or self.busy_mems or self.pending_updates:
            nxt = now + 1
        for land in self.landings:
            nxt = min(nxt, land["at"])
        for cpu in self.cpus:
            if cpu.current is not None:
                nxt = min(nxt, cpu.busy_until)
            elif cpu.queue:
                nxt = now + 1
        nxt = min(nxt, self.icb.next_event(now), self.drb.next_event(now),
                  self.mesh.next_event(now), self.ccb.next_event(now))
        if self.icb.free_at > now and any(not d.drained
                                          for d in self.ccb.dispatchers):
            nxt = min(nxt, self.icb.free_at)
        return nxt

    def _pending_exists(self) -> bool:
        return not self._quiescent() \
            or any(d.ended_at is None for d in self.ccb.dispatchers)

    def _deadlock_report(self) -> str:
        lines = []
        for key in sorted(k for k, v in self.units.items() if v is not None):
            ai = self.units[key]
            if ai.state == "wait":
                lines.append(f"c{key[0]}.t{key[1]}.{key[2]} seq "
                             f"{ai.instr.seq} waiting: {ai.stall}")
        for e, eng in enumerate(self.ccb.engines):
            if eng.queue and eng.current is None:
                head = eng.queue[0]
                if head.wait is not None:
                    lines.append(f"dma{e} waiting: central counter "
                                 f"{head.wait[0]} < {head.wait[1]}")
        for d, disp in enumerate(self.ccb.dispatchers):
            if disp.ended_at is None and disp.end_wait is not None \
                    and disp.drained:
                idx, exp = disp.end_wait
                lines.append(f"dispatcher{d} waiting: central counter "
                             f"{idx} = {self.ccb.counters.value(idx)} "
                             f"< {exp}")
        return "; ".join(lines) if lines else "no waiter details"

    def step_cycle(self) -> None:
        self.progress = False
        self._delivery_step()      # 1
        self._settle_step()        # 2
        self._issue_step()         # 3+4 (release folded into issue checks)
        self._grant_step()         # 5
        if self.ccb.dma_busy():
            self.ccb.step(self.cycle)   # 6: DMA byte movement
            if self.ccb.ddr_used_now or self.ccb.dma_busy():
                self.progress = True
        self._compute_step()       # 6: units and CPUs
        self.ccb.end_cycle()

    def run_until_idle(self, limit: Optional[int] = None) -> int:
        """Steps until dispatchers ended and the machine drained.

        Returns the makespan (first fully idle cycle).  Raises the fault
        subclasses on race, deadlock, or watchdog expiry; the fault is also
        recorded on the trace so a dump shows what stopped the run.
        """
        cap = limit if limit is not None else self.cfg.watchdog_cycles
        while True:
            if self.cycle > cap:
                self.trace.fault(f"watchdog at {cap} cycles")
                raise WatchdogExpired(f"no termination after {cap} cycles")
            try:
                self.step_cycle()
            except SimError as e:
                self.trace.fault(f"{type(e).__name__}: {e}")
                raise
            ended = self._dispatch_done()
            if ended and self._quiescent():
                makespan = self.cycle
                self.trace.makespan = makespan
                return makespan
            if not self.progress:
                nxt = self._next_event()
                if nxt >= NEVER:
                    report = self._deadlock_report()
                    self.trace.fault(f"deadlock at {self.cycle}: {report}")
                    raise DeadlockDetected(
                        f"cycle {self.cycle}: {report}")
                self.cycle = max(self.cycle + 1, nxt)
            else:
                self.cycle += 1

    # ------------------------------------------------------------------
    # program-level entry

    def load_program(self, program) -> None:
        self.routines.update(program.routines)
        for d, instrs in enumerate(program.streams):
            self.ccb.dispatchers[d].instrs = list(instrs)
        for d, wait in enumerate(program.end_waits):
            self.ccb.dispatchers[d].end_wait = wait
        for e, descs in enumerate(program.dma):
            for desc in descs:
                self.ccb.submit_dma(e % len(self.ccb.engines), desc)

    def place_inputs(self, program, inputs: Dict[str, bytes]) -> None:
        for name, desc in program.input_map.items():
            if name not in inputs:
                raise BadDescriptor(f"missing input {name!r}")
            blob = inputs[name]
            want = desc.tensor_bytes()
            if len(blob) != want:
                raise BadDescriptor(
                    f"input {name!r}: {len(blob)} bytes, descriptor wants "
                    f"{want}")
            if desc.space.kind != DDR:
                raise BadDescriptor(f"input {name!r} must start in ddr")
            self.ccb.ddr[desc.base:desc.base + want] = blob

    def read_outputs(self, program) -> Dict[str, np.ndarray]:
        out = {}
        for name, desc in program.output_map.items():
            if desc.space.kind == HBSM:
                store = self.hbsms[desc.space.cluster][desc.space.tpb].np
            elif desc.space.kind == DDR:
                store = np.frombuffer(self.ccb.ddr, np.uint8)
            else:
                store = self.ccb.sram.np
            out[name] = desc.view(store).copy()
        return out

    def run_program(self, program, inputs: Dict[str, bytes]) -> RunResult:
        self.place_inputs(program, inputs)
        self.load_program(program)
        makespan = self.run_until_idle()
        return RunResult(self.read_outputs(program), makespan, self.trace,
                         self.instr_log,
                         [(i.cycle, i.source, i.code)
                          for i in self.ccb.interrupts])

    # test hook: drop an instruction straight into a cluster queue
    def inject(self, cluster: int, tpb: int, instr: TpbInstruction) -> None:
        if not self.iqs[cluster].enqueue(tpb, instr):
            raise BadDescriptor("cluster queue full on direct injection")
        self._wake_unit((cluster, tpb, instr.unit))


def run_compiled(cfg: MachineConfig, program,
                 inputs: Dict[str, bytes]) -> RunResult:
    """One-shot run on a fresh machine; constants baked into the program
    supply themselves, the caller provides only the declared inputs."""
    blobs = dict(program.preload_bytes)
    blobs.update(inputs)
    return Engine(cfg).run_program(program, blobs)


def _node_hops(a: int, b: int) -> int:
    (x0, y0), (x1, y1) = node_xy(a), node_xy(b)
    return abs(x0 - x1) + abs(y0 - y1)


def _elem_bytes(op) -> int:
    if isinstance(op, TcuOp):
        return dtype_from_tag(op.out_dtype).byte_width
    if isinstance(op, VectorOp):
        return dtype_from_tag(op.pipeline.out_dtype).byte_width
    return 1


def _op_name(instr: TpbInstruction) -> str:
    op = instr.op
    if isinstance(op, TcuOp):
        return f"{op.kind}#{instr.seq}"
    if isinstance(op, VectorOp):
        return f"vector#{instr.seq}"
    if isinstance(op, DtduOp):
        return f"{op.kind}#{instr.seq}"
    return f"csu#{instr.seq}"
