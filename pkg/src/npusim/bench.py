"""Reference micro-benchmarks with reproducible digests.

Each row exercises one corner of the machine and reports cycles, a
row-specific metric, and a digest of the run's native record (trace JSON
for engine rows, the grant log for raw scratchpad rows).  Two invocations
on the same build must print byte-identical tables; the digests exist so
that claim is checkable at a glance.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from npusim.compiler import ScheduledProgram, compile_graph
from npusim.config import (HBSM, I32, AddressSpace, MachineConfig,
                           TensorDesc, with_overrides)
from npusim.engine import Engine, run_compiled
from npusim.fabric import DmaDescriptor
from npusim.graph import load_graph
from npusim.hbsm import BankedMemory, MemRequest
from npusim.isa import SyncAction, TpbInstruction, mask_of
from npusim.funits import TcuOp
from npusim.oracle import random_inputs
from npusim.walker import WalkerConfig, paired_regions

PIPELINE_GRAPH = """\
input x shape=256x64 dtype=f32
constant w shape=64x64 dtype=f32 init=normal seed=40
matmul m x w
add a m m
mul u a a
softmax s u
output s
"""


@dataclass(frozen=True)
class BenchRow:
    name: str
    cycles: int
    metric: str
    digest: str


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _grant_digest(log: List[tuple]) -> str:
    return _digest("\n".join(repr(g) for g in log))


def bench_tcu_matmul(cfg: MachineConfig) -> BenchRow:
    """32x32x64 i8 matmul with a bank-conflict-free operand layout."""
    eng = Engine(cfg)
    rng = np.random.default_rng(7)
    act = rng.integers(-128, 128, size=(32, 32), dtype=np.int8)
    wt = rng.integers(-128, 128, size=(32, 64), dtype=np.int8)

    # activations from bank 0; weight lines alternate between two regions
    # whose banks the dual weight ports never collide on
    yact, ya, yb, yout = 0, 4096 + 8 * 32, 4096 + 24 * 32 + 1024, 16384
    eng.hbsm(0, 0).load(act.tobytes(), yact)
    lines = wt.tobytes()
    for j in range(64):
        dst = (ya if j % 2 == 0 else yb) + (j // 2) * 32
        eng.hbsm(0, 0).load(lines[j * 32:(j + 1) * 32], dst)

    instr = TpbInstruction(
        seq=0, unit="TCU", tpb_mask=mask_of(0),
        op=TcuOp("matmul", (32, 32, 64), "i8", "i32"),
        in_walkers=(WalkerConfig.of((yact, 32, yact + 992)),
                    paired_regions(ya, yb, 32)),
        out_walker=WalkerConfig.of((yout, 32, yout + 8160)),
        syncs=(SyncAction("update", (-1, -1, 0), stage="after_complete"),))
    prog = ScheduledProgram(
        streams=[[instr], [], [], []], dma=[[], []], routines={},
        end_waits=[(0, 1), None, None, None], input_map={},
        output_map={"y": TensorDesc.dense((32, 64), I32,
                                          AddressSpace(HBSM, 0, 0), yout)})
    res = eng.run_program(prog, {})
    rec = [r for r in res.instr_log if r["unit"] == "TCU"][0]
    util = rec["body"] / rec["latency"]
    return BenchRow("tcu.matmul32", rec["latency"],
                    f"mac_cycles={rec['body']} util={util:.3f}",
                    _digest(res.trace.to_json()))


def bench_hbsm_stream(cfg: MachineConfig, cycles: int = 10_000) -> BenchRow:
    """All 8 ports reading disjoint banks: full 256 B/cycle, no stalls."""
    mem = BankedMemory(cfg.hbsm_bytes, cfg.hbsm_banks, cfg.hbsm_bank_width,
                       cfg.hbsm_ports, cfg.hbsm_latency)
    lane = cfg.hbsm_banks // cfg.hbsm_ports
    bw = cfg.hbsm_bank_width

    def submit(port, i):
        bank = port * lane + (i % lane)
        row = (i // lane) % (cfg.hbsm_bytes // (cfg.hbsm_banks * bw))
        mem.submit(MemRequest(port, row * cfg.hbsm_banks * bw + bank * bw,
                              bw, "read", tag=i))

    log, moved = [], 0
    seq = [0] * cfg.hbsm_ports
    for p in range(cfg.hbsm_ports):
        submit(p, 0)
        submit(p, 1)
        seq[p] = 2
    for now in range(cycles):
        grants, _ = mem.cycle(now)
        for g in grants:
            moved += g.length
            log.append((now, g.port, g.addr, g.length))
            submit(g.port, seq[g.port])
            seq[g.port] += 1
    return BenchRow("hbsm.stream", cycles,
                    f"bytes_per_cycle={moved / cycles:.1f}",
                    _grant_digest(log))


def bench_hbsm_contend(cfg: MachineConfig, cycles: int = 800) -> BenchRow:
    """All 8 ports hammering one bank: round-robin keeps grants fair."""
    mem = BankedMemory(cfg.hbsm_bytes, cfg.hbsm_banks, cfg.hbsm_bank_width,
                       cfg.hbsm_ports, cfg.hbsm_latency)
    line = cfg.hbsm_banks * cfg.hbsm_bank_width
    counts = [0] * cfg.hbsm_ports
    log, moved = [], 0
    for p in range(cfg.hbsm_ports):
        mem.submit(MemRequest(p, p * line, cfg.hbsm_bank_width, "read",
                              tag=p))
    tag = cfg.hbsm_ports
    for now in range(cycles):
        grants, _ = mem.cycle(now)
        for g in grants:
            moved += g.length
            counts[g.port] += 1
            log.append((now, g.port, g.addr, g.length))
            mem.submit(MemRequest(g.port, g.port * line,
                                  cfg.hbsm_bank_width, "read", tag=tag))
            tag += 1
    return BenchRow(
        "hbsm.contend", cycles,
        f"bytes_per_cycle={moved / cycles:.1f} "
        f"grants_min={min(counts)} grants_max={max(counts)}",
        _grant_digest(log))


def bench_drb_copy(cfg: MachineConfig) -> BenchRow:
    """1 MiB DDR -> distribution ring, one engine, no completion sync."""
    eng = Engine(cfg)
    desc = DmaDescriptor("ddr", 0, "drb", 0, 1 << 20, ((0, 0),), None, None)
    prog = ScheduledProgram(
        streams=[[] for _ in range(cfg.tpbs_per_cluster)], dma=[[desc], []],
        routines={}, end_waits=[None] * cfg.tpbs_per_cluster,
        input_map={}, output_map={})
    res = eng.run_program(prog, {})
    return BenchRow("ddr.drb1m", res.makespan,
                    f"bytes_per_cycle={(1 << 20) / res.makespan:.1f}",
                    _digest(res.trace.to_json()))


def bench_pipeline(cfg: MachineConfig) -> BenchRow:
    """Four-op chain split over 4 TPBs x 16 chunks vs the serial layout."""
    ir = load_graph(PIPELINE_GRAPH)
    inputs = {k: v.tobytes() for k, v in random_inputs(ir, 97).items()}
    fast = compile_graph(ir, cfg, tpbs=4, chunks=16)
    slow = compile_graph(ir, cfg, tpbs=1, chunks=1)
    rf = run_compiled(cfg, fast, inputs)
    rs = run_compiled(cfg, slow, inputs)
    return BenchRow("pipeline.4x16", rf.makespan,
                    f"serial={rs.makespan} "
                    f"ratio={rf.makespan / rs.makespan:.3f}",
                    _digest(rf.trace.to_json()))


def run_suite(cfg: Optional[MachineConfig] = None) -> List[BenchRow]:
    cfg = cfg or with_overrides(MachineConfig(), num_clusters=2)
    return [
        bench_tcu_matmul(cfg),
        bench_hbsm_stream(cfg),
        bench_hbsm_contend(cfg),
        bench_drb_copy(cfg),
        bench_pipeline(cfg),
    ]


def format_table(rows: List[BenchRow]) -> str:
    wide = max(len(r.metric) for r in rows)
    head = f"{'benchmark':<16} {'cycles':>8}  {'metric':<{wide}}  digest"
    body = [f"{r.name:<16} {r.cycles:>8}  {r.metric:<{wide}}  {r.digest}"
            for r in rows]
    return "\n".join([head, "-" * len(head)] + body)
