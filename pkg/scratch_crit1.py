"""Criterion-1 shaped run: conflict-free layout, expect latency exactly 48."""
import numpy as np
from npusim.config import MachineConfig, TensorDesc, AddressSpace, HBSM, I32, with_overrides
from npusim.engine import Engine
from npusim.funits import TcuOp, tcu_functional
from npusim.isa import TpbInstruction, SyncAction, mask_of
from npusim.walker import WalkerConfig, paired_regions, expand

cfg = with_overrides(MachineConfig(), num_clusters=2, ddr_bytes=1 << 20)
eng = Engine(cfg)

rng = np.random.default_rng(7)
act = rng.integers(-128, 128, size=(32, 32), dtype=np.int8)
wt = rng.integers(-128, 128, size=(32, 64), dtype=np.int8)

# act at bank 0; weight lines split across regions at banks 8 and 24
ACT, WA, WB, OUT = 0, 4096 + 8 * 32, 4096 + 24 * 32 + 1024, 16384
eng.hbsm(0, 0).load(act.tobytes(), ACT)
wt_lines = wt.tobytes()
for j in range(64):
    dst = (WA if j % 2 == 0 else WB) + (j // 2) * 32
    eng.hbsm(0, 0).load(wt_lines[j * 32:(j + 1) * 32], dst)

wt_walker = paired_regions(WA, WB, 32)
addrs = expand(wt_walker)
print("wt banks lane A:", [(a // 32) % 32 for a in addrs[0:8:2]],
      "lane B:", [(a // 32) % 32 for a in addrs[1:8:2]])

op = TcuOp("matmul", (32, 32, 64), "i8", "i32")
instr = TpbInstruction(
    seq=0, unit="TCU", tpb_mask=mask_of(0), op=op,
    in_walkers=(WalkerConfig.of((ACT, 32, ACT + 992)), wt_walker),
    out_walker=WalkerConfig.of((OUT, 32, OUT + 8160)),
    syncs=(SyncAction("update", (-1, -1, 0), stage="after_complete"),))

class P:
    streams = [[instr], [], [], []]
    dma = [[], []]
    routines = {}
    input_map = {}
    output_map = {"y": TensorDesc.dense((32, 64), I32,
                                        AddressSpace(HBSM, 0, 0), OUT)}
    end_waits = [(0, 1), None, None, None]

res = eng.run_program(P(), {})
log = [r for r in res.instr_log if r["unit"] == "TCU"][0]
print("makespan", res.makespan, "latency", log["latency"], "mac", log["body"])
print("exact:", np.array_equal(res.outputs["y"], tcu_functional(op, act, wt)))
