import numpy as np
from npusim.config import MachineConfig, TensorDesc, AddressSpace, HBSM, DDR, I8, I32, with_overrides
from npusim.engine import Engine
from npusim.funits import TcuOp, tcu_functional
from npusim.isa import TpbInstruction, SyncAction, mask_of
from npusim.walker import WalkerConfig

cfg = with_overrides(MachineConfig(), num_clusters=2, ddr_bytes=1 << 20)
eng = Engine(cfg)

rng = np.random.default_rng(7)
act = rng.integers(-128, 128, size=(32, 32), dtype=np.int8)
wt = rng.integers(-128, 128, size=(32, 64), dtype=np.int8)
eng.hbsm(0, 0).load(act.tobytes(), 0)
eng.hbsm(0, 0).load(wt.tobytes(), 4096)

op = TcuOp("matmul", (32, 32, 64), "i8", "i32")
instr = TpbInstruction(
    seq=0, unit="TCU", tpb_mask=mask_of(0),
    op=op,
    in_walkers=(WalkerConfig.of((0, 32, 992)),
                WalkerConfig.of((4096, 32, 4096 + 2016))),
    out_walker=WalkerConfig.of((8192, 32, 8192 + 8160)),
    syncs=(SyncAction("update", (-1, -1, 0), stage="after_complete"),))

class P:
    streams = [[instr], [], [], []]
    dma = [[], []]
    routines = {}
    input_map = {}
    output_map = {"y": TensorDesc.dense((32, 64), I32,
                                        AddressSpace(HBSM, 0, 0), 8192)}
    end_waits = [(0, 1), None, None, None]

res = eng.run_program(P(), {})
print("makespan", res.makespan)
want = tcu_functional(op, act, wt)
got = res.outputs["y"]
print("exact match:", np.array_equal(got, want))
log = [r for r in res.instr_log if r["unit"] == "TCU"]
print("instr log:", log)
print("latency", log[0]["latency"], "mac", log[0]["body"])
res.trace.check_tracks()
print("counters", dict(sorted(res.trace.counters.items())))
print("tracks", res.trace.tracks())
