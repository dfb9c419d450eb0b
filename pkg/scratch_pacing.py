import numpy as np
from npusim.config import MachineConfig, with_overrides
from npusim.hbsm import BankedMemory

cfg = with_overrides(MachineConfig(), num_clusters=2)
mem = BankedMemory(cfg.hbsm_bytes, 32, 32, 8, 20)

# mimic the smoke test streams: act 32 beats port 0, wt 64 beats ports 1/2,
# out 256 beats港 3 submitted 8/step later
for i in range(32):
    mem.core.submit(0, i * 32, 32, False, 1000 + i, None, False)
for j in range(64):
    port = 1 if j % 2 == 0 else 2
    mem.core.submit(port, 4096 + j * 32, 32, False, 2000 + j, None, False)

g_act = g_wt = 0
for c in range(80):
    grants, _ = mem.cycle(c)
    for g in grants:
        if g.port == 0:
            g_act += 1
        elif g.port in (1, 2):
            g_wt += 1
    # pacing: steps allowed by grants
    k = min(g_act * 32 // 32, g_wt * 32 // 64)
    if c < 50 or g_act + g_wt < 96:
        print(c, "grants", [(g.port, g.addr // 32 % 32) for g in grants],
              "g_act", g_act, "g_wt", g_wt, "k", k)
    if g_act == 32 and g_wt == 64:
        print("all granted at", c)
        break
