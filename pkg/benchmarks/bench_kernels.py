"""Time the compiled kernel cores against their pure-Python twins.

Both backends are imported directly (bypassing the NPUSIM_PURE switch) so one
process can drive them on identical inputs, check the outputs bit for bit,
and report wall-clock ratios.  Run from anywhere:

    python3 benchmarks/bench_kernels.py

The two cores measured here are the ones the simulator spends its time in:
the nested-loop address walker (one call per streamed beat) and the banked
scratchpad arbitration step (one call per cycle).
"""

import random
import time

from npusim.kernels import BACKEND
from npusim.kernels import pure

try:
    from npusim.kernels import _core
except ImportError:
    _core = None


def _time(fn, reps=3):
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def walker_workload(mod, rounds=200):
    """Sweep a 3-level walker to exhaustion many times; return all addresses
    from the last sweep so backends can be compared."""
    out = None
    for _ in range(rounds):
        w = mod.WalkerCore((0, 0, 0), (1024, 64, 4), (31744, 960, 60))
        out = w.emit(w.total)
    return out


def mem_workload(mod, cycles=20000, seed=7):
    """Hammer an 8-port scratchpad with mixed reads and writes; return the
    grant log and a digest of the storage bytes."""
    rng = random.Random(seed)
    m = mod.MemCore(1 << 16, 16, 32, 8, 3)
    log = []
    for cycle in range(cycles):
        for port in range(8):
            if m.queue_len(port) < 4:
                addr = rng.randrange(0, 1 << 16 - 5) * 32 % ((1 << 16) - 32)
                if rng.random() < 0.5:
                    m.submit(port, addr, 32, True, cycle,
                             bytes([cycle & 0xFF]) * 32)
                else:
                    m.submit(port, addr, 32, False, cycle, None, True)
        grants, completions = m.step(cycle)
        log.append((tuple(grants), tuple(completions)))
    return log, bytes(m.storage)


def main():
    if _core is None:
        print("compiled backend not built; showing pure only")
        backends = [("pure", pure)]
    else:
        backends = [("compiled", _core), ("pure", pure)]

    print(f"active backend for the package: {BACKEND}")
    rows = []
    results = {}
    for name, mod in backends:
        wt = _time(lambda: walker_workload(mod))
        mt = _time(lambda: mem_workload(mod))
        results[name] = (walker_workload(mod, rounds=1),
                         mem_workload(mod, cycles=2000))
        rows.append((name, wt, mt))

    print(f"{'backend':10} {'walker (s)':>12} {'memory (s)':>12}")
    for name, wt, mt in rows:
        print(f"{name:10} {wt:12.4f} {mt:12.4f}")
    if len(rows) == 2:
        print(f"{'speedup':10} {rows[1][1] / rows[0][1]:11.2f}x "
              f"{rows[1][2] / rows[0][2]:11.2f}x")
        a, b = results["compiled"], results["pure"]
        same = a[0] == b[0] and a[1][0] == b[1][0] and a[1][1] == b[1][1]
        print(f"outputs identical: {same}")
        if not same:
            raise SystemExit("backend outputs diverge")


if __name__ == "__main__":
    main()
