"""Per-TPB synchronization counters: monotonic update/monitor coordination.

All producer/consumer ordering on the machine reduces to two primitives on
64-bit counters that start at 0 at program load:

  update   — increment by one (the only mutation; counters never decrease)
  monitor  — proceed iff value >= expected, otherwise the asking unit stalls
             until a later update satisfies it

The engine applies all of a cycle's updates first, then re-evaluates pending
monitors (settlement discipline); this module supplies the counter file
itself plus barrier bookkeeping built on the same two primitives.  Waiters
are opaque sortable keys so releases have a deterministic order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, List, Optional, Tuple

from npusim.errors import IndexOutOfRange, OverflowFault, UnroutableTarget

COUNTER_MAX = 2 ** 64 - 1


@dataclass(frozen=True)
class SyncEvent:
    kind: str                      # update | monitor_satisfied | barrier_release
    cycle: int
    counter: Tuple[int, int, int]  # (cluster, tpb, index); (-1,-1,i) for CCB
    value: int
    waiter: Any = None


class SyncCounterFile:
    """Fixed array of monotonic counters plus the monitors blocked on them."""

    def __init__(self, count: int = 64):
        self.count = count
        self.values = [0] * count
        self.pending: List[Tuple[int, int, Any]] = []  # (index, expected, waiter)

    def _check(self, index: int):
        if not (0 <= index < self.count):
            raise IndexOutOfRange(f"counter {index} (file has {self.count})")

    def value(self, index: int) -> int:
        self._check(index)
        return self.values[index]

    def update(self, index: int) -> int:
        self._check(index)
        if self.values[index] >= COUNTER_MAX:
            raise OverflowFault(f"counter {index} at 2^64-1")
        self.values[index] += 1
        return self.values[index]

    def monitor(self, waiter, index: int, expected: int) -> bool:
        """True = proceed now; False = registered pending, waiter stalls."""
        self._check(index)
        if self.values[index] >= expected:
            return True
        self.pending.append((index, expected, waiter))
        return False

    def release_ready(self) -> List[Any]:
        """Drain every pending monitor its counter now satisfies, returning
        the released waiters sorted by their keys."""
        released = []
        keep = []
        for index, expected, waiter in self.pending:
            if self.values[index] >= expected:
                released.append(waiter)
            else:
                keep.append((index, expected, waiter))
        self.pending = keep
        released.sort()
        return released

    def waiting(self) -> List[Tuple[int, int, Any]]:
        return list(self.pending)


class Barrier:
    """Group barrier on one counter: N arrivals (updates) + N monitors with
    expected = group size.  No member passes before the last arrival."""

    def __init__(self, file: SyncCounterFile, index: int, group):
        if not group:
            raise IndexOutOfRange("empty barrier group")
        self.file = file
        self.index = index
        self.group = tuple(group)

    def arrive(self, member) -> int:
        if member not in self.group:
            raise IndexOutOfRange(f"{member} not in barrier group")
        return self.file.update(self.index)

    def try_pass(self, member) -> bool:
        return self.file.monitor(member, self.index, len(self.group))


def multicast_update(targets: List[Tuple[Optional[SyncCounterFile], int]]) -> List[int]:
    """Increment each (file, index) target exactly once; the engine layers
    fabric latency on remote targets before calling this."""
    for file, index in targets:
        if file is None:
            raise UnroutableTarget(f"no counter file for target index {index}")
    return [file.update(index) for file, index in targets]
