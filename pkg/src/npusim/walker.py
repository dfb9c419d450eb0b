"""Nested-loop address-sequence generation for streaming memory access.

A walker is an odometer over loop levels, outermost first.  Each level holds
a value counter running from `initial` to `final` in increments of `step`
(negative steps are allowed; the range must divide exactly).  Every iteration
emits the SUM of all level values, then advances the innermost level; a level
that was at `final` rolls back to `initial` and carries outward on the next
advance.  The all-final combination is emitted before exhaustion.

Double buffering falls out of the encoding: an outer level (0, B, B) makes
the emitted stream alternate between a region at 0 and a region at offset B.

Two implementations exist: the incremental kernel (compiled or pure, see
npusim.kernels) used beat-by-beat, and the closed-form `expand` used when
the whole sequence is wanted at once.  Tests hold them to the same oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from npusim.errors import Exhausted, InvalidLevel
from npusim.kernels import WalkerCore

MAX_LEVELS = 8
MAX_ITERS = 2 ** 32


@dataclass(frozen=True)
class LoopLevel:
    initial: int
    step: int
    final: int

    def __post_init__(self):
        if self.step == 0:
            raise InvalidLevel(f"step 0 in level {self}")
        span = self.final - self.initial
        if span % self.step != 0 or span // self.step < 0:
            raise InvalidLevel(
                f"({self.initial}, {self.step}, {self.final}): range is not a "
                f"nonnegative whole number of steps")

    @property
    def count(self) -> int:
        return (self.final - self.initial) // self.step + 1


@dataclass(frozen=True)
class WalkerConfig:
    levels: Tuple[LoopLevel, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not 1 <= len(self.levels) <= MAX_LEVELS:
            raise InvalidLevel(f"{len(self.levels)} levels (1..{MAX_LEVELS} allowed)")
        if self.total > MAX_ITERS:
            raise InvalidLevel(f"{self.total} iterations exceeds {MAX_ITERS}")

    @classmethod
    def of(cls, *triples) -> "WalkerConfig":
        return cls(tuple(LoopLevel(*t) for t in triples))

    @property
    def total(self) -> int:
        n = 1
        for lv in self.levels:
            n *= lv.count
        return n

    def triples(self) -> List[Tuple[int, int, int]]:
        return [(lv.initial, lv.step, lv.final) for lv in self.levels]

    def shifted(self, delta: int) -> "WalkerConfig":
        """Same walk displaced by delta bytes (folded into the outermost
        initial/final, the documented convention for base addresses)."""
        out = list(self.levels)
        out[0] = LoopLevel(out[0].initial + delta, out[0].step, out[0].final + delta)
        return WalkerConfig(tuple(out))


class WalkerState:
    """Live counters for one walker; exclusively owned by one unit."""

    __slots__ = ("config", "_core")

    def __init__(self, config: WalkerConfig):
        self.config = config
        self._core = WalkerCore(
            [lv.initial for lv in config.levels],
            [lv.step for lv in config.levels],
            [lv.final for lv in config.levels])

    @property
    def values(self) -> List[int]:
        return list(self._core.values)

    @property
    def emitted(self) -> int:
        return self._core.emitted

    @property
    def exhausted(self) -> bool:
        return self._core.exhausted

    def next(self) -> int:
        addr = self._core.next()
        if addr < 0:
            raise Exhausted(f"walker done after {self._core.emitted} addresses")
        return addr

    def emit(self, n: int) -> List[int]:
        return self._core.emit(n)


def walker_new(cfg: WalkerConfig) -> WalkerState:
    return WalkerState(cfg)


def walker_next(st: WalkerState) -> int:
    return st.next()


def walker_total(cfg: WalkerConfig) -> int:
    return cfg.total


def paired_regions(base_a: int, base_b: int, pairs: int,
                   stride: int = 32) -> WalkerConfig:
    """Walk alternating between two sequential regions: a, b, a+stride,
    b+stride, ...  (2*pairs addresses).

    This is the layout idiom for a stream consumed over two memory ports
    round-robin: each port then sees consecutive banks at one bank per
    beat instead of two, which keeps its sweep phase-locked AWAY from the
    other streams' sweeps rather than onto them.
    """
    if pairs <= 0:
        raise InvalidLevel(f"{pairs} pairs")
    if base_a == base_b:
        raise InvalidLevel("regions coincide")
    return WalkerConfig.of(
        (base_a, stride, base_a + (pairs - 1) * stride),
        (0, base_b - base_a, base_b - base_a))


def expand(cfg: WalkerConfig) -> np.ndarray:
    """Whole address sequence as int64, by closed form.

    Position t carries, at level l, value initial_l + ((t // span_l) mod
    count_l) * step_l where span_l is the product of inner-level counts;
    the emitted address is the sum over levels.
    """
    total = cfg.total
    addrs = np.zeros(total, dtype=np.int64)
    t = np.arange(total, dtype=np.int64)
    span = 1
    for lv in reversed(cfg.levels):
        addrs += lv.initial + (t // span) % lv.count * lv.step
        span *= lv.count
    return addrs
