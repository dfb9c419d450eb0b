"""Banked scratchpad model: interleaved banks, 8 requester ports, per-bank
round-robin arbitration, per-requester ordering, grant-time visibility.

Every byte belongs to bank (addr // bank_width) mod banks.  Requests are
pre-split by their issuers into beats that never cross a bank line, so
arbitration is a per-bank choice among port-queue heads: the next port in
round-robin order from the bank's pointer wins, and the pointer advances
past the winner.  At most one grant per bank and per port per cycle.

The grant is the commitment point: writes become globally visible then, any
attached sync action fires then, and per-requester order is fixed then.
Read DATA returns `latency` cycles later on the response channel (modeled,
and visible on raw reads through this class); the functional units pace
their pipelines off grants and absorb the response skew in their documented
fill constants — see the engine module.

Port assignment per TPB (fixed, one stream per port):

  0 TCU activations in     4 CVU operands in (both streams)
  1 TCU weights in lane A  5 CVU out
  2 TCU weights in lane B  6 DTDU (reads and writes)
  3 TCU out                7 GSDU local side + CSU

The weight stream gets two lanes because the contraction array consumes
64 B/cycle of weights at full rate, twice the per-port width.  Fabric
ingress (ring deliveries, mesh remote writes, DMA) lands through a separate
fill datapath and does not occupy these ports.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from npusim.errors import MalformedRequest, OutOfRange
from npusim.kernels import MemCore

PORT_TCU_ACT = 0
PORT_TCU_WT_A = 1
PORT_TCU_WT_B = 2
PORT_TCU_OUT = 3
PORT_CVU_IN = 4
PORT_CVU_OUT = 5
PORT_DTDU = 6
PORT_SVC = 7

PORT_NAMES = {
    PORT_TCU_ACT: "tcu.act", PORT_TCU_WT_A: "tcu.wt.a",
    PORT_TCU_WT_B: "tcu.wt.b", PORT_TCU_OUT: "tcu.out",
    PORT_CVU_IN: "cvu.in", PORT_CVU_OUT: "cvu.out",
    PORT_DTDU: "dtdu", PORT_SVC: "svc",
}


@dataclass(frozen=True)
class MemRequest:
    requester: int
    addr: int
    length: int
    rw: str                      # "read" | "write"
    payload: Optional[bytes] = None
    tag: int = 0
    sync_on_grant: object = None  # SyncAction, fired by the engine at grant
    want_data: bool = False


@dataclass(frozen=True)
class Grant:
    port: int
    tag: int
    addr: int
    length: int
    is_write: bool
    sync_on_grant: object


@dataclass(frozen=True)
class Completion:
    port: int
    tag: int
    data: Optional[bytes]


class BankedMemory:
    def __init__(self, size: int, banks: int, bank_width: int, ports: int,
                 latency: int):
        self.size = size
        self.banks = banks
        self.bank_width = bank_width
        self.ports = ports
        self.latency = latency
        self.core = MemCore(size, banks, bank_width, ports, latency)
        self._syncs = {}      # (port, tag) -> sync action
        self._np = np.frombuffer(self.core.storage, dtype=np.uint8)

    @property
    def storage(self) -> bytearray:
        return self.core.storage

    @property
    def np(self) -> np.ndarray:
        """Mutable uint8 view of the whole storage (shared buffer)."""
        return self._np

    def bank_of(self, addr: int) -> int:
        if not (0 <= addr < self.size):
            raise OutOfRange(f"addr {addr} outside [0, {self.size})")
        return (addr // self.bank_width) % self.banks

    def submit(self, req: MemRequest) -> None:
        if not (0 <= req.requester < self.ports):
            raise MalformedRequest(f"port {req.requester} of {self.ports}")
        if req.length <= 0:
            raise MalformedRequest("length 0")
        if req.addr < 0 or req.addr + req.length > self.size:
            raise MalformedRequest(
                f"[{req.addr}, {req.addr + req.length}) outside storage")
        first = req.addr // self.bank_width
        last = (req.addr + req.length - 1) // self.bank_width
        if first != last:
            raise MalformedRequest(
                f"[{req.addr}, {req.addr + req.length}) crosses the bank line "
                f"at {(first + 1) * self.bank_width}")
        if req.rw == "write" and req.payload is not None \
                and len(req.payload) != req.length:
            raise MalformedRequest("payload length mismatch")
        if req.sync_on_grant is not None:
            self._syncs[(req.requester, req.tag)] = req.sync_on_grant
        self.core.submit(req.requester, req.addr, req.length,
                         req.rw == "write", req.tag, req.payload, req.want_data)

    def cycle(self, now: int) -> Tuple[List[Grant], List[Completion]]:
        raw_grants, raw_comps = self.core.step(now)
        grants = [Grant(p, t, a, n, w, self._syncs.pop((p, t), None))
                  for (p, t, a, n, w) in raw_grants]
        comps = [Completion(p, t, d) for (p, t, d) in raw_comps]
        return grants, comps

    def queue_len(self, port: int) -> int:
        return self.core.queue_len(port)

    def busy(self) -> bool:
        return self.core.busy()

    def next_due(self) -> int:
        return self.core.next_due()

    # ----- test-fixture interface: flat binary images -----

    def dump(self, lo: int = 0, hi: Optional[int] = None) -> bytes:
        hi = self.size if hi is None else hi
        if not (0 <= lo <= hi <= self.size):
            raise OutOfRange(f"dump range [{lo}, {hi})")
        return bytes(self.core.storage[lo:hi])

    def load(self, image: bytes, offset: int = 0) -> None:
        if offset < 0 or offset + len(image) > self.size:
            raise OutOfRange(f"load of {len(image)} bytes at {offset}")
        self.core.storage[offset:offset + len(image)] = image
