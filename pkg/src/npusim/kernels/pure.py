"""Pure-Python twins of the compiled kernel cores.

Two inner loops dominate simulator runtime: nested-loop address generation
(one call per streamed beat) and the banked-memory arbitration step (one call
per cycle per active scratchpad).  Both are implemented here in plain Python
and again in _core.pyx with identical observable behavior; the package picks
whichever imports (see npusim.kernels).  Keeping these object-light is the
point — no numpy in this module.
"""

from collections import deque


class WalkerCore:
    """Odometer over (initial, step, final) loop levels, outermost first.

    Emits the sum of per-level value counters, pre-increment.  The innermost
    level advances every iteration; a level sitting at its final value rolls
    back to initial on the next advance and carries into the next-outer
    level.  The all-final combination is emitted before exhaustion.
    """

    __slots__ = ("initials", "steps", "finals", "values", "emitted", "total")

    def __init__(self, initials, steps, finals):
        self.initials = list(initials)
        self.steps = list(steps)
        self.finals = list(finals)
        self.values = list(initials)
        self.emitted = 0
        total = 1
        for ini, st, fin in zip(self.initials, self.steps, self.finals):
            total *= (fin - ini) // st + 1
        self.total = total

    @property
    def exhausted(self):
        return self.emitted >= self.total

    def reset(self):
        self.values = list(self.initials)
        self.emitted = 0

    def next(self):
        """Return the next address, or -1 once exhausted."""
        if self.emitted >= self.total:
            return -1
        values = self.values
        addr = 0
        for v in values:
            addr += v
        self.emitted += 1
        if self.emitted < self.total:
            finals = self.finals
            level = len(values) - 1
            while values[level] == finals[level]:
                values[level] = self.initials[level]
                level -= 1
            values[level] += self.steps[level]
        return addr

    def emit(self, n):
        """Return a list of up to n addresses (may be shorter at the end)."""
        out = []
        append = out.append
        while n > 0:
            addr = self.next()
            if addr < 0:
                break
            append(addr)
            n -= 1
        return out


class MemCore:
    """Banked scratchpad: per-port FIFO queues, per-bank round-robin grants,
    fixed read-return latency, byte storage.

    One grant per bank per cycle and one per port per cycle (only queue heads
    arbitrate).  Writes with a payload land in storage at grant; reads
    snapshot storage at grant and complete `latency` cycles later.  Timing-
    only traffic passes payload None / want_data False and never touches the
    storage bytes.
    """

    __slots__ = ("size", "banks", "bank_width", "ports", "latency",
                 "storage", "queues", "rr", "inflight", "queued")

    def __init__(self, size, banks, bank_width, ports, latency):
        self.size = size
        self.banks = banks
        self.bank_width = bank_width
        self.ports = ports
        self.latency = latency
        self.storage = bytearray(size)
        self.queues = [deque() for _ in range(ports)]
        self.rr = [0] * banks
        self.inflight = deque()
        self.queued = 0

    def submit(self, port, addr, length, is_write, tag, payload=None,
               want_data=False):
        self.queues[port].append((addr, length, is_write, tag, payload, want_data))
        self.queued += 1

    def queue_len(self, port):
        return len(self.queues[port])

    def busy(self):
        return self.queued > 0 or bool(self.inflight)

    def next_due(self):
        return self.inflight[0][0] if self.inflight else -1

    def step(self, cycle):
        """Advance one cycle.  Returns (grants, completions) where grants is
        a list of (port, tag, addr, length, is_write) in ascending bank order
        and completions is a list of (port, tag, data-or-None)."""
        completions = []
        inflight = self.inflight
        while inflight and inflight[0][0] <= cycle:
            _, port, tag, data = inflight.popleft()
            completions.append((port, tag, data))

        grants = []
        if self.queued:
            width = self.bank_width
            banks = self.banks
            heads = {}
            for port in range(self.ports):
                q = self.queues[port]
                if q:
                    bank = (q[0][0] // width) % banks
                    heads.setdefault(bank, []).append(port)
            storage = self.storage
            for bank in sorted(heads):
                contenders = heads[bank]
                rr = self.rr[bank]
                winner = -1
                best = self.ports + 1
                for port in contenders:
                    dist = (port - rr) % self.ports
                    if dist < best:
                        best = dist
                        winner = port
                self.rr[bank] = (winner + 1) % self.ports
                addr, length, is_write, tag, payload, want_data = \
                    self.queues[winner].popleft()
                self.queued -= 1
                if is_write:
                    if payload is not None:
                        storage[addr:addr + length] = payload
                else:
                    data = bytes(storage[addr:addr + length]) if want_data else None
                    inflight.append((cycle + self.latency, winner, tag, data))
                grants.append((winner, tag, addr, length, is_write))
        return grants, completions
