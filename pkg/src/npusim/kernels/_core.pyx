# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of npusim.kernels.pure — see that module for the contract.

Behavior must stay bit-identical to the pure implementations: the kernel
test suite runs every oracle against both backends, and the determinism
acceptance check hashes traces produced through whichever backend loaded.
"""

from libc.stdlib cimport free, malloc

from collections import deque


cdef class WalkerCore:
    cdef Py_ssize_t n
    cdef long long *ini
    cdef long long *stp
    cdef long long *fin
    cdef long long *val
    cdef public unsigned long long emitted
    cdef public unsigned long long total

    def __cinit__(self, initials, steps, finals):
        cdef Py_ssize_t i
        self.n = len(initials)
        self.ini = <long long *>malloc(self.n * sizeof(long long))
        self.stp = <long long *>malloc(self.n * sizeof(long long))
        self.fin = <long long *>malloc(self.n * sizeof(long long))
        self.val = <long long *>malloc(self.n * sizeof(long long))
        if not (self.ini and self.stp and self.fin and self.val):
            raise MemoryError()
        self.emitted = 0
        self.total = 1
        for i in range(self.n):
            self.ini[i] = initials[i]
            self.stp[i] = steps[i]
            self.fin[i] = finals[i]
            self.val[i] = self.ini[i]
            # Ranges are validated divisible upstream, so C truncation
            # equals floor division here.
            self.total *= <unsigned long long>(
                (self.fin[i] - self.ini[i]) // self.stp[i] + 1)

    def __dealloc__(self):
        free(self.ini)
        free(self.stp)
        free(self.fin)
        free(self.val)

    @property
    def initials(self):
        return [self.ini[i] for i in range(self.n)]

    @property
    def steps(self):
        return [self.stp[i] for i in range(self.n)]

    @property
    def finals(self):
        return [self.fin[i] for i in range(self.n)]

    @property
    def values(self):
        return [self.val[i] for i in range(self.n)]

    @property
    def exhausted(self):
        return self.emitted >= self.total

    def reset(self):
        cdef Py_ssize_t i
        for i in range(self.n):
            self.val[i] = self.ini[i]
        self.emitted = 0

    cdef long long _next(self):
        cdef long long addr = 0
        cdef Py_ssize_t level
        if self.emitted >= self.total:
            return -1
        for level in range(self.n):
            addr += self.val[level]
        self.emitted += 1
        if self.emitted < self.total:
            level = self.n - 1
            while self.val[level] == self.fin[level]:
                self.val[level] = self.ini[level]
                level -= 1
            self.val[level] += self.stp[level]
        return addr

    def next(self):
        return self._next()

    def emit(self, Py_ssize_t n):
        cdef long long addr
        out = []
        while n > 0:
            addr = self._next()
            if addr < 0:
                break
            out.append(addr)
            n -= 1
        return out


cdef struct Beat:
    long long addr
    long long tag
    int length
    unsigned char is_write
    unsigned char want_data
    unsigned char has_payload


cdef struct PortQ:
    Beat *buf
    Py_ssize_t head
    Py_ssize_t count
    Py_ssize_t cap


cdef struct Pending:
    long long due
    long long tag
    int port
    unsigned char has_data


cdef inline void portq_push(PortQ *q, Beat beat):
    cdef Beat *grown
    cdef Py_ssize_t i
    if q.count == q.cap:
        grown = <Beat *>malloc(q.cap * 2 * sizeof(Beat))
        for i in range(q.count):
            grown[i] = q.buf[(q.head + i) % q.cap]
        free(q.buf)
        q.buf = grown
        q.cap *= 2
        q.head = 0
    q.buf[(q.head + q.count) % q.cap] = beat
    q.count += 1


cdef class MemCore:
    cdef public Py_ssize_t size, banks, bank_width, ports, latency
    cdef public object storage          # bytearray shared with callers
    cdef unsigned char[:] smv
    cdef PortQ *pq
    cdef int *rr
    cdef int *best
    cdef int *winner
    cdef int *active
    cdef long long *mark
    cdef long long stamp
    cdef Pending *pend
    cdef Py_ssize_t pend_head, pend_count, pend_cap
    cdef public Py_ssize_t queued
    cdef object payload_q               # per-port deques of payload bytes
    cdef object data_q                  # FIFO of snapshot bytes for want_data reads

    def __cinit__(self, Py_ssize_t size, Py_ssize_t banks,
                  Py_ssize_t bank_width, Py_ssize_t ports, Py_ssize_t latency):
        cdef Py_ssize_t i
        self.size = size
        self.banks = banks
        self.bank_width = bank_width
        self.ports = ports
        self.latency = latency
        self.storage = bytearray(size)
        self.smv = self.storage
        self.pq = <PortQ *>malloc(ports * sizeof(PortQ))
        for i in range(ports):
            self.pq[i].buf = <Beat *>malloc(16 * sizeof(Beat))
            self.pq[i].head = 0
            self.pq[i].count = 0
            self.pq[i].cap = 16
        self.rr = <int *>malloc(banks * sizeof(int))
        self.best = <int *>malloc(banks * sizeof(int))
        self.winner = <int *>malloc(banks * sizeof(int))
        self.active = <int *>malloc(banks * sizeof(int))
        self.mark = <long long *>malloc(banks * sizeof(long long))
        self.stamp = 0
        for i in range(banks):
            self.rr[i] = 0
            self.mark[i] = -1
        self.pend_cap = 64
        self.pend = <Pending *>malloc(self.pend_cap * sizeof(Pending))
        self.pend_head = 0
        self.pend_count = 0
        self.queued = 0
        self.payload_q = [deque() for _ in range(ports)]
        self.data_q = deque()

    def __dealloc__(self):
        cdef Py_ssize_t i
        if self.pq:
            for i in range(self.ports):
                free(self.pq[i].buf)
            free(self.pq)
        free(self.rr)
        free(self.best)
        free(self.winner)
        free(self.active)
        free(self.mark)
        free(self.pend)

    def submit(self, int port, long long addr, int length, bint is_write,
               long long tag, payload=None, bint want_data=False):
        cdef Beat beat
        beat.addr = addr
        beat.tag = tag
        beat.length = length
        beat.is_write = 1 if is_write else 0
        beat.want_data = 1 if want_data else 0
        beat.has_payload = 0
        if payload is not None:
            beat.has_payload = 1
            self.payload_q[port].append(payload)
        portq_push(&self.pq[port], beat)
        self.queued += 1

    def queue_len(self, int port):
        return self.pq[port].count

    def busy(self):
        return self.queued > 0 or self.pend_count > 0

    def next_due(self):
        if self.pend_count:
            return self.pend[self.pend_head].due
        return -1

    cdef void _pend_push(self, Pending p):
        cdef Pending *grown
        cdef Py_ssize_t i
        if self.pend_count == self.pend_cap:
            grown = <Pending *>malloc(self.pend_cap * 2 * sizeof(Pending))
            for i in range(self.pend_count):
                grown[i] = self.pend[(self.pend_head + i) % self.pend_cap]
            free(self.pend)
            self.pend = grown
            self.pend_cap *= 2
            self.pend_head = 0
        self.pend[(self.pend_head + self.pend_count) % self.pend_cap] = p
        self.pend_count += 1

    def step(self, long long cycle):
        cdef Py_ssize_t port, i, nactive, j
        cdef int bank, dist, tmp
        cdef Beat *beat
        cdef Beat popped
        cdef Pending p
        cdef PortQ *q
        completions = []
        while self.pend_count and self.pend[self.pend_head].due <= cycle:
            p = self.pend[self.pend_head]
            self.pend_head = (self.pend_head + 1) % self.pend_cap
            self.pend_count -= 1
            data = self.data_q.popleft() if p.has_data else None
            completions.append((p.port, p.tag, data))

        grants = []
        if self.queued == 0:
            return grants, completions

        self.stamp += 1
        nactive = 0
        for port in range(self.ports):
            q = &self.pq[port]
            if q.count == 0:
                continue
            beat = &q.buf[q.head]
            bank = <int>((beat.addr // self.bank_width) % self.banks)
            dist = <int>((port - self.rr[bank]) % self.ports)
            if dist < 0:
                dist += <int>self.ports
            if self.mark[bank] != self.stamp:
                self.mark[bank] = self.stamp
                self.active[nactive] = bank
                nactive += 1
                self.best[bank] = dist
                self.winner[bank] = <int>port
            elif dist < self.best[bank]:
                self.best[bank] = dist
                self.winner[bank] = <int>port

        # Ascending bank order, matching the pure twin.
        for i in range(1, nactive):
            j = i
            while j > 0 and self.active[j - 1] > self.active[j]:
                tmp = self.active[j - 1]
                self.active[j - 1] = self.active[j]
                self.active[j] = tmp
                j -= 1

        for i in range(nactive):
            bank = self.active[i]
            port = self.winner[bank]
            q = &self.pq[port]
            popped = q.buf[q.head]
            q.head = (q.head + 1) % q.cap
            q.count -= 1
            self.queued -= 1
            self.rr[bank] = <int>((port + 1) % self.ports)
            if popped.is_write:
                if popped.has_payload:
                    payload = self.payload_q[port].popleft()
                    self.storage[popped.addr:popped.addr + popped.length] = payload
            else:
                p.due = cycle + self.latency
                p.tag = popped.tag
                p.port = <int>port
                p.has_data = popped.want_data
                if popped.want_data:
                    self.data_q.append(
                        bytes(self.storage[popped.addr:popped.addr + popped.length]))
                self._pend_push(p)
            grants.append((port, popped.tag, popped.addr, popped.length,
                           popped.is_write != 0))
        return grants, completions
