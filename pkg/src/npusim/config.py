"""Machine parameters, data types, address spaces, and tensor descriptors.

Everything is expressed in cycles and bytes-per-cycle: the modeled machine's
published bandwidths are normalized to a nominal 1 GHz clock, so the ratios
between link rates hold exactly and no wall-clock time ever enters the model.

The config file format is a flat, human-readable key/value list::

    # comment
    num_clusters = 14
    hbsm_bytes   = 2097152

Unknown keys are errors; omitted keys take the defaults below.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Tuple

import numpy as np

from npusim.errors import ConfigInvalid, IndexOutOfRange, OutOfRange

KIB = 1024
MIB = 1024 * 1024


@dataclass(frozen=True)
class MachineConfig:
    """Counts, widths, latencies, and bandwidths of the modeled machine.

    The first block mirrors the hardware's published figures; the second
    block holds modeling constants (pipeline fill/drain, hop latencies,
    capacities the hardware docs leave implicit) that the cycle model needs.
    All are overridable from the config file.
    """

    num_clusters: int = 14
    tpbs_per_cluster: int = 4

    hbsm_bytes: int = 2 * MIB
    hbsm_banks: int = 32
    hbsm_bank_width: int = 32          # bytes per bank per cycle
    hbsm_ports: int = 8
    hbsm_latency: int = 20             # read-return cycles after grant

    ccb_sram_bytes: int = 32 * MIB
    ccb_sram_banks: int = 4
    ccb_interleave: int = 4096
    ccb_sram_ports: int = 4            # dma0, dma1, mesh, service
    ccb_sram_latency: int = 4
    ccb_dma_engines: int = 2

    ddr_bytes_per_cycle: int = 273
    mesh_pair_bytes_per_cycle: int = 256
    drb_aggregate_bytes_per_cycle: int = 256
    icb_bits_per_cycle: int = 64

    tcu_rows: int = 8
    tcu_cols: int = 64
    tcu_dot_width: int = 4
    cvu_lanes: int = 32

    dispatcher_contexts: int = 4

    # Modeling constants.
    ddr_bytes: int = 64 * MIB          # modeled DDR window (desk scale)
    ddr_port_model: str = "pooled"     # "pooled": one 273 B/c pool; "dual": 128 B/c per engine
    iq_capacity: int = 64              # instructions buffered per cluster
    sync_counters: int = 64            # counters per TPB
    tcu_fill: int = 8                  # TCU pipeline fill cycles
    tcu_drain: int = 8                 # TCU pipeline drain cycles
    cvu_fill: int = 4
    cvu_drain: int = 4
    dtdu_fill: int = 2
    dtdu_drain: int = 2
    csu_overhead: int = 20             # interrupt raise/ack cycles per service request
    icb_hop_latency: int = 1
    mesh_hop_latency: int = 2
    walker_max_levels: int = 8
    walker_max_iters: int = 2 ** 32
    cvu_sregs: int = 8
    watchdog_cycles: int = 10 ** 8

    @property
    def total_tpbs(self) -> int:
        return self.num_clusters * self.tpbs_per_cluster

    @property
    def hbsm_line(self) -> int:
        return self.hbsm_bank_width


def validate_config(cfg: MachineConfig) -> MachineConfig:
    """Return cfg unchanged iff every invariant holds.

    Raises ConfigInvalid carrying the full list of violations, not just the
    first one, so a bad config file is diagnosable in one pass.
    """
    bad = []
    positive = [
        "num_clusters", "tpbs_per_cluster", "hbsm_bytes", "hbsm_banks",
        "hbsm_bank_width", "hbsm_ports", "hbsm_latency", "ccb_sram_bytes",
        "ccb_sram_banks", "ccb_interleave", "ccb_sram_ports",
        "ccb_sram_latency", "ccb_dma_engines",
        "ddr_bytes_per_cycle", "mesh_pair_bytes_per_cycle",
        "drb_aggregate_bytes_per_cycle", "icb_bits_per_cycle", "tcu_rows",
        "tcu_cols", "tcu_dot_width", "cvu_lanes", "dispatcher_contexts",
        "ddr_bytes", "iq_capacity", "sync_counters", "icb_hop_latency",
        "mesh_hop_latency", "walker_max_levels", "walker_max_iters",
        "cvu_sregs",
    ]
    for name in positive:
        if getattr(cfg, name) <= 0:
            bad.append(f"{name} must be positive (got {getattr(cfg, name)})")
    for name in ("tcu_fill", "tcu_drain", "cvu_fill", "cvu_drain",
                 "dtdu_fill", "dtdu_drain", "csu_overhead"):
        if getattr(cfg, name) < 0:
            bad.append(f"{name} must be nonnegative")
    if cfg.hbsm_banks > 0 and cfg.hbsm_bank_width > 0:
        if cfg.hbsm_bytes % (cfg.hbsm_banks * cfg.hbsm_bank_width):
            bad.append("hbsm_bytes not divisible by hbsm_banks * hbsm_bank_width")
    if cfg.ccb_sram_banks > 0 and cfg.ccb_interleave > 0:
        if cfg.ccb_sram_bytes % (cfg.ccb_sram_banks * cfg.ccb_interleave):
            bad.append("ccb_sram_bytes not divisible by ccb_sram_banks * ccb_interleave")
    # One port per requester stream; the documented assignment (hbsm module)
    # names exactly 8: TCU act, TCU wt lane A/B, TCU out, CVU in, CVU out,
    # DTDU, GSDU+CSU shared.
    if cfg.hbsm_ports > 8:
        bad.append("hbsm_ports exceeds the documented requester list (8)")
    if cfg.ddr_port_model not in ("pooled", "dual"):
        bad.append(f"ddr_port_model must be 'pooled' or 'dual' (got {cfg.ddr_port_model!r})")
    if bad:
        raise ConfigInvalid(bad)
    return cfg


def load_config(path: str) -> MachineConfig:
    """Parse the flat key=value config file; unknown keys are errors."""
    known = {f.name: f.type for f in fields(MachineConfig)}
    overrides = {}
    bad = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                bad.append(f"line {lineno}: expected 'key = value'")
                continue
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in known:
                bad.append(f"line {lineno}: unknown key {key!r}")
                continue
            if key == "ddr_port_model":
                overrides[key] = val
            else:
                try:
                    overrides[key] = int(val, 0)
                except ValueError:
                    bad.append(f"line {lineno}: {key} wants an integer, got {val!r}")
    if bad:
        raise ConfigInvalid(bad)
    return validate_config(MachineConfig(**overrides))


def with_overrides(cfg: MachineConfig, **kw) -> MachineConfig:
    return validate_config(replace(cfg, **kw))


# ---------------------------------------------------------------------------
# Data types

@dataclass(frozen=True)
class DataType:
    tag: str
    byte_width: int
    np_dtype: np.dtype

    def __repr__(self):
        return f"DataType({self.tag})"


I8 = DataType("i8", 1, np.dtype(np.int8))
U8 = DataType("u8", 1, np.dtype(np.uint8))
I32 = DataType("i32", 4, np.dtype(np.int32))
F16 = DataType("f16", 2, np.dtype(np.float16))
F32 = DataType("f32", 4, np.dtype(np.float32))

DTYPES = {d.tag: d for d in (I8, U8, I32, F16, F32)}
ACCUMULATOR_TAGS = ("i32", "f32")


def dtype_from_tag(tag: str) -> DataType:
    try:
        return DTYPES[tag]
    except KeyError:
        raise IndexOutOfRange(f"unknown dtype tag {tag!r}") from None


# ---------------------------------------------------------------------------
# Address spaces

HBSM, CCB_SRAM, DDR = "hbsm", "ccb_sram", "ddr"


@dataclass(frozen=True)
class AddressSpace:
    """One of the machine's three directly addressable memories.

    HBSM spaces carry the owning (cluster, tpb); the other two are global.
    """

    kind: str
    cluster: int = -1
    tpb: int = -1

    def __post_init__(self):
        if self.kind not in (HBSM, CCB_SRAM, DDR):
            raise IndexOutOfRange(f"unknown address space {self.kind!r}")
        if self.kind == HBSM and (self.cluster < 0 or self.tpb < 0):
            raise IndexOutOfRange("HBSM space needs cluster and tpb ids")

    def capacity(self, cfg: MachineConfig) -> int:
        if self.kind == HBSM:
            return cfg.hbsm_bytes
        if self.kind == CCB_SRAM:
            return cfg.ccb_sram_bytes
        return cfg.ddr_bytes

    def check(self, cfg: MachineConfig) -> "AddressSpace":
        if self.kind == HBSM:
            if not (0 <= self.cluster < cfg.num_clusters):
                raise IndexOutOfRange(f"cluster {self.cluster} out of range")
            if not (0 <= self.tpb < cfg.tpbs_per_cluster):
                raise IndexOutOfRange(f"tpb {self.tpb} out of range")
        return self

    def short(self) -> str:
        if self.kind == HBSM:
            return f"hbsm:{self.cluster}.{self.tpb}"
        return self.kind


def space_from_short(text: str) -> AddressSpace:
    if text.startswith("hbsm:"):
        c, t = text[5:].split(".")
        return AddressSpace(HBSM, int(c), int(t))
    if text in (CCB_SRAM, DDR):
        return AddressSpace(text)
    raise IndexOutOfRange(f"bad address space {text!r}")


# ---------------------------------------------------------------------------
# Tensor descriptors

@dataclass(frozen=True)
class TensorDesc:
    """Shape/stride/dtype/placement descriptor for a tensor or mini-tensor.

    Strides are in elements (multiplied by dtype width at address time), may
    describe transposed or row-padded layouts, and must be positive: reversed
    walks are the walker's job, not the descriptor's.
    """

    shape: Tuple[int, ...]
    strides: Tuple[int, ...]
    dtype: DataType
    space: AddressSpace
    base: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.shape) != len(self.strides):
            raise IndexOutOfRange("shape/strides rank mismatch")
        if not self.shape:
            raise IndexOutOfRange("rank-0 descriptors not supported")
        if any(s <= 0 for s in self.shape):
            raise IndexOutOfRange(f"zero/negative extent in shape {self.shape}")
        if any(s <= 0 for s in self.strides):
            raise IndexOutOfRange(f"nonpositive stride in {self.strides}")
        if self.base < 0:
            raise IndexOutOfRange("negative base offset")

    @classmethod
    def dense(cls, shape, dtype: DataType, space: AddressSpace, base: int = 0,
              row_align: int = 1) -> "TensorDesc":
        """Row-major descriptor; row_align pads the innermost run to a
        multiple of row_align bytes (bank-aligned rows in HBSM)."""
        shape = tuple(int(s) for s in shape)
        strides = [0] * len(shape)
        strides[-1] = 1
        inner = shape[-1]
        if row_align > 1:
            run_bytes = inner * dtype.byte_width
            padded = -(-run_bytes // row_align) * row_align
            inner = padded // dtype.byte_width
        acc = inner
        for d in range(len(shape) - 2, -1, -1):
            strides[d] = acc
            acc *= shape[d]
        return cls(shape, tuple(strides), dtype, space, base)

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def elements(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    def tensor_bytes(self) -> int:
        """Dense payload bytes: element count times width.  Strides affect
        addressing, not the amount of data."""
        return self.elements * self.dtype.byte_width

    def footprint(self) -> Tuple[int, int]:
        """(lo, hi) byte envelope actually reachable: [lo, hi)."""
        span = sum((e - 1) * s for e, s in zip(self.shape, self.strides))
        return self.base, self.base + (span + 1) * self.dtype.byte_width

    def element_address(self, index) -> Tuple[AddressSpace, int]:
        index = tuple(index)
        if len(index) != self.rank:
            raise IndexOutOfRange(f"index rank {len(index)} != {self.rank}")
        for i, e in zip(index, self.shape):
            if not (0 <= i < e):
                raise IndexOutOfRange(f"index {index} outside shape {self.shape}")
        off = self.base + sum(i * s for i, s in zip(index, self.strides)) * self.dtype.byte_width
        return self.space, off

    def check(self, cfg: MachineConfig, writable: bool = False) -> "TensorDesc":
        self.space.check(cfg)
        lo, hi = self.footprint()
        if hi > self.space.capacity(cfg):
            raise OutOfRange(
                f"footprint [{lo},{hi}) exceeds {self.space.short()} capacity")
        if writable and not self._non_overlapping():
            raise IndexOutOfRange(f"self-overlapping layout {self.strides} for writable tensor")
        return self

    def _non_overlapping(self) -> bool:
        # Sufficient condition: sorted descending by stride, each stride
        # covers everything the inner dims can reach.
        dims = sorted(zip(self.strides, self.shape), reverse=True)
        reach = 0
        for stride, extent in reversed(dims):
            if stride < reach + 1:
                return False
            reach += (extent - 1) * stride
        return True

    def view(self, storage: np.ndarray) -> np.ndarray:
        """Strided numpy view over a byte storage array (zero copy)."""
        byte_strides = tuple(s * self.dtype.byte_width for s in self.strides)
        return np.lib.stride_tricks.as_strided(
            storage[self.base:].view(self.dtype.np_dtype),
            shape=self.shape, strides=byte_strides)

    def short(self) -> str:
        sh = "x".join(map(str, self.shape))
        st = "x".join(map(str, self.strides))
        return f"{sh}@{st}:{self.dtype.tag}:{self.space.short()}+{self.base}"


def desc_from_short(text: str) -> TensorDesc:
    shapes, rest = text.split(":", 1)
    sh, st = shapes.split("@")
    dt, rest = rest.split(":", 1)
    sp, base = rest.rsplit("+", 1)
    return TensorDesc(tuple(int(x) for x in sh.split("x")),
                      tuple(int(x) for x in st.split("x")),
                      dtype_from_tag(dt), space_from_short(sp), int(base))


def tensor_bytes(t: TensorDesc) -> int:
    return t.tensor_bytes()


def element_address(t: TensorDesc, index) -> Tuple[AddressSpace, int]:
    return t.element_address(index)
