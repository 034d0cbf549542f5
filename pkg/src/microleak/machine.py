"""Cycle-accurate machine: workload ops, context switches, fences, padding.

The machine owns one instance of every component in ``uarch`` plus a handful
of architectural registers. Workload execution has two routes over the same
state arrays: ``exec_op``/``run_sequence`` (reference, validates domains) and
``run_encoded`` (compiled). Context switches run a fixed kernel routine whose
cost depends only on cache occupancy, then optionally pad the switch to a
fixed duration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np

from . import fastpath as fp
from .uarch import (
    WRITE_BACK,
    WRITE_THROUGH,
    Bht,
    Btb,
    Lfsr8,
    MissHandler,
    RoundRobinArbiter,
    SetAssocCache,
    Tlb,
    WriteBuffer,
    digest_fields,
)


class Domain(IntEnum):
    SPY = 0
    TROJAN = 1
    KERNEL = 2


DOMAIN_SHIFT = 28
CODE_OFFSET = 0x0800_0000
SW_PRIME_OFFSET = 0x0100_0000
DIRTY_OFFSET = 0x0200_0000


def data_base(domain: Domain) -> int:
    return (int(domain) + 1) << DOMAIN_SHIFT


def code_base(domain: Domain) -> int:
    return data_base(domain) | CODE_OFFSET


def domain_of(addr: int) -> int:
    return (addr >> DOMAIN_SHIFT) - 1


class OpKind(IntEnum):
    READ = fp.OP_READ
    WRITE = fp.OP_WRITE
    COND_BRANCH = fp.OP_COND_BRANCH
    INDIRECT_JUMP = fp.OP_INDIRECT_JUMP
    FETCH_AT = fp.OP_FETCH_AT


@dataclass(frozen=True)
class WorkloadOp:
    kind: OpKind
    a: int
    b: int = 0


def read(addr: int) -> WorkloadOp:
    return WorkloadOp(OpKind.READ, addr)


def write(addr: int) -> WorkloadOp:
    return WorkloadOp(OpKind.WRITE, addr)


def fetch_at(pc: int) -> WorkloadOp:
    return WorkloadOp(OpKind.FETCH_AT, pc)


def cond_branch(pc: int, taken: bool) -> WorkloadOp:
    return WorkloadOp(OpKind.COND_BRANCH, pc, 1 if taken else 0)


def indirect_jump(pc: int, target: int) -> WorkloadOp:
    return WorkloadOp(OpKind.INDIRECT_JUMP, pc, target)


Encoded = tuple[np.ndarray, np.ndarray, np.ndarray]


def encode_ops(ops: list[WorkloadOp]) -> Encoded:
    kinds = np.array([int(op.kind) for op in ops], dtype=np.int64)
    aa = np.array([op.a for op in ops], dtype=np.int64)
    bb = np.array([op.b for op in ops], dtype=np.int64)
    return kinds, aa, bb


class PadExceededError(Exception):
    """A padded interval finished after its deadline."""

    def __init__(self, overshoot: int, iteration: int = -1) -> None:
        self.overshoot = overshoot
        self.iteration = iteration
        where = f" (iteration {iteration})" if iteration >= 0 else ""
        super().__init__(f"pad deadline missed by {overshoot} cycles{where}")


class InvalidMaskError(ValueError):
    pass


class DomainViolationError(RuntimeError):
    pass


class FenceVariant(Enum):
    NONE = "none"
    SW_PRIME = "sw_prime"
    BASIC_FLUSH = "basic_flush"
    FULL_FLUSH = "full_flush"
    MICRORESET = "microreset"


MASK_L1D = 0x01
MASK_L1I = 0x02
MASK_TLBS = 0x04
MASK_PREDICTORS = 0x08
MASK_SECONDARY = 0x10
MASK_ALL = 0x1F

KERNEL_D_LINES = 64
KERNEL_D_STRIDE = 64
KERNEL_I_LINES = 32


@dataclass(frozen=True)
class CacheGeometry:
    sets: int
    ways: int
    line_bytes: int


@dataclass(frozen=True)
class Latencies:
    t_hit: int = 1
    t_miss: int = 20
    t_wb_per_line: int = 8
    t_mispredict: int = 5
    t_tlb_miss: int = 40
    t_pipeline_flush: int = 6
    t_fence_drain: int = 16
    t_microreset_assert: int = 16
    t_replay: int = 3000


@dataclass(frozen=True)
class KernelCosts:
    clint_reconfig: int = 1800
    schedule: int = 800
    thread_switch: int = 320

    @property
    def base_total(self) -> int:
        return self.clint_reconfig + self.schedule + self.thread_switch


@dataclass(frozen=True)
class MicroArchConfig:
    l1d: CacheGeometry = field(default_factory=lambda: CacheGeometry(256, 8, 16))
    l1i: CacheGeometry = field(default_factory=lambda: CacheGeometry(256, 4, 16))
    write_policy: str = WRITE_THROUGH
    latencies: Latencies = field(default_factory=Latencies)
    kernel: KernelCosts = field(default_factory=KernelCosts)
    tlb_entries: int = 16
    bht_entries: int = 64
    btb_entries: int = 16
    wbuf_capacity: int = 8
    page_shift: int = 12
    pipe_depth: int = 6
    mh_trace: str = "auto"

    def __post_init__(self) -> None:
        if self.write_policy not in (WRITE_THROUGH, WRITE_BACK):
            raise ValueError(f"unknown write policy {self.write_policy!r}")
        if self.mh_trace not in ("auto", "on", "off"):
            raise ValueError(f"mh_trace must be auto/on/off, got {self.mh_trace!r}")
        for label, geo in (("l1d", self.l1d), ("l1i", self.l1i)):
            for part in ("sets", "ways", "line_bytes"):
                v = getattr(geo, part)
                if v < 1 or v & (v - 1):
                    raise ValueError(
                        f"{label}.{part} must be a power of two, got {v}")
        for label, v in (("tlb_entries", self.tlb_entries),
                         ("bht_entries", self.bht_entries)):
            if v < 2 or v & (v - 1):
                raise ValueError(f"{label} must be a power of two >= 2, got {v}")
        if self.btb_entries < 1:
            raise ValueError(f"btb_entries must be >= 1, got {self.btb_entries}")
        if self.wbuf_capacity < 1:
            raise ValueError(f"wbuf_capacity must be >= 1, got {self.wbuf_capacity}")
        if self.pipe_depth < 1:
            raise ValueError(f"pipe_depth must be >= 1, got {self.pipe_depth}")
        if not 4 <= self.page_shift <= 30:
            raise ValueError(f"page_shift must be in [4, 30], got {self.page_shift}")

    @property
    def trace_enabled(self) -> bool:
        if self.mh_trace == "on":
            return True
        if self.mh_trace == "off":
            return False
        return self.write_policy == WRITE_THROUGH


@dataclass
class CsReport:
    total_cycles: int
    kernel_cycles: int
    fence_cycles: int
    writebacks: int
    padded: bool
    pad_stall: int
    breakdown: dict[str, int]


ARCH = "arch"
UARCH = "uarch"


class MicroState:
    """Ordered registry of (name, array, tag) with a frozen reset image.

    Arrays tagged ``uarch`` are restored from the reset image by
    ``reset_non_architectural``; arrays tagged ``arch`` survive it.
    """

    def __init__(self) -> None:
        self.fields: list[tuple[str, np.ndarray, str]] = []
        self._reset_image: dict[str, np.ndarray] = {}

    def register(self, name: str, arr: np.ndarray, tag: str) -> np.ndarray:
        if tag not in (ARCH, UARCH):
            raise ValueError(f"unknown tag {tag!r}")
        if any(n == name for n, _, _ in self.fields):
            raise ValueError(f"duplicate state field {name!r}")
        self.fields.append((name, arr, tag))
        return arr

    def freeze_reset_image(self) -> None:
        self._reset_image = {n: a.copy() for n, a, t in self.fields if t == UARCH}

    def reset_non_architectural(self) -> None:
        for name, arr, tag in self.fields:
            if tag == UARCH:
                arr[...] = self._reset_image[name]

    def digest(self, subset: str = "all") -> str:
        want = {"architectural": (ARCH,), "non_architectural": (UARCH,),
                "all": (ARCH, UARCH)}.get(subset)
        if want is None:
            raise ValueError(f"unknown digest subset {subset!r}")
        return digest_fields([(n, a) for n, a, t in self.fields if t in want])


class Machine:
    def __init__(self, config: MicroArchConfig | None = None) -> None:
        self.config = config if config is not None else MicroArchConfig()
        cfg = self.config
        self.write_through = cfg.write_policy == WRITE_THROUGH
        self.trace_enabled = cfg.trace_enabled

        self.l1d = SetAssocCache(cfg.l1d.sets, cfg.l1d.ways, cfg.l1d.line_bytes,
                                 cfg.write_policy, Lfsr8())
        self.l1i = SetAssocCache(cfg.l1i.sets, cfg.l1i.ways, cfg.l1i.line_bytes,
                                 WRITE_THROUGH, Lfsr8())
        self.dtlb = Tlb(cfg.tlb_entries)
        self.itlb = Tlb(cfg.tlb_entries)
        self.bht = Bht(cfg.bht_entries)
        self.btb = Btb(cfg.btb_entries)
        self.mem_arb = RoundRobinArbiter(3)
        self.wbuf = WriteBuffer(cfg.wbuf_capacity)
        self.mh = MissHandler()

        self.cycle = np.zeros(1, dtype=np.int64)
        self.occupancy = np.zeros(1, dtype=np.int64)
        self.pad_ctrl = np.zeros(2, dtype=np.int64)
        self.saved_pc = np.zeros(1, dtype=np.int64)
        self.int_regfile_token = np.zeros(1, dtype=np.int64)
        self.fp_regfile_token = np.zeros(1, dtype=np.int64)
        self.csr_file = np.zeros(1, dtype=np.int64)
        self.current_domain = Domain.SPY

        self.cfg_arr = self._build_cfg_array()
        self._fast = (
            self.l1d.valid, self.l1d.dirty, self.l1d.tag, self.l1d.domain,
            self.l1d.lfsr.state,
            self.l1i.valid, self.l1i.dirty, self.l1i.tag, self.l1i.domain,
            self.l1i.lfsr.state,
            self.dtlb.valid, self.dtlb.vpn, self.dtlb.domain, self.dtlb.plru.bits,
            self.itlb.valid, self.itlb.vpn, self.itlb.domain, self.itlb.plru.bits,
            self.bht.counters, self.btb.valid, self.btb.tag, self.btb.target,
            self.mem_arb.ptr, self.wbuf.addrs, self.wbuf.meta,
            self.wbuf.lookup_arb.ptr, self.wbuf.drain_arb.ptr,
            self.mh.slots, self.cycle, self.occupancy,
        )

        self.state = MicroState()
        reg = self.state.register
        reg("cycle", self.cycle, ARCH)
        reg("pad_ctrl", self.pad_ctrl, ARCH)
        reg("saved_pc", self.saved_pc, ARCH)
        reg("int_regfile_token", self.int_regfile_token, ARCH)
        reg("fp_regfile_token", self.fp_regfile_token, ARCH)
        reg("csr_file", self.csr_file, ARCH)
        for prefix, cache in (("l1d", self.l1d), ("l1i", self.l1i)):
            reg(f"{prefix}.valid", cache.valid, UARCH)
            reg(f"{prefix}.dirty", cache.dirty, UARCH)
            reg(f"{prefix}.tag", cache.tag, UARCH)
            reg(f"{prefix}.domain", cache.domain, UARCH)
            reg(f"{prefix}.lfsr", cache.lfsr.state, UARCH)
        for prefix, tlb in (("dtlb", self.dtlb), ("itlb", self.itlb)):
            reg(f"{prefix}.valid", tlb.valid, UARCH)
            reg(f"{prefix}.vpn", tlb.vpn, UARCH)
            reg(f"{prefix}.domain", tlb.domain, UARCH)
            reg(f"{prefix}.plru", tlb.plru.bits, UARCH)
        reg("bht", self.bht.counters, UARCH)
        reg("btb.valid", self.btb.valid, UARCH)
        reg("btb.tag", self.btb.tag, UARCH)
        reg("btb.target", self.btb.target, UARCH)
        reg("mem_arb", self.mem_arb.ptr, UARCH)
        reg("wbuf.addrs", self.wbuf.addrs, UARCH)
        reg("wbuf.meta", self.wbuf.meta, UARCH)
        reg("wbuf.lookup_ptr", self.wbuf.lookup_arb.ptr, UARCH)
        reg("wbuf.drain_ptr", self.wbuf.drain_arb.ptr, UARCH)
        reg("mh", self.mh.slots, UARCH)
        reg("occupancy", self.occupancy, UARCH)
        self.state.freeze_reset_image()

        self._build_kernel_ws()

    def _build_cfg_array(self) -> np.ndarray:
        cfg = self.config
        lat = cfg.latencies
        arr = np.zeros(fp.N_CFG, dtype=np.int64)
        arr[fp.CFG_D_SETS] = cfg.l1d.sets
        arr[fp.CFG_D_WAYS] = cfg.l1d.ways
        arr[fp.CFG_D_LINE_SHIFT] = cfg.l1d.line_bytes.bit_length() - 1
        arr[fp.CFG_D_WT] = 1 if self.write_through else 0
        arr[fp.CFG_I_SETS] = cfg.l1i.sets
        arr[fp.CFG_I_WAYS] = cfg.l1i.ways
        arr[fp.CFG_I_LINE_SHIFT] = cfg.l1i.line_bytes.bit_length() - 1
        arr[fp.CFG_T_HIT] = lat.t_hit
        arr[fp.CFG_T_MISS] = lat.t_miss
        arr[fp.CFG_T_WB] = lat.t_wb_per_line
        arr[fp.CFG_T_MISPREDICT] = lat.t_mispredict
        arr[fp.CFG_T_TLB_MISS] = lat.t_tlb_miss
        arr[fp.CFG_TRACE] = 1 if self.trace_enabled else 0
        arr[fp.CFG_PINNED] = 0
        arr[fp.CFG_TLB_ENTRIES] = cfg.tlb_entries
        arr[fp.CFG_BHT_ENTRIES] = cfg.bht_entries
        arr[fp.CFG_BTB_ENTRIES] = cfg.btb_entries
        arr[fp.CFG_WBUF_CAP] = cfg.wbuf_capacity
        arr[fp.CFG_PAGE_SHIFT] = cfg.page_shift
        arr[fp.CFG_PIPE_DEPTH] = cfg.pipe_depth
        return arr

    def _build_kernel_ws(self) -> None:
        base_d = data_base(Domain.KERNEL)
        base_i = code_base(Domain.KERNEL)
        d_addrs = base_d + np.arange(KERNEL_D_LINES, dtype=np.int64) * KERNEL_D_STRIDE
        i_addrs = base_i + np.arange(KERNEL_I_LINES, dtype=np.int64) * self.l1i.line_bytes
        self._kd_sets = (d_addrs >> self.l1d.line_shift) & (self.l1d.sets - 1)
        self._kd_tags = (d_addrs >> self.l1d.line_shift) // self.l1d.sets
        self._ki_sets = (i_addrs >> self.l1i.line_shift) & (self.l1i.sets - 1)
        self._ki_tags = (i_addrs >> self.l1i.line_shift) // self.l1i.sets
        # Scatter stores need one line per set; small caches fold sets together.
        self._kernel_ws_unique = (
            len(np.unique(self._kd_sets)) == KERNEL_D_LINES
            and len(np.unique(self._ki_sets)) == KERNEL_I_LINES
        )

    # ------------------------------------------------------------------
    # workload execution

    def set_pinned(self, flag: bool) -> None:
        self.cfg_arr[fp.CFG_PINNED] = 1 if flag else 0

    @property
    def pinned(self) -> bool:
        return bool(self.cfg_arr[fp.CFG_PINNED])

    def exec_op(self, op: WorkloadOp) -> int:
        """Reference route. Must stay in lockstep with fastpath.run_ops."""
        if domain_of(op.a) != int(self.current_domain):
            raise DomainViolationError(
                f"op at {op.a:#x} executed under domain {self.current_domain.name}")
        lat = self.config.latencies
        pinned = self.pinned
        domain = int(self.current_domain)
        cost = 1
        if op.kind in (OpKind.READ, OpKind.WRITE):
            is_write = op.kind == OpKind.WRITE
            vpn = op.a >> self.config.page_shift
            if not self.dtlb.access(vpn, domain):
                cost += lat.t_tlb_miss
                cost += self.mem_arb.grant(2, pinned)
            cost += self.mem_arb.grant(1 if is_write else 0, pinned)
            res = self.l1d.access(op.a, is_write, domain, pinned)
            if res.hit:
                cost += lat.t_hit
                if is_write and self.write_through:
                    cost += self.wbuf.push(op.a, pinned)
            else:
                now = int(self.cycle[0])
                cost += lat.t_miss
                s = self.l1d.set_index(op.a)
                cost += self.mh.check_replay(s, now, lat.t_miss)
                if self.trace_enabled:
                    self.mh.record(s, now)
                if res.victim_dirty_writeback:
                    cost += lat.t_wb_per_line
                if self.write_through:
                    cost += self.wbuf.snoop(pinned)
                    cost += self.wbuf.refill_grant(pinned)
                    if is_write:
                        cost += self.wbuf.push(op.a, pinned)
        elif op.kind == OpKind.FETCH_AT:
            vpn = op.a >> self.config.page_shift
            if not self.itlb.access(vpn, domain):
                cost += lat.t_tlb_miss
            res = self.l1i.access(op.a, False, domain, pinned)
            cost += lat.t_hit if res.hit else lat.t_miss
        elif op.kind == OpKind.COND_BRANCH:
            if self.bht.access(op.a, op.b != 0):
                cost += lat.t_mispredict
        elif op.kind == OpKind.INDIRECT_JUMP:
            if self.btb.access(op.a, op.b):
                cost += lat.t_mispredict
        else:
            raise ValueError(f"unknown op kind {op.kind!r}")
        if self.occupancy[0] < self.config.pipe_depth:
            self.occupancy[0] += 1
        self.cycle[0] += cost
        return cost

    def run_sequence(self, ops: list[WorkloadOp]) -> int:
        return sum(self.exec_op(op) for op in ops)

    def run_encoded(self, enc: Encoded, budget: int = 0) -> int:
        kinds, aa, bb = enc
        return int(fp.run_ops(kinds, aa, bb, self.cfg_arr, *self._fast,
                              np.int64(int(self.current_domain)),
                              np.int64(budget)))

    def run_slice(self, enc: Encoded, filler: Encoded, budget: int) -> int:
        """Run ``enc`` inside a fixed time slice, spinning on ``filler`` until
        the budget expires. Work past the boundary is cut off by the slice."""
        if budget <= 0:
            return self.run_encoded(enc)
        start = int(self.cycle[0])
        spent = self.run_encoded(enc, budget=budget)
        while spent < budget:
            spent += self.run_encoded(filler, budget=budget - spent)
        self.cycle[0] = start + budget
        return budget

    # ------------------------------------------------------------------
    # context switches

    def set_pad(self, cycles: int) -> None:
        if cycles < 0:
            raise ValueError(f"pad must be >= 0, got {cycles}")
        self.pad_ctrl[0] = 1 if cycles > 0 else 0
        self.pad_ctrl[1] = cycles

    def pad_until(self, target: int) -> int:
        now = int(self.cycle[0])
        if now > target:
            raise PadExceededError(now - target)
        self.cycle[0] = target
        return target - now

    def context_switch(self, variant: FenceVariant, next_domain: Domain,
                       select_mask: int = MASK_ALL,
                       sw_ops: Encoded | None = None) -> CsReport:
        """Timer-interrupt path: kernel routine, then the fence, then padding.

        The kernel routine walks its fixed working set silently; its cost is
        the base constants plus a miss fill for every kernel line the
        outgoing domain displaced, plus a writeback for every dirty victim.
        """
        lat = self.config.latencies
        kc = self.config.kernel
        start = int(self.cycle[0])

        self.saved_pc[0] += 1
        self.int_regfile_token[0] += 1
        self.fp_regfile_token[0] += 1
        self.csr_file[0] += 1

        self.cycle[0] += kc.base_total
        ws_cost, kernel_wb, _absent = self._touch_kernel_ws()
        kernel_cycles = kc.base_total + ws_cost

        fence_cycles, drained, breakdown = self.apply_fence(
            variant, select_mask, sw_ops)

        padded = False
        stall = 0
        if self.pad_ctrl[0]:
            stall = self.pad_until(start + int(self.pad_ctrl[1]))
            padded = True

        self.current_domain = next_domain
        return CsReport(
            total_cycles=int(self.cycle[0]) - start,
            kernel_cycles=kernel_cycles,
            fence_cycles=fence_cycles,
            writebacks=drained + kernel_wb,
            padded=padded,
            pad_stall=stall,
            breakdown=breakdown,
        )

    def apply_fence(self, variant: FenceVariant, select_mask: int = MASK_ALL,
                    sw_ops: Encoded | None = None) -> tuple[int, int, dict[str, int]]:
        """Returns (fence_cycles, writebacks, per-step breakdown) and advances
        the clock. Architectural fields are never touched here."""
        lat = self.config.latencies
        breakdown = {"save_pc": 0, "save_dirty": 0, "drain": 0, "clear": 0,
                     "assert": 0, "resume": 0}
        if variant == FenceVariant.NONE:
            return 0, 0, breakdown

        if variant == FenceVariant.SW_PRIME:
            cost = 0
            if sw_ops is not None:
                prev = self.current_domain
                self.current_domain = Domain.KERNEL
                try:
                    cost = self.run_encoded(sw_ops)
                finally:
                    self.current_domain = prev
            breakdown["drain"] = cost
            return cost, 0, breakdown

        if select_mask & ~MASK_ALL:
            raise InvalidMaskError(f"select mask {select_mask:#x} has unknown bits")

        if variant == FenceVariant.MICRORESET:
            drained = self.l1d.dirty_count()
            cost = (drained * lat.t_wb_per_line + lat.t_fence_drain
                    + lat.t_microreset_assert)
            self.cycle[0] += cost
            self.state.reset_non_architectural()
            breakdown["save_dirty"] = drained * lat.t_wb_per_line
            breakdown["drain"] = lat.t_fence_drain
            breakdown["assert"] = lat.t_microreset_assert
            return cost, drained, breakdown

        # basic_flush / full_flush
        full = variant == FenceVariant.FULL_FLUSH
        drained = 0
        if select_mask & MASK_L1D:
            drained = self.l1d.writeback_all()
        if select_mask & MASK_L1I:
            self.l1i.writeback_all()
        if select_mask & MASK_TLBS:
            self.dtlb.invalidate()
            self.itlb.invalidate()
        if select_mask & MASK_PREDICTORS:
            self.bht.clear()
            self.btb.clear()
        if full:
            if select_mask & MASK_L1D:
                self.l1d.lfsr.reset()
            if select_mask & MASK_L1I:
                self.l1i.lfsr.reset()
            if select_mask & MASK_TLBS:
                self.dtlb.plru.bits[:] = 0
                self.itlb.plru.bits[:] = 0
            if select_mask & MASK_SECONDARY:
                self.mem_arb.ptr[0] = 0
                self.wbuf.lookup_arb.ptr[0] = 0
                self.wbuf.drain_arb.ptr[0] = 0
        self.wbuf.drain()
        self.occupancy[0] = 0
        cost = lat.t_pipeline_flush + drained * lat.t_wb_per_line
        self.cycle[0] += cost
        # The flush discards an in-flight refill; the handler re-issues it
        # after the fence, and the first later miss to that set collides
        # with the replay if it lands inside the replay window.
        if full and not self.trace_enabled:
            self.mh.clear()
        elif select_mask & MASK_L1D:
            self.mh.arm(int(self.cycle[0]) + lat.t_replay)
        breakdown["save_dirty"] = drained * lat.t_wb_per_line
        breakdown["clear"] = lat.t_pipeline_flush
        return cost, drained, breakdown

    def _touch_kernel_ws(self) -> tuple[int, int, int]:
        """Walk the kernel working set without touching replacement state.

        The routine is invariant: its cost depends only on which kernel lines
        are present and whether their victims are dirty. Misses install clean
        kernel lines into the first invalid way, else way 0.
        """
        lat = self.config.latencies
        if not self._kernel_ws_unique:
            return self._touch_kernel_ws_slow()
        wb = 0
        absent = 0
        kern = int(Domain.KERNEL)
        for cache, sets_idx, tags in (
            (self.l1d, self._kd_sets, self._kd_tags),
            (self.l1i, self._ki_sets, self._ki_tags),
        ):
            present = ((cache.valid[sets_idx] == 1)
                       & (cache.tag[sets_idx] == tags[:, None])
                       & (cache.domain[sets_idx] == kern)).any(axis=1)
            miss = ~present
            n_miss = int(miss.sum())
            if n_miss:
                ms = sets_idx[miss]
                inv = cache.valid[ms] == 0
                vict = np.where(inv.any(axis=1), inv.argmax(axis=1), 0)
                vd = (cache.valid[ms, vict] == 1) & (cache.dirty[ms, vict] == 1)
                wb += int(vd.sum())
                cache.valid[ms, vict] = 1
                cache.dirty[ms, vict] = 0
                cache.tag[ms, vict] = tags[miss]
                cache.domain[ms, vict] = kern
            absent += n_miss
        cost = lat.t_miss * absent + lat.t_wb_per_line * wb
        self.cycle[0] += cost
        return cost, wb, absent

    def _touch_kernel_ws_slow(self) -> tuple[int, int, int]:
        lat = self.config.latencies
        wb = 0
        absent = 0
        kern = int(Domain.KERNEL)
        for cache, sets_idx, tags in (
            (self.l1d, self._kd_sets, self._kd_tags),
            (self.l1i, self._ki_sets, self._ki_tags),
        ):
            for s, tag in zip(sets_idx, tags):
                row_valid = cache.valid[s]
                hit = False
                for w in range(cache.ways):
                    if (row_valid[w] == 1 and cache.tag[s, w] == tag
                            and cache.domain[s, w] == kern):
                        hit = True
                        break
                if hit:
                    continue
                absent += 1
                vict = 0
                for w in range(cache.ways):
                    if row_valid[w] == 0:
                        vict = w
                        break
                if cache.valid[s, vict] == 1 and cache.dirty[s, vict] == 1:
                    wb += 1
                cache.valid[s, vict] = 1
                cache.dirty[s, vict] = 0
                cache.tag[s, vict] = tag
                cache.domain[s, vict] = kern
        cost = lat.t_miss * absent + lat.t_wb_per_line * wb
        self.cycle[0] += cost
        return cost, wb, absent

    # ------------------------------------------------------------------
    # introspection

    def reset_non_architectural(self) -> None:
        self.state.reset_non_architectural()

    def state_digest(self, subset: str = "all") -> str:
        return self.state.digest(subset)


def worst_case_total(config: MicroArchConfig, variant: FenceVariant,
                     select_mask: int = MASK_ALL,
                     sw_ops: Encoded | None = None) -> int:
    """Switch cost with every line occupied by foreign (dirty where possible)
    data, the kernel working set fully absent, and a miss left in flight."""
    m = Machine(config)
    dirty = 1 if config.write_policy == WRITE_BACK else 0
    for cache in (m.l1d, m.l1i):
        cache.valid[:] = 1
        cache.dirty[:] = dirty if cache is m.l1d else 0
        cache.tag[:] = -1
        cache.domain[:] = int(Domain.TROJAN)
    m.mh.record(0, 0)
    report = m.context_switch(variant, Domain.SPY, select_mask, sw_ops)
    return report.total_cycles


PAD_QUANTUM = 100


def measure_worst_case_pad(config: MicroArchConfig, variant: FenceVariant,
                           select_mask: int = MASK_ALL,
                           sw_ops: Encoded | None = None) -> int:
    raw = worst_case_total(config, variant, select_mask, sw_ops)
    return -(-raw // PAD_QUANTUM) * PAD_QUANTUM
