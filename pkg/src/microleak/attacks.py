"""Workload generators for each channel and the attack iteration drivers.

All generators emit unit-ascending op lists, so the encoded array for the
largest secret doubles as a lookup table: the first ``unit_stride * s`` ops
are exactly the Trojan workload for secret ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .machine import (
    DIRTY_OFFSET,
    SW_PRIME_OFFSET,
    Domain,
    Encoded,
    FenceVariant,
    MASK_ALL,
    Machine,
    MicroArchConfig,
    WorkloadOp,
    code_base,
    cond_branch,
    data_base,
    encode_ops,
    fetch_at,
    indirect_jump,
    measure_worst_case_pad,
    read,
    worst_case_total,
    write,
)


class AttackKind(Enum):
    L1D = "l1d"
    L1I = "l1i"
    DTLB = "dtlb"
    BTB = "btb"
    BHT = "bht"
    CS_LATENCY = "cs_latency"


PP_KINDS = (AttackKind.L1D, AttackKind.L1I, AttackKind.DTLB,
            AttackKind.BTB, AttackKind.BHT)

SW_PRIMABLE = (AttackKind.L1D, AttackKind.L1I, AttackKind.CS_LATENCY)

# Trojan ops consumed per encoded secret unit.
TROJAN_UNIT = {
    AttackKind.L1D: 1,
    AttackKind.L1I: 1,
    AttackKind.DTLB: 1,
    AttackKind.BTB: 1,
    AttackKind.BHT: 2,
    AttackKind.CS_LATENCY: 9,
}

CS_WRITES_PER_BUCKET = 9
FILLER_OPS = 4096


def secret_space(kind: AttackKind, config: MicroArchConfig) -> int:
    if kind == AttackKind.L1D:
        return config.l1d.sets * config.l1d.ways
    if kind == AttackKind.L1I:
        return config.l1i.sets * config.l1i.ways
    if kind == AttackKind.DTLB:
        return config.tlb_entries
    if kind == AttackKind.BTB:
        return config.btb_entries
    if kind == AttackKind.BHT:
        return config.bht_entries
    return config.l1d.sets


def gen_prime(kind: AttackKind, config: MicroArchConfig) -> list[WorkloadOp]:
    """Spy workload that claims every unit of the targeted component once."""
    base = data_base(Domain.SPY)
    cbase = code_base(Domain.SPY)
    page = 1 << config.page_shift
    if kind == AttackKind.L1D:
        line = config.l1d.line_bytes
        return [read(base + i * line)
                for i in range(config.l1d.sets * config.l1d.ways)]
    if kind == AttackKind.L1I:
        line = config.l1i.line_bytes
        return [fetch_at(cbase + i * line)
                for i in range(config.l1i.sets * config.l1i.ways)]
    if kind == AttackKind.DTLB:
        return [read(base + i * page) for i in range(config.tlb_entries)]
    if kind == AttackKind.BTB:
        return [indirect_jump(cbase + i, cbase + 0x1000 + i)
                for i in range(config.btb_entries)]
    if kind == AttackKind.BHT:
        return [cond_branch(cbase + 4 * i, True)
                for i in range(config.bht_entries)]
    return []


def gen_trojan(kind: AttackKind, config: MicroArchConfig,
               secret: int) -> list[WorkloadOp]:
    """Trojan workload perturbing exactly ``secret`` units in its own region."""
    space = secret_space(kind, config)
    if not 0 <= secret < space:
        raise ValueError(f"secret {secret} outside [0, {space})")
    base = data_base(Domain.TROJAN)
    cbase = code_base(Domain.TROJAN)
    page = 1 << config.page_shift
    if kind == AttackKind.L1D:
        line = config.l1d.line_bytes
        return [read(base + i * line) for i in range(secret)]
    if kind == AttackKind.L1I:
        line = config.l1i.line_bytes
        return [fetch_at(cbase + i * line) for i in range(secret)]
    if kind == AttackKind.DTLB:
        return [read(base + i * page) for i in range(secret)]
    if kind == AttackKind.BTB:
        return [indirect_jump(cbase + i, cbase + 0x2000 + i)
                for i in range(secret)]
    if kind == AttackKind.BHT:
        # Two not-taken rounds pull a saturated counter below the predict
        # threshold, so the spy's next taken branch there mispredicts.
        ops: list[WorkloadOp] = []
        for i in range(secret):
            ops.append(cond_branch(cbase + 4 * i, False))
            ops.append(cond_branch(cbase + 4 * i, False))
        return ops
    dirty = base + DIRTY_OFFSET
    line = config.l1d.line_bytes
    ops = []
    for j in range(secret):
        for r in range(CS_WRITES_PER_BUCKET):
            ops.append(write(dirty + r * page + j * line))
    return ops


def gen_sw_mitigation(kind: AttackKind, config: MicroArchConfig,
                      rounds: int) -> list[WorkloadOp]:
    """Kernel-side priming traversal run at every switch.

    Only the L1 caches can be displaced this way; there is no architected
    means to walk the TLBs or predictors, so those kinds are rejected.
    """
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    if kind not in SW_PRIMABLE:
        raise ValueError(f"software priming cannot reach {kind.value}")
    if kind == AttackKind.L1I:
        cbase = code_base(Domain.KERNEL) + SW_PRIME_OFFSET
        line = config.l1i.line_bytes
        count = config.l1i.sets * config.l1i.ways
        return [fetch_at(cbase + i * line)
                for _ in range(rounds) for i in range(count)]
    base = data_base(Domain.KERNEL) + SW_PRIME_OFFSET
    line = config.l1d.line_bytes
    count = config.l1d.sets * config.l1d.ways
    return [read(base + i * line)
            for _ in range(rounds) for i in range(count)]


def gen_filler(config: MicroArchConfig) -> list[WorkloadOp]:
    """Spin block for the Trojan's time slice: indirect jumps that alternate
    targets, so every op costs 1 + t_mispredict and touches no memory."""
    pc = code_base(Domain.TROJAN) + 0x8000
    t0 = pc + 0x100
    t1 = pc + 0x200
    return [indirect_jump(pc, t0 if i & 1 == 0 else t1)
            for i in range(FILLER_OPS)]


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind
    mitigation: FenceVariant = FenceVariant.MICRORESET
    pad: int | None = None  # None resolves to the measured worst case
    sw_rounds: int = 1
    slice_budget: int = 60000
    select_mask: int = MASK_ALL


class AttackDriver:
    """Precomputed encodings for one (spec, config) pair.

    Holds no machine state; one driver can serve any number of machines,
    including concurrently (the encoded arrays are only ever read).
    """

    def __init__(self, spec: AttackSpec, config: MicroArchConfig) -> None:
        self.spec = spec
        self.config = config
        self.space = secret_space(spec.kind, config)
        self.unit = TROJAN_UNIT[spec.kind]
        self.prime = encode_ops(gen_prime(spec.kind, config))
        self.trojan = encode_ops(gen_trojan(spec.kind, config, self.space - 1))
        self.filler = encode_ops(gen_filler(config))
        self.sw_ops: Encoded | None = None
        if spec.mitigation == FenceVariant.SW_PRIME:
            self.sw_ops = encode_ops(
                gen_sw_mitigation(spec.kind, config, spec.sw_rounds))
        if spec.pad is None:
            self.pad = measure_worst_case_pad(config, spec.mitigation,
                                              spec.select_mask, self.sw_ops)
        else:
            self.pad = spec.pad

    def worst_case_raw(self) -> int:
        return worst_case_total(self.config, self.spec.mitigation,
                                self.spec.select_mask, self.sw_ops)

    def new_machine(self) -> Machine:
        m = Machine(self.config)
        m.set_pad(self.pad)
        return m

    def trojan_slice(self, secret: int) -> Encoded:
        if not 0 <= secret < self.space:
            raise ValueError(f"secret {secret} outside [0, {self.space})")
        k = self.unit * secret
        kinds, aa, bb = self.trojan
        return kinds[:k], aa[:k], bb[:k]

    def run_iteration(self, machine: Machine, secret: int) -> int:
        if self.spec.kind == AttackKind.CS_LATENCY:
            return run_cs_iteration(machine, self, secret)
        return run_pp_iteration(machine, self, secret)


def run_pp_iteration(machine: Machine, driver: AttackDriver,
                     secret: int) -> int:
    """Prime, switch to the Trojan, encode, switch back, probe.

    Returns the probe's total cycles. Machine state persists across calls,
    as it would across scheduler rounds on hardware.
    """
    spec = driver.spec
    machine.run_encoded(driver.prime)
    machine.context_switch(spec.mitigation, Domain.TROJAN,
                           spec.select_mask, driver.sw_ops)
    machine.run_encoded(driver.trojan_slice(secret))
    machine.context_switch(spec.mitigation, Domain.SPY,
                           spec.select_mask, driver.sw_ops)
    return machine.run_encoded(driver.prime)


def run_cs_iteration(machine: Machine, driver: AttackDriver,
                     secret: int) -> int:
    """Spy measures the full span it was scheduled out: switch to the
    Trojan, the Trojan's fixed-duration slice, and the switch back."""
    spec = driver.spec
    start = int(machine.cycle[0])
    machine.context_switch(spec.mitigation, Domain.TROJAN,
                           spec.select_mask, driver.sw_ops)
    machine.run_slice(driver.trojan_slice(secret), driver.filler,
                      spec.slice_budget)
    machine.context_switch(spec.mitigation, Domain.SPY,
                           spec.select_mask, driver.sw_ops)
    return int(machine.cycle[0]) - start


@lru_cache(maxsize=32)
def get_driver(spec: AttackSpec, config: MicroArchConfig) -> AttackDriver:
    return AttackDriver(spec, config)
