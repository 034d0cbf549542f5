"""Bit-exact models of the timing-relevant hardware components.

Every component keeps its mutable state in plain ``int64`` numpy arrays so
that the pure-Python reference path and the compiled fast path can drive the
same memory, and so that state digests and resets reduce to uniform array
operations.
"""

from __future__ import annotations

from dataclasses import dataclass

import hashlib

import numpy as np

LFSR_TAPS = 0xB8  # Fibonacci taps {8, 6, 5, 4}: x^8 + x^6 + x^5 + x^4 + 1
LFSR_SEED = 0x01

WRITE_THROUGH = "write_through"
WRITE_BACK = "write_back"


def lfsr_step(state: int) -> int:
    """Advance one shift-left Fibonacci LFSR step and return the new state."""
    feedback = (state & LFSR_TAPS).bit_count() & 1
    return ((state << 1) | feedback) & 0xFF


class Lfsr8:
    """8-bit maximal-length LFSR used for cache victim selection.

    The state is never zero; construction rejects a zero seed and the maximal
    taps keep every reachable state nonzero.
    """

    def __init__(self, seed: int = LFSR_SEED) -> None:
        if not 0 < seed < 256:
            raise ValueError(f"LFSR seed must be a nonzero byte, got {seed}")
        self.seed = seed
        self.state = np.array([seed], dtype=np.int64)

    def step(self) -> int:
        """Advance one step; returns the new state."""
        nxt = lfsr_step(int(self.state[0]))
        self.state[0] = nxt
        return nxt

    def peek(self) -> int:
        return int(self.state[0])

    def reset(self) -> None:
        self.state[0] = self.seed


def plru_victim(bits: np.ndarray, ways: int) -> int:
    node = 0
    while node < ways - 1:
        node = 2 * node + 1 + int(bits[node])
    return node - (ways - 1)


def plru_touch(bits: np.ndarray, ways: int, way: int) -> None:
    node = 0
    lo, hi = 0, ways
    while node < ways - 1:
        mid = (lo + hi) // 2
        if way < mid:
            bits[node] = 1
            node = 2 * node + 1
            hi = mid
        else:
            bits[node] = 0
            node = 2 * node + 2
            lo = mid


class PlruTree:
    """Tree-PLRU over a power-of-two way count.

    Bit convention: node value 0 sends the victim walk to the left subtree;
    touching a way flips every node on its path to point away from it.
    """

    def __init__(self, ways: int) -> None:
        if ways < 2 or ways & (ways - 1):
            raise ValueError(f"ways must be a power of two >= 2, got {ways}")
        self.ways = ways
        self.bits = np.zeros(ways - 1, dtype=np.int64)

    def victim(self) -> int:
        return plru_victim(self.bits, self.ways)

    def touch(self, way: int) -> None:
        if not 0 <= way < self.ways:
            raise ValueError(f"way {way} out of range for {self.ways} ways")
        plru_touch(self.bits, self.ways, way)


@dataclass(frozen=True)
class AccessResult:
    hit: bool
    victim_dirty_writeback: bool = False
    evicted: tuple[int, int] | None = None


class SetAssocCache:
    """Set-associative cache holding tags and metadata only.

    Victim choice on a miss prefers the first invalid way; otherwise the low
    bits of the replacement LFSR pick the way. The LFSR advances on every
    miss, including invalid-way fills, so its phase encodes miss history.
    In pinned mode the LFSR is read without advancing and keeps that phase
    fixed for differential measurements.
    """

    def __init__(self, sets: int, ways: int, line_bytes: int, policy: str,
                 lfsr: Lfsr8 | None = None) -> None:
        for name, v in (("sets", sets), ("ways", ways), ("line_bytes", line_bytes)):
            if v < 1 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two, got {v}")
        if policy not in (WRITE_THROUGH, WRITE_BACK):
            raise ValueError(f"unknown write policy {policy!r}")
        self.sets = sets
        self.ways = ways
        self.line_bytes = line_bytes
        self.line_shift = line_bytes.bit_length() - 1
        self.policy = policy
        self.lfsr = lfsr if lfsr is not None else Lfsr8()
        shape = (sets, ways)
        self.valid = np.zeros(shape, dtype=np.int64)
        self.dirty = np.zeros(shape, dtype=np.int64)
        self.tag = np.zeros(shape, dtype=np.int64)
        self.domain = np.zeros(shape, dtype=np.int64)

    def set_index(self, addr: int) -> int:
        return (addr >> self.line_shift) & (self.sets - 1)

    def tag_of(self, addr: int) -> int:
        return (addr >> self.line_shift) // self.sets

    def access(self, addr: int, is_write: bool, domain: int,
               pinned: bool = False) -> AccessResult:
        s = self.set_index(addr)
        tag = self.tag_of(addr)
        write_back = self.policy == WRITE_BACK
        for w in range(self.ways):
            if self.valid[s, w] and self.tag[s, w] == tag:
                if is_write and write_back:
                    self.dirty[s, w] = 1
                return AccessResult(hit=True)
        victim = -1
        for w in range(self.ways):
            if not self.valid[s, w]:
                victim = w
                break
        if pinned:
            if victim < 0:
                victim = self.lfsr.peek() & (self.ways - 1)
        else:
            chosen = self.lfsr.step() & (self.ways - 1)
            if victim < 0:
                victim = chosen
        was_valid = bool(self.valid[s, victim])
        dirty_wb = was_valid and bool(self.dirty[s, victim])
        self.valid[s, victim] = 1
        self.dirty[s, victim] = 1 if (is_write and write_back) else 0
        self.tag[s, victim] = tag
        self.domain[s, victim] = domain
        return AccessResult(hit=False, victim_dirty_writeback=dirty_wb,
                            evicted=(s, victim) if was_valid else None)

    def writeback_all(self) -> int:
        """Invalidate everything; returns how many dirty lines were flushed."""
        count = int((self.valid & self.dirty).sum())
        self.valid[:] = 0
        self.dirty[:] = 0
        self.tag[:] = 0
        self.domain[:] = 0
        return count

    def dirty_count(self) -> int:
        return int((self.valid & self.dirty).sum())


class Tlb:
    """Fully associative translation buffer with tree-PLRU replacement."""

    def __init__(self, entries: int = 16) -> None:
        self.entries = entries
        self.valid = np.zeros(entries, dtype=np.int64)
        self.vpn = np.zeros(entries, dtype=np.int64)
        self.domain = np.zeros(entries, dtype=np.int64)
        self.plru = PlruTree(entries)

    def access(self, vpn: int, domain: int) -> bool:
        for slot in range(self.entries):
            if self.valid[slot] and self.vpn[slot] == vpn and self.domain[slot] == domain:
                self.plru.touch(slot)
                return True
        slot = -1
        for i in range(self.entries):
            if not self.valid[i]:
                slot = i
                break
        if slot < 0:
            slot = self.plru.victim()
        self.valid[slot] = 1
        self.vpn[slot] = vpn
        self.domain[slot] = domain
        self.plru.touch(slot)
        return False

    def invalidate(self) -> None:
        self.valid[:] = 0
        self.vpn[:] = 0
        self.domain[:] = 0


BHT_INIT = 1  # weakly not-taken


class Bht:
    """Branch history table of 2-bit saturating counters."""

    def __init__(self, entries: int = 64) -> None:
        self.entries = entries
        self.counters = np.full(entries, BHT_INIT, dtype=np.int64)

    def index_of(self, pc: int) -> int:
        return (pc >> 2) & (self.entries - 1)

    def access(self, pc: int, taken: bool) -> bool:
        idx = self.index_of(pc)
        c = int(self.counters[idx])
        mispredict = (c >= 2) != taken
        if taken:
            self.counters[idx] = min(c + 1, 3)
        else:
            self.counters[idx] = max(c - 1, 0)
        return mispredict

    def clear(self) -> None:
        self.counters[:] = BHT_INIT


class Btb:
    """Direct-mapped branch target buffer, indexed by pc modulo entry count."""

    def __init__(self, entries: int = 16) -> None:
        self.entries = entries
        self.valid = np.zeros(entries, dtype=np.int64)
        self.tag = np.zeros(entries, dtype=np.int64)
        self.target = np.zeros(entries, dtype=np.int64)

    def access(self, pc: int, target: int) -> bool:
        slot = pc % self.entries
        mispredict = not (self.valid[slot] and self.tag[slot] == pc
                          and self.target[slot] == target)
        self.valid[slot] = 1
        self.tag[slot] = pc
        self.target[slot] = target
        return mispredict

    def clear(self) -> None:
        self.valid[:] = 0
        self.tag[:] = 0
        self.target[:] = 0


class RoundRobinArbiter:
    """Round-robin grant: delay is the positional distance from the pointer,
    and the pointer advances past the granted unit. Pinned grants cost nothing
    and leave the pointer alone."""

    def __init__(self, n_requestors: int) -> None:
        self.n = n_requestors
        self.ptr = np.zeros(1, dtype=np.int64)

    def grant(self, unit: int, pinned: bool = False) -> int:
        if not 0 <= unit < self.n:
            raise ValueError(f"unit {unit} out of range for {self.n} requestors")
        if pinned:
            return 0
        delay = (unit - int(self.ptr[0])) % self.n
        self.ptr[0] = (unit + 1) % self.n
        return delay


class WriteBuffer:
    """Store buffer with a lookup arbiter (issue vs. miss snoop) and a drain
    arbiter (forced drain vs. miss refill). Only the write-through data cache
    routes traffic through it."""

    HEAD, COUNT = 0, 1

    def __init__(self, capacity: int = 8) -> None:
        self.capacity = capacity
        self.addrs = np.zeros(capacity, dtype=np.int64)
        self.meta = np.zeros(2, dtype=np.int64)
        self.lookup_arb = RoundRobinArbiter(2)
        self.drain_arb = RoundRobinArbiter(2)

    def push(self, addr: int, pinned: bool = False) -> int:
        c = self.lookup_arb.grant(0, pinned)
        head, count = int(self.meta[0]), int(self.meta[1])
        if count == self.capacity:
            c += self.drain_arb.grant(0, pinned)
            self.addrs[head] = 0
            head = (head + 1) % self.capacity
            count -= 1
        self.addrs[(head + count) % self.capacity] = addr
        self.meta[0] = head
        self.meta[1] = count + 1
        return c

    def snoop(self, pinned: bool = False) -> int:
        return self.lookup_arb.grant(1, pinned)

    def refill_grant(self, pinned: bool = False) -> int:
        return self.drain_arb.grant(1, pinned)

    def drain(self) -> None:
        self.addrs[:] = 0
        self.meta[:] = 0


class MissHandler:
    """Data-cache miss handler trace.

    ``slots`` layout: in-flight flag, in-flight set, issue cycle, replay armed
    flag, replay set, replay deadline. When tracing is enabled every data miss
    overwrites the in-flight record; a flush that leaves the record behind
    re-issues the refill, and the first subsequent miss to the recorded set
    before the deadline pays for the colliding replay.
    """

    IN_FLIGHT, SET, ISSUE, ARMED, REPLAY_SET, DEADLINE = range(6)

    def __init__(self) -> None:
        self.slots = np.zeros(6, dtype=np.int64)

    def record(self, set_index: int, cycle: int) -> None:
        self.slots[self.IN_FLIGHT] = 1
        self.slots[self.SET] = set_index
        self.slots[self.ISSUE] = cycle

    def arm(self, deadline: int) -> bool:
        if not self.slots[self.IN_FLIGHT]:
            return False
        self.slots[self.ARMED] = 1
        self.slots[self.REPLAY_SET] = self.slots[self.SET]
        self.slots[self.DEADLINE] = deadline
        self.slots[self.IN_FLIGHT] = 0
        self.slots[self.SET] = 0
        self.slots[self.ISSUE] = 0
        return True

    def check_replay(self, set_index: int, cycle: int, t_miss: int) -> int:
        if self.slots[self.ARMED] and self.slots[self.REPLAY_SET] == set_index:
            self.slots[self.ARMED] = 0
            self.slots[self.REPLAY_SET] = 0
            deadline = int(self.slots[self.DEADLINE])
            self.slots[self.DEADLINE] = 0
            if cycle < deadline:
                return t_miss
        return 0

    def clear(self) -> None:
        self.slots[:] = 0


def digest_fields(fields: list[tuple[str, np.ndarray]]) -> str:
    """Hash a canonical serialization of (name, array) pairs in order."""
    h = hashlib.blake2b(digest_size=16)
    for name, arr in fields:
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(repr(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
