"""Component-level checks driven by independent replay oracles.

Each oracle below re-derives the expected behavior from first principles
(explicit tap positions, an explicit binary tree) rather than calling back
into the package, so a shared bug cannot hide.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microleak.uarch import (
    BHT_INIT,
    Bht,
    Btb,
    Lfsr8,
    MissHandler,
    PlruTree,
    RoundRobinArbiter,
    SetAssocCache,
    Tlb,
    WRITE_BACK,
    WRITE_THROUGH,
    WriteBuffer,
    digest_fields,
    lfsr_step,
)


# ---------------------------------------------------------------- oracles

def lfsr_oracle(state: int) -> int:
    # Fibonacci x^8 + x^6 + x^5 + x^4 + 1: feedback = xor of bits 7, 5, 4, 3
    # of the current state (0-indexed from the LSB).
    fb = 0
    for bit in (7, 5, 4, 3):
        fb ^= (state >> bit) & 1
    return ((state << 1) & 0xFF) | fb


class PlruOracle:
    """Explicit binary tree: node 0 is the root, children of k are 2k+1/2k+2,
    leaves are the ways in order. A 0 bit walks left."""

    def __init__(self, ways: int) -> None:
        self.ways = ways
        self.bits = [0] * (ways - 1)

    def victim(self) -> int:
        node = 0
        while node < self.ways - 1:
            node = 2 * node + 1 + self.bits[node]
        return node - (self.ways - 1)

    def touch(self, way: int) -> None:
        # Walk from the leaf up, pointing each ancestor at the other child.
        node = way + self.ways - 1
        while node:
            parent = (node - 1) // 2
            self.bits[parent] = 1 if node == 2 * parent + 2 else 0
            # flip: bit must point AWAY from the touched child
            self.bits[parent] ^= 1
            node = parent


# ------------------------------------------------------------------ LFSR

FROZEN_FROM_SEED_1 = [0x02, 0x04, 0x08, 0x11, 0x23, 0x47, 0x8E, 0x1C]


def test_lfsr_frozen_sequence():
    lfsr = Lfsr8(0x01)
    assert [lfsr.step() for _ in range(8)] == FROZEN_FROM_SEED_1


def test_lfsr_step_matches_oracle_from_every_state():
    for state in range(1, 256):
        assert lfsr_step(state) == lfsr_oracle(state)


def test_lfsr_is_maximal_for_every_seed():
    # period exactly 255 and no zero state anywhere on the cycle
    for seed in range(1, 256):
        state = seed
        seen = set()
        for _ in range(255):
            state = lfsr_step(state)
            assert state != 0
            seen.add(state)
        assert state == seed
        assert len(seen) == 255


def test_lfsr_rejects_bad_seeds():
    for seed in (0, 256, -1):
        with pytest.raises(ValueError):
            Lfsr8(seed)


def test_lfsr_peek_does_not_advance():
    lfsr = Lfsr8()
    before = lfsr.peek()
    assert lfsr.peek() == before
    lfsr.step()
    assert lfsr.peek() != before
    lfsr.reset()
    assert lfsr.peek() == before


# ------------------------------------------------------------------ PLRU

def test_plru_all_zero_tree_victims_way_zero():
    assert PlruTree(16).victim() == 0


def test_plru_touch_zero_moves_victim_to_other_half():
    tree = PlruTree(16)
    tree.touch(0)
    assert tree.victim() == 8


def test_plru_victim_touch_cycle_is_bit_reversal():
    tree = PlruTree(16)
    order = []
    for _ in range(16):
        v = tree.victim()
        tree.touch(v)
        order.append(v)
    assert order == [0, 8, 4, 12, 2, 10, 6, 14, 1, 9, 5, 13, 3, 11, 7, 15]


@given(ways_log=st.integers(1, 5), touches=st.lists(st.integers(0, 31), max_size=40))
def test_plru_tracks_oracle(ways_log, touches):
    ways = 1 << ways_log
    tree, oracle = PlruTree(ways), PlruOracle(ways)
    for t in touches:
        tree.touch(t % ways)
        oracle.touch(t % ways)
        assert tree.victim() == oracle.victim()


@given(ways_log=st.integers(1, 5), way=st.integers(0, 31))
def test_plru_never_victims_the_way_just_touched(ways_log, way):
    ways = 1 << ways_log
    tree = PlruTree(ways)
    tree.touch(way % ways)
    assert tree.victim() != way % ways


def test_plru_rejects_non_power_of_two():
    for ways in (0, 1, 3, 12):
        with pytest.raises(ValueError):
            PlruTree(ways)


# ----------------------------------------------------------------- cache

def make_cache(sets=4, ways=8, policy=WRITE_THROUGH):
    return SetAssocCache(sets, ways, 16, policy)


def test_cache_fill_then_ninth_evicts_lfsr_way():
    # Oracle first: the LFSR advances once per miss, so after 9 misses the
    # victim way is the 9th state masked to 3 bits.
    state = 0x01
    for _ in range(9):
        state = lfsr_oracle(state)
    expected_way = state & 7

    cache = make_cache()
    for tag in range(8):
        r = cache.access(tag * 4 * 16, False, 0)  # same set, 8 distinct tags
        assert not r.hit
        assert r.evicted is None
    r = cache.access(8 * 4 * 16, False, 0)
    assert not r.hit
    assert r.evicted == (0, expected_way)


def test_cache_lfsr_advances_even_on_invalid_fills():
    cache = make_cache()
    cache.access(0, False, 0)
    assert cache.lfsr.peek() == 0x02  # one miss, one step from the 0x01 seed


def test_cache_hit_does_not_advance_lfsr():
    cache = make_cache()
    cache.access(0, False, 0)
    phase = cache.lfsr.peek()
    assert cache.access(0, False, 0).hit
    assert cache.lfsr.peek() == phase


def test_cache_pinned_miss_reads_lfsr_without_advancing():
    cache = make_cache(sets=1, ways=2)
    cache.access(0 * 16, False, 0)
    cache.access(1 * 16, False, 0)  # set full, phase now 0x04
    phase = cache.lfsr.peek()
    r = cache.access(2 * 16, False, 0, pinned=True)
    assert r.evicted == (0, phase & 1)
    assert cache.lfsr.peek() == phase


def test_cache_write_back_dirties_only_under_write_back():
    wt, wb = make_cache(policy=WRITE_THROUGH), make_cache(policy=WRITE_BACK)
    wt.access(0, True, 0)
    wb.access(0, True, 0)
    assert wt.dirty_count() == 0
    assert wb.dirty_count() == 1
    # dirty victim reports a writeback
    for tag in range(1, 9):
        r = wb.access(tag * 4 * 16, True, 0)
    assert r.victim_dirty_writeback


def test_cache_writeback_all_counts_and_clears():
    wb = make_cache(policy=WRITE_BACK)
    for i in range(5):
        wb.access(i * 16, True, 0)
    assert wb.writeback_all() == 5
    assert wb.dirty_count() == 0
    assert not wb.valid.any()


def test_cache_rejects_bad_geometry_and_policy():
    with pytest.raises(ValueError):
        SetAssocCache(3, 8, 16, WRITE_THROUGH)
    with pytest.raises(ValueError):
        SetAssocCache(4, 8, 16, "write_around")


# ------------------------------------------------------------------- TLB

def test_tlb_seventeenth_vpn_evicts_plru_slot():
    # Oracle first: replay the same touch sequence on the standalone tree.
    oracle = PlruOracle(16)
    for slot in range(16):
        oracle.touch(slot)
    expected_slot = oracle.victim()

    tlb = Tlb(16)
    for vpn in range(16):
        assert not tlb.access(vpn, 0)
    assert not tlb.access(16, 0)
    assert tlb.vpn[expected_slot] == 16
    # exactly one resident vpn was displaced, and it is the oracle's slot
    resident = sorted(int(v) for v in tlb.vpn)
    assert resident == sorted(set(range(17)) - {expected_slot})


def test_tlb_is_domain_tagged():
    tlb = Tlb(16)
    tlb.access(5, 0)
    assert not tlb.access(5, 1)  # same vpn, other domain: miss
    assert tlb.access(5, 0)


def test_tlb_invalidate_forgets_everything():
    tlb = Tlb(4)
    for vpn in range(4):
        tlb.access(vpn, 0)
    tlb.invalidate()
    assert not any(tlb.access(vpn, 0) for vpn in range(4))


# ------------------------------------------------------------ predictors

def test_bht_counter_walk():
    bht = Bht(64)
    pc = 0x40
    # init 1 (weakly not-taken): taken branch mispredicts and bumps to 2
    assert bht.access(pc, True)
    assert bht.counters[bht.index_of(pc)] == 2
    # now predicted taken: taken hits, counter saturates at 3
    assert not bht.access(pc, True)
    assert not bht.access(pc, True)
    assert bht.counters[bht.index_of(pc)] == 3
    # two not-taken: first mispredicts (counter 3 -> 2), second too (2 -> 1)
    assert bht.access(pc, False)
    assert bht.access(pc, False)
    # back below threshold: not-taken now predicted correctly, floor at 0
    assert not bht.access(pc, False)
    assert bht.counters[bht.index_of(pc)] == 0
    assert not bht.access(pc, False)
    assert bht.counters[bht.index_of(pc)] == 0


def test_bht_indexing_ignores_low_pc_bits():
    bht = Bht(64)
    assert bht.index_of(0x103) == bht.index_of(0x100)
    assert bht.index_of(0x100 + 4 * 64) == bht.index_of(0x100)


def test_bht_clear_restores_init():
    bht = Bht(8)
    bht.access(0, True)
    bht.clear()
    assert (bht.counters == BHT_INIT).all()


def test_btb_predicts_only_exact_matches():
    btb = Btb(16)
    assert btb.access(3, 100)          # cold
    assert not btb.access(3, 100)      # exact repeat
    assert btb.access(3, 101)          # same slot, new target
    assert btb.access(3 + 16, 101)     # conflicting pc, same slot
    assert btb.access(3, 101)          # original pc was displaced


# -------------------------------------------------------------- arbiters

def test_arbiter_delay_is_distance_from_pointer():
    arb = RoundRobinArbiter(3)
    assert arb.grant(0) == 0    # ptr 0 -> unit 0, ptr becomes 1
    assert arb.grant(1) == 0    # ptr 1 -> unit 1, ptr becomes 2
    assert arb.grant(2) == 0    # ptr 2 -> unit 2, ptr becomes 0
    assert arb.grant(2) == 2    # ptr 0 -> unit 2 costs 2


def test_arbiter_same_unit_back_to_back_pays_full_rotation():
    arb = RoundRobinArbiter(4)
    assert arb.grant(1) == 1
    for _ in range(5):
        assert arb.grant(1) == 3


def test_arbiter_pinned_grants_are_free_and_stateless():
    arb = RoundRobinArbiter(3)
    arb.grant(1)
    ptr = int(arb.ptr[0])
    assert arb.grant(2, pinned=True) == 0
    assert int(arb.ptr[0]) == ptr


def test_arbiter_rejects_unknown_unit():
    with pytest.raises(ValueError):
        RoundRobinArbiter(2).grant(2)


# ---------------------------------------------------------- write buffer

def test_write_buffer_fifo_with_drop_oldest():
    wb = WriteBuffer(capacity=2)
    wb.push(10)
    wb.push(11)
    assert list(wb.addrs) == [10, 11]
    wb.push(12)  # full: oldest (10) drains first
    assert int(wb.meta[1]) == 2
    assert sorted(int(a) for a in wb.addrs if a) == [11, 12]


def test_write_buffer_arbiters_charge_contending_ports():
    wb = WriteBuffer()
    assert wb.push(1) == 0         # lookup port 0 from pointer 0, ptr -> 1
    assert wb.snoop() == 0         # pointer sits on port 1, ptr -> 0
    assert wb.snoop() == 1         # now it costs the rotation back
    assert wb.refill_grant() == 1  # drain pointer still at 0, port 1 waits
    assert wb.refill_grant() == 1  # back-to-back refills keep paying


def test_write_buffer_drain_empties():
    wb = WriteBuffer(4)
    for a in range(3):
        wb.push(a + 1)
    wb.drain()
    assert int(wb.meta[1]) == 0
    assert not wb.addrs.any()


# ------------------------------------------------------------ miss trace

def test_miss_handler_arm_requires_in_flight_record():
    mh = MissHandler()
    assert not mh.arm(5000)
    mh.record(17, 120)
    assert mh.arm(5000)
    assert mh.slots[MissHandler.ARMED] == 1
    assert mh.slots[MissHandler.REPLAY_SET] == 17
    assert mh.slots[MissHandler.IN_FLIGHT] == 0


def test_miss_handler_replay_pays_once_within_deadline():
    mh = MissHandler()
    mh.record(17, 120)
    mh.arm(5000)
    assert mh.check_replay(3, 200, 20) == 0      # wrong set: stays armed
    assert mh.slots[MissHandler.ARMED] == 1
    assert mh.check_replay(17, 4999, 20) == 20   # in window
    assert mh.check_replay(17, 5000, 20) == 0    # disarmed now


def test_miss_handler_late_hit_disarms_without_charge():
    mh = MissHandler()
    mh.record(4, 0)
    mh.arm(1000)
    assert mh.check_replay(4, 1000, 20) == 0     # deadline is exclusive
    assert mh.slots[MissHandler.ARMED] == 0


# ---------------------------------------------------------------- digest

def test_digest_is_sensitive_to_value_name_and_dtype():
    a = np.arange(6, dtype=np.int64)
    base = digest_fields([("a", a)])
    assert digest_fields([("a", a.copy())]) == base
    b = a.copy()
    b[3] += 1
    assert digest_fields([("a", b)]) != base
    assert digest_fields([("b", a)]) != base
    assert digest_fields([("a", a.astype(np.int32))]) != base
    assert digest_fields([("a", a.reshape(2, 3))]) != base
