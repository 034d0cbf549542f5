"""Compiled op-execution route.

This mirrors ``Machine.exec_op`` instruction for instruction. Both routes
mutate the same numpy arrays, and the equivalence tests hold them to
identical cycle counts and identical final state digests. Any semantic
change here must land in ``machine.Machine.exec_op`` too, and vice versa.
"""

from __future__ import annotations

import numpy as np
from numba import njit

OP_READ = 0
OP_WRITE = 1
OP_COND_BRANCH = 2
OP_INDIRECT_JUMP = 3
OP_FETCH_AT = 4

(CFG_D_SETS, CFG_D_WAYS, CFG_D_LINE_SHIFT, CFG_D_WT,
 CFG_I_SETS, CFG_I_WAYS, CFG_I_LINE_SHIFT,
 CFG_T_HIT, CFG_T_MISS, CFG_T_WB, CFG_T_MISPREDICT, CFG_T_TLB_MISS,
 CFG_TRACE, CFG_PINNED, CFG_TLB_ENTRIES, CFG_BHT_ENTRIES, CFG_BTB_ENTRIES,
 CFG_WBUF_CAP, CFG_PAGE_SHIFT, CFG_PIPE_DEPTH) = range(20)
N_CFG = 20

MH_IN_FLIGHT, MH_SET, MH_ISSUE, MH_ARMED, MH_REPLAY_SET, MH_DEADLINE = range(6)

LFSR_MASK = 0xB8


@njit(cache=True, nogil=True)
def _lfsr_step(state):
    v = state & LFSR_MASK
    v ^= v >> 4
    v ^= v >> 2
    v ^= v >> 1
    return ((state << 1) | (v & 1)) & 0xFF


@njit(cache=True, nogil=True)
def _plru_victim(bits, ways):
    node = 0
    while node < ways - 1:
        node = 2 * node + 1 + bits[node]
    return node - (ways - 1)


@njit(cache=True, nogil=True)
def _plru_touch(bits, ways, way):
    node = 0
    lo = 0
    hi = ways
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


@njit(cache=True, nogil=True)
def _arb_grant(ptr, n, unit, pinned):
    if pinned != 0:
        return 0
    delay = (unit - ptr[0]) % n
    ptr[0] = (unit + 1) % n
    return delay


@njit(cache=True, nogil=True)
def _wbuf_push(addr, wb_addrs, wb_meta, wb_lookup_ptr, wb_drain_ptr, cap, pinned):
    cost = _arb_grant(wb_lookup_ptr, 2, 0, pinned)
    head = wb_meta[0]
    count = wb_meta[1]
    if count == cap:
        cost += _arb_grant(wb_drain_ptr, 2, 0, pinned)
        wb_addrs[head] = 0
        head = (head + 1) % cap
        count -= 1
    wb_addrs[(head + count) % cap] = addr
    wb_meta[0] = head
    wb_meta[1] = count + 1
    return cost


@njit(cache=True, nogil=True)
def _tlb_access(vpn, domain, valid, vpns, doms, plru, entries):
    """Returns 1 on hit, 0 on miss; installs and touches either way."""
    for slot in range(entries):
        if valid[slot] == 1 and vpns[slot] == vpn and doms[slot] == domain:
            _plru_touch(plru, entries, slot)
            return 1
    slot = -1
    for i in range(entries):
        if valid[i] == 0:
            slot = i
            break
    if slot < 0:
        slot = _plru_victim(plru, entries)
    valid[slot] = 1
    vpns[slot] = vpn
    doms[slot] = domain
    _plru_touch(plru, entries, slot)
    return 0


@njit(cache=True, nogil=True)
def run_ops(kinds, aa, bb, cfg,
            d_valid, d_dirty, d_tag, d_dom, d_lfsr,
            i_valid, i_dirty, i_tag, i_dom, i_lfsr,
            dt_valid, dt_vpn, dt_dom, dt_plru,
            it_valid, it_vpn, it_dom, it_plru,
            bht, btb_valid, btb_tag, btb_target,
            mem_ptr, wb_addrs, wb_meta, wb_lookup_ptr, wb_drain_ptr,
            mh, cycle, occ, domain, budget):
    d_sets = cfg[CFG_D_SETS]
    d_ways = cfg[CFG_D_WAYS]
    d_shift = cfg[CFG_D_LINE_SHIFT]
    write_through = cfg[CFG_D_WT]
    i_sets = cfg[CFG_I_SETS]
    i_ways = cfg[CFG_I_WAYS]
    i_shift = cfg[CFG_I_LINE_SHIFT]
    t_hit = cfg[CFG_T_HIT]
    t_miss = cfg[CFG_T_MISS]
    t_wb = cfg[CFG_T_WB]
    t_mispredict = cfg[CFG_T_MISPREDICT]
    t_tlb_miss = cfg[CFG_T_TLB_MISS]
    trace = cfg[CFG_TRACE]
    pinned = cfg[CFG_PINNED]
    tlb_entries = cfg[CFG_TLB_ENTRIES]
    bht_entries = cfg[CFG_BHT_ENTRIES]
    btb_entries = cfg[CFG_BTB_ENTRIES]
    wbuf_cap = cfg[CFG_WBUF_CAP]
    page_shift = cfg[CFG_PAGE_SHIFT]
    pipe_depth = cfg[CFG_PIPE_DEPTH]

    total = np.int64(0)
    for idx in range(kinds.shape[0]):
        k = kinds[idx]
        a = aa[idx]
        b = bb[idx]
        cost = np.int64(1)
        if k == OP_READ or k == OP_WRITE:
            is_write = k == OP_WRITE
            vpn = a >> page_shift
            if _tlb_access(vpn, domain, dt_valid, dt_vpn, dt_dom, dt_plru,
                           tlb_entries) == 0:
                cost += t_tlb_miss
                cost += _arb_grant(mem_ptr, 3, 2, pinned)
            if is_write:
                cost += _arb_grant(mem_ptr, 3, 1, pinned)
            else:
                cost += _arb_grant(mem_ptr, 3, 0, pinned)
            s = (a >> d_shift) & (d_sets - 1)
            tag = (a >> d_shift) // d_sets
            hit_way = -1
            for w in range(d_ways):
                if d_valid[s, w] == 1 and d_tag[s, w] == tag:
                    hit_way = w
                    break
            if hit_way >= 0:
                cost += t_hit
                if is_write:
                    if write_through == 1:
                        cost += _wbuf_push(a, wb_addrs, wb_meta, wb_lookup_ptr,
                                           wb_drain_ptr, wbuf_cap, pinned)
                    else:
                        d_dirty[s, hit_way] = 1
            else:
                now = cycle[0]
                cost += t_miss
                if mh[MH_ARMED] == 1 and mh[MH_REPLAY_SET] == s:
                    mh[MH_ARMED] = 0
                    mh[MH_REPLAY_SET] = 0
                    deadline = mh[MH_DEADLINE]
                    mh[MH_DEADLINE] = 0
                    if now < deadline:
                        cost += t_miss
                if trace == 1:
                    mh[MH_IN_FLIGHT] = 1
                    mh[MH_SET] = s
                    mh[MH_ISSUE] = now
                victim = -1
                for w in range(d_ways):
                    if d_valid[s, w] == 0:
                        victim = w
                        break
                if pinned != 0:
                    if victim < 0:
                        victim = d_lfsr[0] & (d_ways - 1)
                else:
                    st = _lfsr_step(d_lfsr[0])
                    d_lfsr[0] = st
                    if victim < 0:
                        victim = st & (d_ways - 1)
                if d_valid[s, victim] == 1 and d_dirty[s, victim] == 1:
                    cost += t_wb
                d_valid[s, victim] = 1
                d_dirty[s, victim] = 1 if (is_write and write_through == 0) else 0
                d_tag[s, victim] = tag
                d_dom[s, victim] = domain
                if write_through == 1:
                    cost += _arb_grant(wb_lookup_ptr, 2, 1, pinned)
                    cost += _arb_grant(wb_drain_ptr, 2, 1, pinned)
                    if is_write:
                        cost += _wbuf_push(a, wb_addrs, wb_meta, wb_lookup_ptr,
                                           wb_drain_ptr, wbuf_cap, pinned)
        elif k == OP_FETCH_AT:
            vpn = a >> page_shift
            if _tlb_access(vpn, domain, it_valid, it_vpn, it_dom, it_plru,
                           tlb_entries) == 0:
                cost += t_tlb_miss
            s = (a >> i_shift) & (i_sets - 1)
            tag = (a >> i_shift) // i_sets
            hit_way = -1
            for w in range(i_ways):
                if i_valid[s, w] == 1 and i_tag[s, w] == tag:
                    hit_way = w
                    break
            if hit_way >= 0:
                cost += t_hit
            else:
                cost += t_miss
                victim = -1
                for w in range(i_ways):
                    if i_valid[s, w] == 0:
                        victim = w
                        break
                if pinned != 0:
                    if victim < 0:
                        victim = i_lfsr[0] & (i_ways - 1)
                else:
                    st = _lfsr_step(i_lfsr[0])
                    i_lfsr[0] = st
                    if victim < 0:
                        victim = st & (i_ways - 1)
                i_valid[s, victim] = 1
                i_dirty[s, victim] = 0
                i_tag[s, victim] = tag
                i_dom[s, victim] = domain
        elif k == OP_COND_BRANCH:
            bidx = (a >> 2) & (bht_entries - 1)
            c = bht[bidx]
            taken = b != 0
            if (c >= 2) != taken:
                cost += t_mispredict
            if taken:
                if c < 3:
                    bht[bidx] = c + 1
            else:
                if c > 0:
                    bht[bidx] = c - 1
        elif k == OP_INDIRECT_JUMP:
            slot = a % btb_entries
            if not (btb_valid[slot] == 1 and btb_tag[slot] == a
                    and btb_target[slot] == b):
                cost += t_mispredict
            btb_valid[slot] = 1
            btb_tag[slot] = a
            btb_target[slot] = b

        if occ[0] < pipe_depth:
            occ[0] = occ[0] + 1
        cycle[0] += cost
        total += cost
        if budget > 0 and total >= budget:
            break
    return total
