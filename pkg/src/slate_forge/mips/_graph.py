"""Numba kernels for the layered navigable small-world graph.

The graph is wired and searched by the raw inner product. Node ``v`` lives
on layers 0..levels[v]. Layer-0 lists hold up to ``2 * max_degree`` ids
from construction plus ``RESERVE`` slots that only the connectivity repair
may fill; upper layers hold up to ``max_degree`` ids, stored per slot, and
only nodes with level >= 1 own a slot.
"""

import heapq

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _ip(items, a, q):
    s = 0.0
    for j in range(items.shape[1]):
        s += items[a, j] * q[j]
    return s


RESERVE = 2


@njit(cache=True, inline="always")
def _bsim(items, a, b):
    d = 0.0
    for j in range(items.shape[1]):
        d += items[a, j] * items[b, j]
    return d


@njit(cache=True)
def _greedy_build(items, v, entry, layer, slot, nbr_up, cnt_up, prune):
    cur = np.int64(entry)
    cur_s = _bsim(items, cur, v)
    changed = True
    while changed:
        changed = False
        s_idx = slot[cur]
        for k in range(cnt_up[s_idx, layer - 1]):
            nb = np.int64(nbr_up[s_idx, layer - 1, k])
            s = _bsim(items, nb, v)
            if s > cur_s or (s == cur_s and nb < cur):
                cur_s = s
                cur = nb
                changed = True
    return cur


@njit(cache=True)
def _search_build(items, v, entry, ef, layer, nbr0, cnt0, slot, nbr_up, cnt_up, visited, epoch, prune):
    """Beam search towards stored node ``v`` (epoch-tagged visited array)."""
    entry = np.int64(entry)
    s0 = _bsim(items, entry, v)
    cand = [(-s0, entry)]
    res = [(s0, entry)]
    visited[entry] = epoch
    while len(cand) > 0:
        negs, c = heapq.heappop(cand)
        if len(res) >= ef and -negs < res[0][0]:
            break
        if layer == 0:
            n_nb = cnt0[c]
        else:
            n_nb = cnt_up[slot[c], layer - 1]
        for k in range(n_nb):
            if layer == 0:
                nb = np.int64(nbr0[c, k])
            else:
                nb = np.int64(nbr_up[slot[c], layer - 1, k])
            if visited[nb] == epoch:
                continue
            visited[nb] = epoch
            s = _bsim(items, nb, v)
            if len(res) < ef or s > res[0][0]:
                heapq.heappush(cand, (-s, nb))
                heapq.heappush(res, (s, nb))
                if len(res) > ef:
                    heapq.heappop(res)
    n = len(res)
    ids = np.empty(n, dtype=np.int64)
    sims = np.empty(n, dtype=np.float64)
    for i in range(n - 1, -1, -1):
        s, u = heapq.heappop(res)
        ids[i] = u
        sims[i] = s
    return ids, sims


@njit(cache=True)
def _select(items, base, cand_ids, cand_sims, m, prune):
    """Diversity-pruned choice of up to ``m`` neighbours for ``base``.

    Candidates arrive sorted by decreasing similarity to ``base``. One is kept
    if it is more similar to ``base`` than to every neighbour kept so far;
    leftover slots are filled in similarity order so degree stays high.
    """
    n = cand_ids.shape[0]
    out = np.empty(m, dtype=np.int64)
    taken = np.zeros(n, dtype=np.bool_)
    k = 0
    for i in range(n if prune else 0):
        if k >= m:
            break
        c = cand_ids[i]
        if c == base:
            taken[i] = True
            continue
        ok = True
        for j in range(k):
            if _bsim(items, c, out[j]) > cand_sims[i]:
                ok = False
                break
        if ok:
            out[k] = c
            taken[i] = True
            k += 1
    for i in range(n):
        if k >= m:
            break
        if taken[i] or cand_ids[i] == base:
            continue
        out[k] = cand_ids[i]
        k += 1
    return out[:k]


@njit(cache=True)
def _link(items, src, dst, layer, cap, nbr0, cnt0, slot, nbr_up, cnt_up, prune):
    """Add edge src -> dst, re-pruning src's list when over capacity."""
    if layer == 0:
        n = cnt0[src]
        for k in range(n):
            if nbr0[src, k] == dst:
                return
        if n < cap:
            nbr0[src, n] = dst
            cnt0[src] = n + 1
            return
        ids = np.empty(n + 1, dtype=np.int64)
        for k in range(n):
            ids[k] = nbr0[src, k]
    else:
        s_idx = slot[src]
        n = cnt_up[s_idx, layer - 1]
        for k in range(n):
            if nbr_up[s_idx, layer - 1, k] == dst:
                return
        if n < cap:
            nbr_up[s_idx, layer - 1, n] = dst
            cnt_up[s_idx, layer - 1] = n + 1
            return
        ids = np.empty(n + 1, dtype=np.int64)
        for k in range(n):
            ids[k] = nbr_up[s_idx, layer - 1, k]
    ids[n] = dst
    sims = np.empty(n + 1, dtype=np.float64)
    for k in range(n + 1):
        sims[k] = _bsim(items, src, ids[k])
    order = np.argsort(-sims, kind="mergesort")
    ids = ids[order]
    sims = sims[order]
    keep = _select(items, src, ids, sims, cap, prune)
    if layer == 0:
        for k in range(keep.shape[0]):
            nbr0[src, k] = keep[k]
        cnt0[src] = keep.shape[0]
    else:
        s_idx = slot[src]
        for k in range(keep.shape[0]):
            nbr_up[s_idx, layer - 1, k] = keep[k]
        cnt_up[s_idx, layer - 1] = keep.shape[0]


@njit(cache=True)
def build_graph(items, levels, max_degree, ef_construction, prune):
    P = items.shape[0]
    cap0 = 2 * max_degree
    max_level = 0
    for v in range(P):
        if levels[v] > max_level:
            max_level = levels[v]
    slot = -np.ones(P, dtype=np.int64)
    n_up = 0
    for v in range(P):
        if levels[v] >= 1:
            slot[v] = n_up
            n_up += 1
    nbr0 = np.zeros((P, cap0 + RESERVE), dtype=np.int32)
    cnt0 = np.zeros(P, dtype=np.int32)
    nbr_up = np.zeros((max(n_up, 1), max(max_level, 1), max_degree), dtype=np.int32)
    cnt_up = np.zeros((max(n_up, 1), max(max_level, 1)), dtype=np.int32)
    visited = np.zeros(P, dtype=np.int64)
    epoch = 0
    entry = np.int64(0)
    top = levels[0]
    for v in range(1, P):
        lv = levels[v]
        cur = entry
        for layer in range(top, lv, -1):
            cur = _greedy_build(items, v, cur, layer, slot, nbr_up, cnt_up, prune)
        for layer in range(min(top, lv), -1, -1):
            epoch += 1
            ids, sims = _search_build(items, v, cur, ef_construction, layer, nbr0, cnt0, slot,
                                      nbr_up, cnt_up, visited, epoch, prune)
            cap = cap0 if layer == 0 else max_degree
            sel = _select(items, v, ids, sims, max_degree, prune)
            for k in range(sel.shape[0]):
                _link(items, v, sel[k], layer, cap, nbr0, cnt0, slot, nbr_up, cnt_up, prune)
                _link(items, sel[k], v, layer, cap, nbr0, cnt0, slot, nbr_up, cnt_up, prune)
            cur = ids[0]
        if lv > top:
            top = lv
            entry = np.int64(v)
    return nbr0, cnt0, slot, nbr_up, cnt_up, entry


@njit(cache=True)
def reachable_from(entry, nbr0, cnt0):
    P = cnt0.shape[0]
    seen = np.zeros(P, dtype=np.bool_)
    stack = np.empty(P, dtype=np.int64)
    seen[entry] = True
    stack[0] = entry
    sp = 1
    while sp > 0:
        sp -= 1
        c = stack[sp]
        for k in range(cnt0[c]):
            nb = nbr0[c, k]
            if not seen[nb]:
                seen[nb] = True
                stack[sp] = nb
                sp += 1
    return seen


@njit(cache=True)
def _mark_from(v, nbr0, cnt0, seen, stack):
    """Flood-fill ``seen`` from ``v``; returns the number of newly marked nodes."""
    if seen[v]:
        return 0
    seen[v] = True
    stack[0] = v
    sp = 1
    n = 1
    while sp > 0:
        sp -= 1
        c = stack[sp]
        for k in range(cnt0[c]):
            nb = nbr0[c, k]
            if not seen[nb]:
                seen[nb] = True
                stack[sp] = nb
                sp += 1
                n += 1
    return n


@njit(cache=True)
def repair_reachability(items, entry, nbr0, cnt0):
    """Make every layer-0 node reachable from ``entry``; returns edges added.

    Each stranded node receives one in-edge written into a host's spare
    (reserved) slots, so no existing edge is ever evicted. The host is the
    most similar reachable node among the stranded node's out-neighbours and
    their out-neighbours; failing that, the most recently attached node with
    a free slot. Attached nodes bring their whole unreachable component
    with them, and every attached node has at least RESERVE free slots, so
    a host always exists.
    """
    P = cnt0.shape[0]
    width = nbr0.shape[1]
    seen = np.zeros(P, dtype=np.bool_)
    stack = np.empty(P, dtype=np.int64)
    _mark_from(entry, nbr0, cnt0, seen, stack)
    pool = np.empty(P, dtype=np.int64)
    n_pool = 0
    n_added = 0
    for v in range(P):
        if seen[v]:
            continue
        best = -1
        best_s = -np.inf
        for k in range(cnt0[v]):
            u = nbr0[v, k]
            for hop in range(cnt0[u] + 1):
                w = u if hop == 0 else nbr0[u, hop - 1]
                if seen[w] and cnt0[w] < width:
                    s = _bsim(items, w, v)
                    if s > best_s or (s == best_s and w < best):
                        best_s = s
                        best = w
        if best == -1:
            while n_pool > 0 and cnt0[pool[n_pool - 1]] >= width:
                n_pool -= 1
            if n_pool > 0:
                best = pool[n_pool - 1]
            elif cnt0[entry] < width:
                best = entry
            else:
                # every pooled host is full; scan for any reachable node with room
                for w in range(P):
                    if seen[w] and cnt0[w] < width:
                        best = w
                        break
        nbr0[best, cnt0[best]] = v
        cnt0[best] += 1
        n_added += 1
        _mark_from(v, nbr0, cnt0, seen, stack)
        pool[n_pool] = v
        n_pool += 1
    return n_added


# ---------------------------------------------------------------------------
# Query side. The visited set is an open-addressing table supplied by the
# caller, so query scratch memory depends on the beam width, never on P.


@njit(cache=True, inline="always")
def _hash_insert(table, mask, key):
    """Insert key (>= 0); returns False if already present."""
    h = (key * 0x9E3779B1) & mask
    while True:
        cur = table[h]
        if cur == -1:
            table[h] = key
            return True
        if cur == key:
            return False
        h = (h + 1) & mask


@njit(cache=True, nogil=True)
def _greedy_query(items, q, entry, layer, slot, nbr_up, cnt_up):
    cur = np.int64(entry)
    cur_s = _ip(items, cur, q)
    changed = True
    while changed:
        changed = False
        s_idx = slot[cur]
        for k in range(cnt_up[s_idx, layer - 1]):
            nb = np.int64(nbr_up[s_idx, layer - 1, k])
            s = _ip(items, nb, q)
            if s > cur_s or (s == cur_s and nb < cur):
                cur_s = s
                cur = nb
                changed = True
    return cur


@njit(cache=True, nogil=True)
def search_one(items, q, K, ef, entry, top, nbr0, cnt0, slot, nbr_up, cnt_up, table):
    """Top-K by inner product for one query; ``table`` is caller scratch."""
    mask = table.shape[0] - 1
    limit = table.shape[0] // 2
    cur = np.int64(entry)
    for layer in range(top, 0, -1):
        cur = _greedy_query(items, q, cur, layer, slot, nbr_up, cnt_up)
    for i in range(table.shape[0]):
        table[i] = -1
    s0 = _ip(items, cur, q)
    cand = [(-s0, cur)]
    res = [(s0, cur)]
    _hash_insert(table, mask, cur)
    n_seen = 1
    while len(cand) > 0 and n_seen < limit:
        negs, c = heapq.heappop(cand)
        if len(res) >= ef and -negs < res[0][0]:
            break
        for k in range(cnt0[c]):
            nb = np.int64(nbr0[c, k])
            if not _hash_insert(table, mask, nb):
                continue
            n_seen += 1
            s = _ip(items, nb, q)
            if len(res) < ef or s > res[0][0]:
                heapq.heappush(cand, (-s, nb))
                heapq.heappush(res, (s, nb))
                if len(res) > ef:
                    heapq.heappop(res)
    n = len(res)
    ids = np.empty(n, dtype=np.int64)
    sims = np.empty(n, dtype=np.float64)
    for i in range(n):
        s, v = heapq.heappop(res)
        ids[i] = v
        sims[i] = s
    # decreasing inner product, ties to the smaller id
    by_id = np.argsort(ids, kind="mergesort")
    order = by_id[np.argsort(-sims[by_id], kind="mergesort")]
    k_out = min(K, n)
    out = np.empty(k_out, dtype=np.int64)
    for i in range(k_out):
        out[i] = ids[order[i]]
    return out


@njit(cache=True, nogil=True)
def search_batch(items, Q, K, ef, entry, top, nbr0, cnt0, slot, nbr_up, cnt_up, table):
    n = Q.shape[0]
    out = np.empty((n, K), dtype=np.int64)
    for i in range(n):
        r = search_one(items, Q[i], K, ef, entry, top, nbr0, cnt0, slot, nbr_up, cnt_up, table)
        for k in range(K):
            out[i, k] = r[k] if k < r.shape[0] else -1
    return out
