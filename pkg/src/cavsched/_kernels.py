"""Compiled inner loops for search and enumeration.

Everything here operates on the flat-array scenario layout produced by
`search._build_table`: per-lane vehicle queues (`lane_start`/`lane_seq`),
flattened routes (`route_start`/`route_sub`/`route_off`), per-vehicle entry
floors (`tmin`) and trailing safety gaps (`gap_after`). Subzone occupancy is
kept in "gapped" form: gapped[z] = latest arrival at z plus the gap its
maneuver requires behind it, so an entry-time floor candidate is simply
gapped[z] - offset(z).

Randomness uses an explicit splitmix64 state (uint64[1]) so the compiled
engine and the pure-Python reference engine can replay identical streams.
"""

from __future__ import annotations

import numpy as np
from numba import njit

POLICY_HEURISTIC = 0
POLICY_RANDOM = 1

STATUS_BUDGET = 0
STATUS_EXHAUSTED = 1
STATUS_FULL = 2
STATUS_INTERNAL = 3

# state[] slots of the mcts driver
S_NODES = 0
S_ITERS = 1
S_ROLLOUTS = 2

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, inline="always")
def _next_u64(rng):
    rng[0] = rng[0] + _GAMMA
    z = rng[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _rand_below(rng, k):
    return np.int64(_next_u64(rng) >> np.uint64(33)) % k


@njit(cache=True, inline="always")
def _entry_for(veh, gapped, route_start, route_sub, route_off, tmin):
    t = tmin[veh]
    for k in range(route_start[veh], route_start[veh + 1]):
        v = gapped[route_sub[k]] - route_off[k]
        if v > t:
            t = v
    return t


@njit(cache=True, inline="always")
def _occupy(veh, entry, gapped, route_start, route_sub, route_off, gap_after):
    g = gap_after[veh]
    for k in range(route_start[veh], route_start[veh + 1]):
        gapped[route_sub[k]] = entry + route_off[k] + g


@njit(cache=True)
def build_dominance(n, nsub, route_start, route_sub, route_off, tmin):
    """dom[i, j] == 1 iff j does not block i: at every subzone the two routes
    share, i's earliest arrival is no later than j's. Routes with no shared
    subzone never block each other."""
    dom = np.zeros((n, n), dtype=np.uint8)
    stamp = np.full(nsub, -1, dtype=np.int64)
    off_at = np.zeros(nsub, dtype=np.float64)
    for i in range(n):
        for k in range(route_start[i], route_start[i + 1]):
            stamp[route_sub[k]] = i
            off_at[route_sub[k]] = route_off[k]
        for j in range(n):
            if j == i:
                continue
            ok = True
            for k in range(route_start[j], route_start[j + 1]):
                z = route_sub[k]
                if stamp[z] == i:
                    if tmin[i] + off_at[z] > tmin[j] + route_off[k]:
                        ok = False
                        break
            if ok:
                dom[i, j] = 1
    return dom


@njit(cache=True)
def rollout(
    policy,
    rng,
    ptrs,
    gapped,
    start_delay,
    order_out,
    lane_start,
    lane_seq,
    lane_of,
    route_start,
    route_sub,
    route_off,
    tmin,
    gap_after,
    dom,
    n_lanes,
):
    """Complete a partial order in place; returns (total delay, tail length).

    `ptrs` and `gapped` are scratch copies owned by the caller and describe
    the state after the partial order. With the heuristic policy a candidate
    that dominates every other lane front is appended deterministically;
    otherwise (and always with the random policy) a lane front is drawn
    uniformly. Appended vehicle indices land in order_out[0:tail].
    """
    delay = start_delay
    fronts = np.empty(n_lanes, dtype=np.int64)
    nf = 0
    for l in range(n_lanes):
        if lane_start[l] + ptrs[l] < lane_start[l + 1]:
            fronts[nf] = lane_seq[lane_start[l] + ptrs[l]]
            nf += 1
    cnt = 0
    while nf > 0:
        pick_pos = -1
        if policy == POLICY_HEURISTIC:
            for p in range(nf):
                c = fronts[p]
                ok = True
                for q in range(nf):
                    if q != p and dom[c, fronts[q]] == 0:
                        ok = False
                        break
                if ok:
                    pick_pos = p
                    break
        if pick_pos < 0:
            if nf > 1:
                pick_pos = _rand_below(rng, nf)
            else:
                pick_pos = 0
        veh = fronts[pick_pos]
        entry = _entry_for(veh, gapped, route_start, route_sub, route_off, tmin)
        delay += entry - tmin[veh]
        _occupy(veh, entry, gapped, route_start, route_sub, route_off, gap_after)
        order_out[cnt] = veh
        cnt += 1
        l = lane_of[veh]
        ptrs[l] += 1
        if lane_start[l] + ptrs[l] < lane_start[l + 1]:
            fronts[pick_pos] = lane_seq[lane_start[l] + ptrs[l]]
        else:
            fronts[pick_pos] = fronts[nf - 1]
            nf -= 1
    return delay, cnt


@njit(cache=True, inline="always")
def _scaled(lo, hi, x):
    if hi <= lo:
        return 1.0
    return (hi - x) / (hi - lo)


@njit(cache=True, inline="always")
def _node_score(jbar_v, jhat_v, d, omega, depth_lo, depth_hi, glob):
    s_d = _scaled(depth_lo[d], depth_hi[d], jbar_v)
    if jhat_v == np.inf:
        return s_d
    s_g = _scaled(glob[0], glob[1], jhat_v)
    return omega * s_d + (1.0 - omega) * s_g


@njit(cache=True)
def mcts_chunk(
    chunk_iters,
    # scenario table
    n,
    n_lanes,
    lane_start,
    lane_seq,
    lane_of,
    route_start,
    route_sub,
    route_off,
    tmin,
    gap_after,
    dom,
    # node arrays
    parent,
    choice,
    depth,
    first_child,
    last_child,
    next_sibling,
    visits,
    jbar,
    jhat,
    score,
    exhausted,
    unexp_mask,
    nonexh_children,
    lane_ptr,
    gapped,
    # normalizer
    depth_lo,
    depth_hi,
    depth_seen,
    glob,
    # best-so-far
    best,
    best_path,
    # iteration log (absolute indices via state[S_ITERS])
    log_best,
    log_nodes,
    # scratch
    roll_order,
    roll_ptrs,
    roll_gapped,
    # config
    c_param,
    omega,
    policy,
    rollouts_per_expansion,
    rng,
    state,
):
    """Run up to chunk_iters search iterations; every iteration adds one node.

    Returns STATUS_BUDGET when the chunk completes, STATUS_EXHAUSTED when the
    whole solution tree has been expanded, STATUS_FULL when the node arrays
    are out of capacity (caller grows and re-enters).
    """
    cap = parent.shape[0]
    one = np.uint64(1)
    for _ in range(chunk_iters):
        if exhausted[0] == 1:
            return STATUS_EXHAUSTED
        if state[S_NODES] >= cap:
            return STATUS_FULL
        # selection: descend through fully-expanded nodes, skipping exhausted
        # subtrees, until a node with unexpanded children is reached
        cur = 0
        while unexp_mask[cur] == np.uint64(0):
            ln_n = np.log(float(visits[cur]))
            best_child = -1
            best_val = -np.inf
            ch = first_child[cur]
            while ch != -1:
                if exhausted[ch] == 0:
                    u = score[ch] + c_param * np.sqrt(ln_n / visits[ch])
                    if u > best_val:
                        best_val = u
                        best_child = ch
                ch = next_sibling[ch]
            if best_child == -1:
                return STATUS_INTERNAL
            cur = best_child
        # expansion: uniformly random unexpanded lane front
        mask = unexp_mask[cur]
        cnt = 0
        for l in range(n_lanes):
            if mask & (one << np.uint64(l)):
                cnt += 1
        pick = 0
        if cnt > 1:
            pick = _rand_below(rng, cnt)
        lane = -1
        seen = 0
        for l in range(n_lanes):
            if mask & (one << np.uint64(l)):
                if seen == pick:
                    lane = l
                    break
                seen += 1
        unexp_mask[cur] = mask & ~(one << np.uint64(lane))
        veh = lane_seq[lane_start[lane] + lane_ptr[cur, lane]]

        nn = state[S_NODES]
        state[S_NODES] += 1
        parent[nn] = cur
        choice[nn] = veh
        depth[nn] = depth[cur] + 1
        first_child[nn] = -1
        last_child[nn] = -1
        next_sibling[nn] = -1
        visits[nn] = 0
        exhausted[nn] = 0
        nonexh_children[nn] = 0
        for l in range(n_lanes):
            lane_ptr[nn, l] = lane_ptr[cur, l]
        lane_ptr[nn, lane] += 1
        for z in range(gapped.shape[1]):
            gapped[nn, z] = gapped[cur, z]
        entry = _entry_for(veh, gapped[nn], route_start, route_sub, route_off, tmin)
        _occupy(veh, entry, gapped[nn], route_start, route_sub, route_off, gap_after)
        jbar[nn] = jbar[cur] + (entry - tmin[veh])
        if first_child[cur] == -1:
            first_child[cur] = nn
        else:
            next_sibling[last_child[cur]] = nn
        last_child[cur] = nn

        d = depth[nn]
        if depth_seen[d] == 0:
            depth_seen[d] = 1
            depth_lo[d] = jbar[nn]
            depth_hi[d] = jbar[nn]
        else:
            if jbar[nn] < depth_lo[d]:
                depth_lo[d] = jbar[nn]
            if jbar[nn] > depth_hi[d]:
                depth_hi[d] = jbar[nn]

        new_mask = np.uint64(0)
        for l in range(n_lanes):
            if lane_start[l] + lane_ptr[nn, l] < lane_start[l + 1]:
                new_mask |= one << np.uint64(l)
        unexp_mask[nn] = new_mask

        iter_val = np.inf
        if new_mask == np.uint64(0):
            # complete order: its own delay is exact
            exhausted[nn] = 1
            iter_val = jbar[nn]
            jhat[nn] = iter_val
            if iter_val < best[0]:
                best[0] = iter_val
                p = nn
                while p != 0:
                    best_path[depth[p] - 1] = choice[p]
                    p = parent[p]
        else:
            nonexh_children[cur] += 1
            jhat[nn] = np.inf
            for _r in range(rollouts_per_expansion):
                for l in range(n_lanes):
                    roll_ptrs[l] = lane_ptr[nn, l]
                for z in range(gapped.shape[1]):
                    roll_gapped[z] = gapped[nn, z]
                val, tail = rollout(
                    policy,
                    rng,
                    roll_ptrs,
                    roll_gapped,
                    jbar[nn],
                    roll_order,
                    lane_start,
                    lane_seq,
                    lane_of,
                    route_start,
                    route_sub,
                    route_off,
                    tmin,
                    gap_after,
                    dom,
                    n_lanes,
                )
                state[S_ROLLOUTS] += 1
                if glob[0] > val:
                    glob[0] = val
                if glob[1] < val:
                    glob[1] = val
                if val < iter_val:
                    iter_val = val
                if val < best[0]:
                    best[0] = val
                    p = nn
                    while p != 0:
                        best_path[depth[p] - 1] = choice[p]
                        p = parent[p]
                    for t in range(tail):
                        best_path[d + t] = roll_order[t]
        if iter_val != np.inf:
            if glob[0] > iter_val:
                glob[0] = iter_val
            if glob[1] < iter_val:
                glob[1] = iter_val
            jhat[nn] = min(jhat[nn], iter_val)

        # backpropagation: visits, best-descendant delay, scores
        p = nn
        while p != -1:
            visits[p] += 1
            if iter_val < jhat[p]:
                jhat[p] = iter_val
            score[p] = _node_score(
                jbar[p], jhat[p], depth[p], omega, depth_lo, depth_hi, glob
            )
            p = parent[p]

        # exhaustion cascade: a node with no unexpanded children and only
        # exhausted children can never yield a new leaf
        node = cur if exhausted[nn] == 1 else -1
        while (
            node != -1
            and unexp_mask[node] == np.uint64(0)
            and nonexh_children[node] == 0
            and exhausted[node] == 0
        ):
            exhausted[node] = 1
            up = parent[node]
            if up != -1:
                nonexh_children[up] -= 1
            node = up

        it = state[S_ITERS]
        log_best[it] = best[0]
        log_nodes[it] = state[S_NODES] - 1
        state[S_ITERS] += 1
    return STATUS_BUDGET


@njit(cache=True)
def enumerate_orders(
    n,
    n_lanes,
    lane_start,
    lane_seq,
    lane_of,
    route_start,
    route_sub,
    route_off,
    tmin,
    gap_after,
    gapped0,
    collect,
    delays_out,
    best_path,
):
    """Depth-first walk over every lane-order-consistent complete order.

    Returns (count, best_delay); best_path receives the minimizing order and,
    when collect != 0, delays_out[0:count] every leaf's total delay. Leaves
    are visited in lane-index lexicographic order, so ties keep the first
    minimizer deterministically.
    """
    max_route = 0
    for i in range(n):
        r = route_start[i + 1] - route_start[i]
        if r > max_route:
            max_route = r
    ptrs = np.zeros(n_lanes, dtype=np.int64)
    gapped = gapped0.copy()
    path = np.empty(n, dtype=np.int64)
    cursor = np.zeros(n + 1, dtype=np.int64)
    delay_at = np.zeros(n + 1, dtype=np.float64)
    saved = np.empty((n, max_route), dtype=np.float64)
    count = np.int64(0)
    best = np.inf
    d = 0
    cursor[0] = 0
    delay_at[0] = 0.0
    while True:
        l = cursor[d]
        while l < n_lanes and lane_start[l] + ptrs[l] >= lane_start[l + 1]:
            l += 1
        if l >= n_lanes:
            d -= 1
            if d < 0:
                break
            veh = path[d]
            for k in range(route_start[veh], route_start[veh + 1]):
                gapped[route_sub[k]] = saved[d, k - route_start[veh]]
            lane = lane_of[veh]
            ptrs[lane] -= 1
            cursor[d] = lane + 1
            continue
        veh = lane_seq[lane_start[l] + ptrs[l]]
        entry = _entry_for(veh, gapped, route_start, route_sub, route_off, tmin)
        for k in range(route_start[veh], route_start[veh + 1]):
            saved[d, k - route_start[veh]] = gapped[route_sub[k]]
        _occupy(veh, entry, gapped, route_start, route_sub, route_off, gap_after)
        path[d] = veh
        ptrs[l] += 1
        nd = delay_at[d] + (entry - tmin[veh])
        if d == n - 1:
            if collect != 0:
                delays_out[count] = nd
            count += 1
            if nd < best:
                best = nd
                for t in range(n):
                    best_path[t] = path[t]
            for k in range(route_start[veh], route_start[veh + 1]):
                gapped[route_sub[k]] = saved[d, k - route_start[veh]]
            ptrs[l] -= 1
            cursor[d] = l + 1
        else:
            cursor[d] = l
            delay_at[d + 1] = nd
            d += 1
            cursor[d] = 0
    return count, best
