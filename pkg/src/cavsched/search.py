"""Passing-order search: MCTS with heuristic rollouts, FIFO, and exhaustive
enumeration over the solution tree.

Tree nodes are partial passing orders; children append one vehicle, restricted
to the front-most uncovered vehicle of each lane, so every reachable leaf is a
valid complete order. Node scores blend the partial order's own delay with the
best complete delay seen through the node, both normalized to [0, 1] against
running ranges (per-depth for partial delays, global for complete ones).

Two interchangeable engines run the same algorithm: a compiled one (numba,
default) and a pure-Python reference; given the same seed they produce
identical trees, which the test suite exploits.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from heapq import heappop, heappush
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels
from .model import IntersectionModel, SafetyGapTable, Vehicle, route_for
from .schedule import (
    InvalidPassingOrder,
    OccupancyState,
    earliest_entry_times,
    interpret_order,
)

NO_OCCUPANCY = float("-inf")

_U64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class EnumerationCapExceeded(RuntimeError):
    """The instance has more valid orders than the enumeration cap allows."""


@dataclass(frozen=True)
class PassingOrder:
    """A (partial or complete) sequence of vehicle ids entering the zone."""

    sequence: tuple[str, ...]
    complete: bool


@dataclass
class MctsConfig:
    c: float = 0.05
    omega: float = 0.85
    budget_nodes: int | None = 1000
    budget_time: float | None = 0.1
    rollout_policy: str = "heuristic"
    rollouts_per_expansion: int = 1
    rng_seed: int = 0
    retain_tree: bool = False
    engine: str = "kernel"

    def validate(self) -> None:
        if self.c < 0:
            raise ValueError("exploration weight c must be >= 0")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")
        if self.budget_nodes is None and self.budget_time is None:
            raise ValueError("at least one of budget_nodes/budget_time must be set")
        if self.budget_nodes is not None and self.budget_nodes < 1:
            raise ValueError("budget_nodes must be >= 1")
        if self.rollout_policy not in ("heuristic", "random"):
            raise ValueError("rollout_policy must be 'heuristic' or 'random'")
        if self.rollouts_per_expansion < 0:
            raise ValueError("rollouts_per_expansion must be >= 0")
        if self.engine not in ("kernel", "python"):
            raise ValueError("engine must be 'kernel' or 'python'")


@dataclass
class TreeNode:
    """Public view of a search-tree node (see also dump_tree)."""

    order: tuple[str, ...]
    visits: int = 0
    own_delay: float = 0.0
    best_descendant_delay: float = float("inf")
    score: float = 1.0
    children: list["TreeNode"] = field(default_factory=list)
    unexpanded: list[str] = field(default_factory=list)
    exhausted: bool = False


@dataclass
class SearchReport:
    best_order: PassingOrder
    best_delay: float
    fifo_delay: float
    nodes_expanded: int
    rollouts: int
    elapsed: float
    iterations: list[tuple[int, float, int, float]]
    tree_root: TreeNode | None = None


@dataclass
class EnumerationResult:
    best_order: PassingOrder
    best_delay: float
    order_count: int
    delays: np.ndarray | None = None


@dataclass
class TreeDump:
    dot: str
    tree: dict


class DelayNormalizer:
    """Running min/max registry mapping delays onto [0, 1], best -> 1.

    Partial-order delays are tracked per depth (only orders of equal length
    are comparable); complete-order delays share one global range. Scaling a
    delay that was never registered is an error.
    """

    _EPS = 1e-9

    def __init__(self) -> None:
        self._depth: dict[int, tuple[float, float]] = {}
        self._global: tuple[float, float] | None = None

    def register_partial(self, depth: int, delay: float) -> None:
        lo, hi = self._depth.get(depth, (delay, delay))
        self._depth[depth] = (min(lo, delay), max(hi, delay))

    def register_complete(self, delay: float) -> None:
        if self._global is None:
            self._global = (delay, delay)
        else:
            lo, hi = self._global
            self._global = (min(lo, delay), max(hi, delay))

    @staticmethod
    def _scale(lo: float, hi: float, x: float) -> float:
        if hi <= lo:
            return 1.0
        return (hi - x) / (hi - lo)

    def scale_partial(self, depth: int, delay: float) -> float:
        if depth not in self._depth:
            raise ValueError(f"no partial delay registered at depth {depth}")
        lo, hi = self._depth[depth]
        if not lo - self._EPS <= delay <= hi + self._EPS:
            raise ValueError(f"partial delay {delay} not registered at depth {depth}")
        return self._scale(lo, hi, delay)

    def scale_complete(self, delay: float) -> float:
        if self._global is None:
            raise ValueError("no complete-order delay registered")
        lo, hi = self._global
        if not lo - self._EPS <= delay <= hi + self._EPS:
            raise ValueError(f"complete delay {delay} not registered")
        return self._scale(lo, hi, delay)


def node_score(
    own_delay: float,
    best_descendant_delay: float,
    depth: int,
    omega: float,
    normalizer: DelayNormalizer,
) -> float:
    """Blend of the node's own (partial) delay and its best complete
    descendant delay, each scaled to [0, 1]; higher is more promising. A node
    that no complete order has passed through yet scores on its own delay
    alone."""
    s_d = normalizer.scale_partial(depth, own_delay)
    if best_descendant_delay == float("inf"):
        return s_d
    s_g = normalizer.scale_complete(best_descendant_delay)
    return omega * s_d + (1.0 - omega) * s_g


def ucb1_select(parent, c: float):
    """Child with the largest score + c * sqrt(ln(parent visits) / child
    visits); exhausted subtrees are skipped, ties keep the earliest child."""
    ln_n = math.log(parent.visits)
    best = None
    best_val = float("-inf")
    for child in parent.children:
        if getattr(child, "exhausted", False):
            continue
        val = child.score + c * math.sqrt(ln_n / child.visits)
        if val > best_val:
            best_val = val
            best = child
    if best is None:
        raise ValueError("node has no selectable children")
    return best


def valid_children(order: Sequence[str], vehicles: Iterable[Vehicle]) -> list[str]:
    """The front-most uncovered vehicle of every non-empty lane (the only
    extensions that respect same-lane ordering)."""
    lanes: dict[str, list[str]] = {}
    for veh in sorted(vehicles, key=lambda v: v.distance_to_zone):
        lanes.setdefault(veh.lane, []).append(veh.id)
    fronts: dict[str, int] = {lane: 0 for lane in lanes}
    lane_of = {vid: lane for lane, vids in lanes.items() for vid in vids}
    for vid in order:
        lane = lane_of.get(vid)
        if lane is None:
            raise InvalidPassingOrder(f"order references unknown vehicle {vid!r}")
        if lanes[lane][fronts[lane]] != vid:
            raise InvalidPassingOrder(
                f"invalid passing order: {vid!r} overtakes a same-lane vehicle"
            )
        fronts[lane] += 1
    return [
        lanes[lane][fronts[lane]]
        for lane in sorted(lanes)
        if fronts[lane] < len(lanes[lane])
    ]


def fifo_order(
    vehicles: Iterable[Vehicle],
    model: IntersectionModel,
    t_min: Mapping[str, float] | None = None,
) -> PassingOrder:
    """First-in-first-out baseline: repeatedly take the lane front with the
    earliest feasible arrival (ties by vehicle id). Lane order is preserved
    even when a farther same-lane vehicle happens to have a smaller floor."""
    vehicle_list = list(vehicles)
    if t_min is None:
        t_min = earliest_entry_times(vehicle_list)
    lanes: dict[str, list[Vehicle]] = {}
    for veh in sorted(vehicle_list, key=lambda v: v.distance_to_zone):
        lanes.setdefault(veh.lane, []).append(veh)
    heap: list[tuple[float, str, str, int]] = []
    for lane, vs in lanes.items():
        heappush(heap, (t_min[vs[0].id], vs[0].id, lane, 0))
    out: list[str] = []
    while heap:
        _, vid, lane, idx = heappop(heap)
        out.append(vid)
        if idx + 1 < len(lanes[lane]):
            nxt = lanes[lane][idx + 1]
            heappush(heap, (t_min[nxt.id], nxt.id, lane, idx + 1))
    return PassingOrder(tuple(out), complete=True)


# ---------------------------------------------------------------------------
# flat scenario table shared by both engines and the enumerator


@dataclass
class _ScenarioTable:
    ids: tuple[str, ...]
    index: dict[str, int]
    n: int
    n_lanes: int
    lane_ids: tuple[str, ...]
    lane_start: np.ndarray
    lane_seq: np.ndarray
    lane_of: np.ndarray
    route_start: np.ndarray
    route_sub: np.ndarray
    route_off: np.ndarray
    tmin: np.ndarray
    gap_after: np.ndarray
    gapped0: np.ndarray
    subzone_count: int
    dom: np.ndarray | None = None


def _build_table(
    vehicles: Sequence[Vehicle],
    model: IntersectionModel,
    gaps: SafetyGapTable,
    t_min: Mapping[str, float] | None,
    seed_occupancy: OccupancyState | None,
    need_dominance: bool,
) -> _ScenarioTable:
    ids = tuple(v.id for v in vehicles)
    if len(set(ids)) != len(ids):
        raise InvalidPassingOrder("duplicate vehicle ids in scenario")
    index = {vid: i for i, vid in enumerate(ids)}
    n = len(vehicles)
    if t_min is None:
        t_min = earliest_entry_times(vehicles)

    lanes: dict[str, list[int]] = {}
    for i, veh in enumerate(sorted(vehicles, key=lambda v: v.distance_to_zone)):
        lanes.setdefault(veh.lane, []).append(index[veh.id])
    lane_ids = tuple(sorted(lanes))
    n_lanes = len(lane_ids)
    if n_lanes > 64:
        raise ValueError("at most 64 occupied lanes are supported")
    lane_start = np.zeros(n_lanes + 1, dtype=np.int64)
    lane_seq = np.empty(n, dtype=np.int64)
    lane_of = np.empty(n, dtype=np.int64)
    pos = 0
    for l, lane in enumerate(lane_ids):
        for idx in lanes[lane]:
            lane_seq[pos] = idx
            lane_of[idx] = l
            pos += 1
        lane_start[l + 1] = pos

    route_start = np.zeros(n + 1, dtype=np.int64)
    subs: list[int] = []
    offs: list[float] = []
    for i, veh in enumerate(vehicles):
        route = route_for(model, veh.lane)
        subs.extend(route.subzones)
        offs.extend(route.offsets)
        route_start[i + 1] = route_start[i] + len(route.subzones)
    route_sub = np.array(subs, dtype=np.int64)
    route_off = np.array(offs, dtype=np.float64)

    tmin_arr = np.array([t_min[v.id] for v in vehicles], dtype=np.float64)
    gap_after = np.array([gaps[v.movement] for v in vehicles], dtype=np.float64)

    gapped0 = np.full(model.subzone_count, NO_OCCUPANCY, dtype=np.float64)
    if seed_occupancy is not None:
        for z, t in seed_occupancy.t_max.items():
            gapped0[z] = t + gaps[seed_occupancy.last_movement[z]]

    table = _ScenarioTable(
        ids=ids,
        index=index,
        n=n,
        n_lanes=n_lanes,
        lane_ids=lane_ids,
        lane_start=lane_start,
        lane_seq=lane_seq,
        lane_of=lane_of,
        route_start=route_start,
        route_sub=route_sub,
        route_off=route_off,
        tmin=tmin_arr,
        gap_after=gap_after,
        gapped0=gapped0,
        subzone_count=model.subzone_count,
    )
    if need_dominance:
        table.dom = _kernels.build_dominance(
            n, model.subzone_count, route_start, route_sub, route_off, tmin_arr
        )
    return table


def _replay_prefix(
    table: _ScenarioTable, order: Sequence[str]
) -> tuple[np.ndarray, np.ndarray, float]:
    """Apply a partial order to fresh scratch state; returns (lane pointers,
    gapped occupancy, accumulated delay). Validates lane-order consistency."""
    ptrs = np.zeros(table.n_lanes, dtype=np.int64)
    gapped = table.gapped0.copy()
    delay = 0.0
    for vid in order:
        i = table.index.get(vid)
        if i is None:
            raise InvalidPassingOrder(f"order references unknown vehicle {vid!r}")
        l = table.lane_of[i]
        if (
            table.lane_start[l] + ptrs[l] >= table.lane_start[l + 1]
            or table.lane_seq[table.lane_start[l] + ptrs[l]] != i
        ):
            raise InvalidPassingOrder(
                f"invalid passing order: {vid!r} overtakes a same-lane vehicle"
            )
        entry = table.tmin[i]
        for k in range(table.route_start[i], table.route_start[i + 1]):
            v = gapped[table.route_sub[k]] - table.route_off[k]
            if v > entry:
                entry = v
        delay += entry - table.tmin[i]
        g = table.gap_after[i]
        for k in range(table.route_start[i], table.route_start[i + 1]):
            gapped[table.route_sub[k]] = entry + table.route_off[k] + g
        ptrs[l] += 1
    return ptrs, gapped, delay


def _rollout_wrapper(
    policy: int,
    order: Sequence[str],
    vehicles: Sequence[Vehicle],
    model: IntersectionModel,
    gaps: SafetyGapTable,
    rng,
    seed_occupancy: OccupancyState | None,
    t_min: Mapping[str, float] | None,
) -> tuple[PassingOrder, float]:
    vehicle_list = list(vehicles)
    table = _build_table(
        vehicle_list,
        model,
        gaps,
        t_min,
        seed_occupancy,
        need_dominance=policy == _kernels.POLICY_HEURISTIC,
    )
    ptrs, gapped, delay = _replay_prefix(table, order)
    dom = table.dom if table.dom is not None else np.zeros((1, 1), dtype=np.uint8)
    rng_state = np.array([rng.getrandbits(64)], dtype=np.uint64)
    out = np.empty(max(table.n, 1), dtype=np.int64)
    total, tail = _kernels.rollout(
        policy,
        rng_state,
        ptrs,
        gapped,
        delay,
        out,
        table.lane_start,
        table.lane_seq,
        table.lane_of,
        table.route_start,
        table.route_sub,
        table.route_off,
        table.tmin,
        table.gap_after,
        dom,
        table.n_lanes,
    )
    seq = tuple(order) + tuple(table.ids[i] for i in out[:tail])
    return PassingOrder(seq, complete=True), float(total)


def rollout_heuristic(
    order: Sequence[str],
    vehicles: Sequence[Vehicle],
    model: IntersectionModel,
    gaps: SafetyGapTable,
    rng,
    seed_occupancy: OccupancyState | None = None,
    t_min: Mapping[str, float] | None = None,
) -> tuple[PassingOrder, float]:
    """Complete a partial order lane-front by lane-front: a candidate whose
    earliest arrivals are no later than every other candidate's at all shared
    subzones is appended outright; otherwise one candidate is drawn uniformly.
    Returns the complete order and its interpreted total delay."""
    return _rollout_wrapper(
        _kernels.POLICY_HEURISTIC, order, vehicles, model, gaps, rng, seed_occupancy, t_min
    )


def rollout_random(
    order: Sequence[str],
    vehicles: Sequence[Vehicle],
    model: IntersectionModel,
    gaps: SafetyGapTable,
    rng,
    seed_occupancy: OccupancyState | None = None,
    t_min: Mapping[str, float] | None = None,
) -> tuple[PassingOrder, float]:
    """Complete a partial order by uniformly random draws among lane fronts
    (lane-order validity holds by construction)."""
    return _rollout_wrapper(
        _kernels.POLICY_RANDOM, order, vehicles, model, gaps, rng, seed_occupancy, t_min
    )


def count_orders(vehicles: Iterable[Vehicle]) -> int:
    """Number of lane-order-consistent complete orders (multinomial)."""
    counts: dict[str, int] = {}
    total = 0
    for veh in vehicles:
        counts[veh.lane] = counts.get(veh.lane, 0) + 1
        total += 1
    result = math.factorial(total)
    for c in counts.values():
        result //= math.factorial(c)
    return result


def enumerate_optimal(
    vehicles: Sequence[Vehicle],
    model: IntersectionModel,
    gaps: SafetyGapTable,
    cap: int = 10_000_000,
    collect_delays: bool = False,
    seed_occupancy: OccupancyState | None = None,
    t_min: Mapping[str, float] | None = None,
) -> EnumerationResult:
    """Exact minimum-delay order by depth-first enumeration of all valid
    orders; optionally returns every leaf delay (for histograms and ranks).
    Refuses instances with more orders than `cap` — use mcts_search there."""
    vehicle_list = list(vehicles)
    if not vehicle_list:
        raise ValueError("enumerate_optimal requires at least one vehicle")
    expected = count_orders(vehicle_list)
    if expected > cap:
        raise EnumerationCapExceeded(
            f"{expected} valid passing orders exceed the enumeration cap "
            f"({cap}); use mcts_search for instances of this size"
        )
    table = _build_table(vehicle_list, model, gaps, t_min, seed_occupancy, False)
    delays_out = np.empty(expected if collect_delays else 1, dtype=np.float64)
    best_path = np.empty(table.n, dtype=np.int64)
    count, best = _kernels.enumerate_orders(
        table.n,
        table.n_lanes,
        table.lane_start,
        table.lane_seq,
        table.lane_of,
        table.route_start,
        table.route_sub,
        table.route_off,
        table.tmin,
        table.gap_after,
        table.gapped0,
        1 if collect_delays else 0,
        delays_out,
        best_path,
    )
    if count != expected:
        raise RuntimeError(
            f"enumeration visited {count} orders, expected {expected}"
        )
    order = PassingOrder(tuple(table.ids[i] for i in best_path), complete=True)
    return EnumerationResult(
        best_order=order,
        best_delay=float(best),
        order_count=int(count),
        delays=delays_out if collect_delays else None,
    )


def rank_of(delays: np.ndarray, value: float) -> tuple[int, float]:
    """1-based rank of `value` in the delay population (ties share the best
    rank) and its percentile (rank / population size)."""
    sorted_delays = np.sort(delays)
    eps = 1e-9 * max(1.0, abs(value))
    rank = int(np.searchsorted(sorted_delays, value - eps, side="left")) + 1
    rank = min(rank, len(sorted_delays))
    return rank, rank / len(sorted_delays)


# ---------------------------------------------------------------------------
# engines

_CHUNK = 256


def _grow(arr: np.ndarray, new_cap: int) -> np.ndarray:
    shape = (new_cap,) + arr.shape[1:]
    out = np.empty(shape, dtype=arr.dtype)
    out[: arr.shape[0]] = arr
    return out


def _run_kernel_engine(
    table: _ScenarioTable,
    config: MctsConfig,
    fifo_delay: float,
    fifo_idx: Sequence[int],
):
    n, n_lanes = table.n, table.n_lanes
    budget_nodes = config.budget_nodes
    cap = 4096 if budget_nodes is None else min(budget_nodes + 1, 4096)
    cap = max(cap, 64)

    parent = np.full(cap, -1, dtype=np.int64)
    choice = np.full(cap, -1, dtype=np.int64)
    depth = np.zeros(cap, dtype=np.int64)
    first_child = np.full(cap, -1, dtype=np.int64)
    last_child = np.full(cap, -1, dtype=np.int64)
    next_sibling = np.full(cap, -1, dtype=np.int64)
    visits = np.zeros(cap, dtype=np.int64)
    jbar = np.zeros(cap, dtype=np.float64)
    jhat = np.full(cap, np.inf, dtype=np.float64)
    score = np.ones(cap, dtype=np.float64)
    exhausted = np.zeros(cap, dtype=np.uint8)
    unexp_mask = np.zeros(cap, dtype=np.uint64)
    nonexh_children = np.zeros(cap, dtype=np.int64)
    lane_ptr = np.zeros((cap, n_lanes), dtype=np.int64)
    gapped = np.zeros((cap, table.subzone_count), dtype=np.float64)

    mask = 0
    for l in range(n_lanes):
        if table.lane_start[l] < table.lane_start[l + 1]:
            mask |= 1 << l
    unexp_mask[0] = np.uint64(mask)
    gapped[0] = table.gapped0

    depth_lo = np.zeros(n + 1, dtype=np.float64)
    depth_hi = np.zeros(n + 1, dtype=np.float64)
    depth_seen = np.zeros(n + 1, dtype=np.uint8)
    depth_seen[0] = 1
    glob = np.array([fifo_delay, fifo_delay], dtype=np.float64)

    best = np.array([fifo_delay], dtype=np.float64)
    best_path = np.array(list(fifo_idx), dtype=np.int64)

    log_cap = 4096 if budget_nodes is None else min(budget_nodes, 4096)
    log_cap = max(log_cap, _CHUNK)
    log_best = np.empty(log_cap, dtype=np.float64)
    log_nodes = np.empty(log_cap, dtype=np.int64)
    elapsed_marks: list[tuple[int, float]] = []

    roll_order = np.empty(max(n, 1), dtype=np.int64)
    roll_ptrs = np.empty(n_lanes, dtype=np.int64)
    roll_gapped = np.empty(table.subzone_count, dtype=np.float64)

    policy = (
        _kernels.POLICY_HEURISTIC
        if config.rollout_policy == "heuristic"
        else _kernels.POLICY_RANDOM
    )
    dom = table.dom if table.dom is not None else np.zeros((1, 1), dtype=np.uint8)
    rng = np.array([config.rng_seed & _U64], dtype=np.uint64)
    state = np.array([1, 0, 0], dtype=np.int64)

    start = time.perf_counter()
    while True:
        chunk = _CHUNK
        if budget_nodes is not None:
            chunk = min(chunk, budget_nodes - int(state[_kernels.S_ITERS]))
            if chunk <= 0:
                break
        if int(state[_kernels.S_ITERS]) + chunk > log_cap:
            log_cap = max(log_cap * 2, int(state[_kernels.S_ITERS]) + chunk)
            log_best = _grow(log_best, log_cap)
            log_nodes = _grow(log_nodes, log_cap)
        status = _kernels.mcts_chunk(
            chunk,
            n,
            n_lanes,
            table.lane_start,
            table.lane_seq,
            table.lane_of,
            table.route_start,
            table.route_sub,
            table.route_off,
            table.tmin,
            table.gap_after,
            dom,
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
            depth_lo,
            depth_hi,
            depth_seen,
            glob,
            best,
            best_path,
            log_best,
            log_nodes,
            roll_order,
            roll_ptrs,
            roll_gapped,
            config.c,
            config.omega,
            policy,
            config.rollouts_per_expansion,
            rng,
            state,
        )
        now = time.perf_counter() - start
        elapsed_marks.append((int(state[_kernels.S_ITERS]), now))
        if status == _kernels.STATUS_FULL:
            cap *= 2
            parent = _grow(parent, cap)
            choice = _grow(choice, cap)
            depth = _grow(depth, cap)
            first_child = _grow(first_child, cap)
            last_child = _grow(last_child, cap)
            next_sibling = _grow(next_sibling, cap)
            visits = _grow(visits, cap)
            jbar = _grow(jbar, cap)
            jhat = _grow(jhat, cap)
            score = _grow(score, cap)
            exhausted = _grow(exhausted, cap)
            unexp_mask = _grow(unexp_mask, cap)
            nonexh_children = _grow(nonexh_children, cap)
            lane_ptr = _grow(lane_ptr, cap)
            gapped = _grow(gapped, cap)
            continue
        if status == _kernels.STATUS_INTERNAL:
            raise RuntimeError("search tree bookkeeping corrupted")
        if status == _kernels.STATUS_EXHAUSTED:
            break
        if config.budget_time is not None and now >= config.budget_time:
            break
        if budget_nodes is not None and int(state[_kernels.S_ITERS]) >= budget_nodes:
            break
    elapsed = time.perf_counter() - start

    iters = int(state[_kernels.S_ITERS])
    iterations: list[tuple[int, float, int, float]] = []
    mark_i = 0
    for it in range(iters):
        while mark_i < len(elapsed_marks) and elapsed_marks[mark_i][0] <= it:
            mark_i += 1
        t_mark = elapsed_marks[min(mark_i, len(elapsed_marks) - 1)][1]
        iterations.append((it + 1, float(log_best[it]), int(log_nodes[it]), t_mark))

    node_count = int(state[_kernels.S_NODES])
    tree = None
    if config.retain_tree:
        tree = _tree_from_arrays(
            table,
            node_count,
            parent,
            choice,
            depth,
            visits,
            jbar,
            jhat,
            score,
            exhausted,
            unexp_mask,
            lane_ptr,
        )
    return {
        "best_delay": float(best[0]),
        "best_path": [int(i) for i in best_path],
        "nodes_expanded": node_count - 1,
        "rollouts": int(state[_kernels.S_ROLLOUTS]),
        "elapsed": elapsed,
        "iterations": iterations,
        "tree": tree,
    }


def _tree_from_arrays(
    table, node_count, parent, choice, depth, visits, jbar, jhat, score,
    exhausted, unexp_mask, lane_ptr,
) -> TreeNode:
    nodes: list[TreeNode] = []
    for i in range(node_count):
        if i == 0:
            order: tuple[str, ...] = ()
        else:
            order = nodes[parent[i]].order + (table.ids[choice[i]],)
        unexpanded = []
        m = int(unexp_mask[i])
        for l in range(table.n_lanes):
            if m & (1 << l):
                unexpanded.append(
                    table.ids[table.lane_seq[table.lane_start[l] + lane_ptr[i, l]]]
                )
        node = TreeNode(
            order=order,
            visits=int(visits[i]),
            own_delay=float(jbar[i]),
            best_descendant_delay=float(jhat[i]),
            score=float(score[i]),
            unexpanded=unexpanded,
            exhausted=bool(exhausted[i]),
        )
        nodes.append(node)
        if i > 0:
            nodes[parent[i]].children.append(node)
    return nodes[0]


# --- pure-Python reference engine ------------------------------------------


class _SplitMix:
    """splitmix64 with the same stream as the compiled kernels."""

    __slots__ = ("state",)

    def __init__(self, seed: int) -> None:
        self.state = seed & _U64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _U64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _U64
        z = ((z ^ (z >> 27)) * _MIX2) & _U64
        return z ^ (z >> 31)

    def below(self, k: int) -> int:
        return (self.next_u64() >> 33) % k


class _PyNode:
    __slots__ = (
        "parent",
        "choice",
        "depth",
        "children",
        "visits",
        "own_delay",
        "best_descendant_delay",
        "score",
        "exhausted",
        "unexp_lanes",
        "nonexh_children",
        "lane_ptr",
        "gapped",
    )

    def __init__(self, parent, choice, depth, lane_ptr, gapped):
        self.parent = parent
        self.choice = choice
        self.depth = depth
        self.children: list[_PyNode] = []
        self.visits = 0
        self.own_delay = 0.0
        self.best_descendant_delay = float("inf")
        self.score = 1.0
        self.exhausted = False
        self.unexp_lanes: list[int] = []
        self.nonexh_children = 0
        self.lane_ptr = lane_ptr
        self.gapped = gapped


def _entry_py(table: _ScenarioTable, veh: int, gapped: list[float]) -> float:
    t = table.tmin[veh]
    for k in range(table.route_start[veh], table.route_start[veh + 1]):
        v = gapped[table.route_sub[k]] - table.route_off[k]
        if v > t:
            t = v
    return t


def _occupy_py(table: _ScenarioTable, veh: int, entry: float, gapped: list[float]) -> None:
    g = table.gap_after[veh]
    for k in range(table.route_start[veh], table.route_start[veh + 1]):
        gapped[table.route_sub[k]] = entry + table.route_off[k] + g


def _rollout_py(
    table: _ScenarioTable,
    policy: int,
    rng: _SplitMix,
    ptrs: list[int],
    gapped: list[float],
    start_delay: float,
) -> tuple[float, list[int]]:
    delay = start_delay
    fronts: list[int] = []
    for l in range(table.n_lanes):
        if table.lane_start[l] + ptrs[l] < table.lane_start[l + 1]:
            fronts.append(int(table.lane_seq[table.lane_start[l] + ptrs[l]]))
    order: list[int] = []
    dom = table.dom
    nf = len(fronts)
    while nf > 0:
        pick_pos = -1
        if policy == _kernels.POLICY_HEURISTIC:
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
            pick_pos = rng.below(nf) if nf > 1 else 0
        veh = fronts[pick_pos]
        entry = _entry_py(table, veh, gapped)
        delay += entry - table.tmin[veh]
        _occupy_py(table, veh, entry, gapped)
        order.append(veh)
        l = table.lane_of[veh]
        ptrs[l] += 1
        if table.lane_start[l] + ptrs[l] < table.lane_start[l + 1]:
            fronts[pick_pos] = int(table.lane_seq[table.lane_start[l] + ptrs[l]])
        else:
            fronts[pick_pos] = fronts[nf - 1]
            fronts.pop()
            nf -= 1
    return delay, order


def _run_python_engine(
    table: _ScenarioTable,
    config: MctsConfig,
    fifo_delay: float,
    fifo_idx: Sequence[int],
):
    n, n_lanes = table.n, table.n_lanes
    rng = _SplitMix(config.rng_seed)
    norm = DelayNormalizer()
    norm.register_partial(0, 0.0)
    norm.register_complete(fifo_delay)
    best_delay = fifo_delay
    best_path = list(fifo_idx)
    policy = (
        _kernels.POLICY_HEURISTIC
        if config.rollout_policy == "heuristic"
        else _kernels.POLICY_RANDOM
    )

    root = _PyNode(None, -1, 0, [0] * n_lanes, [float(x) for x in table.gapped0])
    root.unexp_lanes = [
        l for l in range(n_lanes) if table.lane_start[l] < table.lane_start[l + 1]
    ]
    rollouts = 0
    nodes = 1
    iterations: list[tuple[int, float, int, float]] = []
    start = time.perf_counter()
    it = 0
    while True:
        if root.exhausted:
            break
        if config.budget_nodes is not None and it >= config.budget_nodes:
            break
        if (
            config.budget_time is not None
            and time.perf_counter() - start >= config.budget_time
        ):
            break
        cur = root
        while not cur.unexp_lanes:
            cur = ucb1_select(cur, config.c)
        # unexp_lanes stays sorted ascending, mirroring the kernel's bit scan
        lanes = cur.unexp_lanes
        pick = rng.below(len(lanes)) if len(lanes) > 1 else 0
        lane = lanes[pick]
        cur.unexp_lanes = lanes[:pick] + lanes[pick + 1 :]
        veh = int(table.lane_seq[table.lane_start[lane] + cur.lane_ptr[lane]])

        child = _PyNode(
            cur, veh, cur.depth + 1, list(cur.lane_ptr), list(cur.gapped)
        )
        child.lane_ptr[lane] += 1
        entry = _entry_py(table, veh, child.gapped)
        _occupy_py(table, veh, entry, child.gapped)
        child.own_delay = cur.own_delay + (entry - table.tmin[veh])
        cur.children.append(child)
        nodes += 1
        norm.register_partial(child.depth, child.own_delay)
        child.unexp_lanes = [
            l
            for l in range(n_lanes)
            if table.lane_start[l] + child.lane_ptr[l] < table.lane_start[l + 1]
        ]

        iter_val = float("inf")
        if not child.unexp_lanes:
            child.exhausted = True
            iter_val = child.own_delay
            if iter_val < best_delay:
                best_delay = iter_val
                best_path = _path_of(child)
        else:
            cur.nonexh_children += 1
            for _ in range(config.rollouts_per_expansion):
                val, tail = _rollout_py(
                    table,
                    policy,
                    rng,
                    list(child.lane_ptr),
                    list(child.gapped),
                    child.own_delay,
                )
                rollouts += 1
                norm.register_complete(val)
                if val < iter_val:
                    iter_val = val
                if val < best_delay:
                    best_delay = val
                    best_path = _path_of(child) + tail
        if iter_val != float("inf"):
            norm.register_complete(iter_val)

        node = child
        while node is not None:
            node.visits += 1
            if iter_val < node.best_descendant_delay:
                node.best_descendant_delay = iter_val
            node.score = node_score(
                node.own_delay,
                node.best_descendant_delay,
                node.depth,
                config.omega,
                norm,
            )
            node = node.parent

        if child.exhausted:
            node = cur
            while (
                node is not None
                and not node.unexp_lanes
                and node.nonexh_children == 0
                and not node.exhausted
            ):
                node.exhausted = True
                if node.parent is not None:
                    node.parent.nonexh_children -= 1
                node = node.parent

        it += 1
        iterations.append((it, best_delay, nodes - 1, time.perf_counter() - start))

    tree = _tree_from_pynodes(table, root) if config.retain_tree else None
    return {
        "best_delay": best_delay,
        "best_path": best_path,
        "nodes_expanded": nodes - 1,
        "rollouts": rollouts,
        "elapsed": time.perf_counter() - start,
        "iterations": iterations,
        "tree": tree,
    }


def _path_of(node: _PyNode) -> list[int]:
    path: list[int] = []
    while node.parent is not None:
        path.append(node.choice)
        node = node.parent
    path.reverse()
    return path


def _tree_from_pynodes(table: _ScenarioTable, root: _PyNode) -> TreeNode:
    def convert(node: _PyNode, order: tuple[str, ...]) -> TreeNode:
        unexpanded = [
            table.ids[table.lane_seq[table.lane_start[l] + node.lane_ptr[l]]]
            for l in sorted(node.unexp_lanes)
        ]
        out = TreeNode(
            order=order,
            visits=node.visits,
            own_delay=node.own_delay,
            best_descendant_delay=node.best_descendant_delay,
            score=node.score,
            unexpanded=unexpanded,
            exhausted=node.exhausted,
        )
        for child in node.children:
            out.children.append(convert(child, order + (table.ids[child.choice],)))
        return out

    return convert(root, ())


def mcts_search(
    vehicles: Sequence[Vehicle],
    model: IntersectionModel,
    gaps: SafetyGapTable,
    config: MctsConfig | None = None,
    seed_occupancy: OccupancyState | None = None,
    t_min: Mapping[str, float] | None = None,
) -> SearchReport:
    """Anytime search for a low-delay passing order.

    Seeds the best-so-far with the FIFO order, then iterates UCB1 selection,
    random expansion among lane fronts, rollout evaluation, and
    backpropagation of visit counts, best-descendant delays and scores. Stops
    when the node or time budget is exhausted, or when the whole tree has
    been expanded (at which point the result is exactly optimal).
    """
    vehicle_list = list(vehicles)
    if not vehicle_list:
        raise ValueError("mcts_search requires at least one vehicle")
    config = config or MctsConfig()
    config.validate()
    if t_min is None:
        t_min = earliest_entry_times(vehicle_list)

    need_dom = (
        config.rollout_policy == "heuristic" and config.rollouts_per_expansion > 0
    )
    table = _build_table(vehicle_list, model, gaps, t_min, seed_occupancy, need_dom)

    fifo = fifo_order(vehicle_list, model, t_min)
    fifo_sched = interpret_order(
        fifo.sequence, vehicle_list, model, gaps, seed_occupancy, t_min
    )
    fifo_idx = [table.index[vid] for vid in fifo.sequence]

    if config.engine == "kernel":
        raw = _run_kernel_engine(table, config, fifo_sched.total_delay, fifo_idx)
    else:
        raw = _run_python_engine(table, config, fifo_sched.total_delay, fifo_idx)

    best_ids = tuple(table.ids[i] for i in raw["best_path"])
    best_sched = interpret_order(
        best_ids, vehicle_list, model, gaps, seed_occupancy, t_min
    )
    if abs(best_sched.total_delay - raw["best_delay"]) > 1e-6 * max(
        1.0, abs(raw["best_delay"])
    ):
        raise RuntimeError(
            "engine best delay disagrees with order interpretation: "
            f"{raw['best_delay']} vs {best_sched.total_delay}"
        )
    return SearchReport(
        best_order=PassingOrder(best_ids, complete=True),
        best_delay=best_sched.total_delay,
        fifo_delay=fifo_sched.total_delay,
        nodes_expanded=raw["nodes_expanded"],
        rollouts=raw["rollouts"],
        elapsed=raw["elapsed"],
        iterations=raw["iterations"],
        tree_root=raw["tree"],
    )


def dump_tree(report: SearchReport) -> TreeDump:
    """DOT and JSON forms of a retained search tree."""
    root = report.tree_root
    if root is None:
        raise ValueError(
            "tree snapshot not retained; run the search with retain_tree=True"
        )

    lines = ["digraph searchtree {", '  node [shape=box, fontsize=9];']
    counter = [0]

    def emit(node: TreeNode) -> int:
        idx = counter[0]
        counter[0] += 1
        label = "".join(node.order) if node.order else "(root)"
        jhat = (
            "inf"
            if node.best_descendant_delay == float("inf")
            else f"{node.best_descendant_delay:.3f}"
        )
        lines.append(
            f'  n{idx} [label="{label}\\nn={node.visits} Jp={node.own_delay:.3f} '
            f'Jb={jhat} Q={node.score:.3f}"];'
        )
        for child in node.children:
            cidx = emit(child)
            lines.append(f"  n{idx} -> n{cidx};")
        return idx

    def as_dict(node: TreeNode) -> dict:
        return {
            "order": list(node.order),
            "depth": len(node.order),
            "visits": node.visits,
            "own_delay": node.own_delay,
            "best_descendant_delay": (
                None
                if node.best_descendant_delay == float("inf")
                else node.best_descendant_delay
            ),
            "score": node.score,
            "exhausted": node.exhausted,
            "unexpanded": list(node.unexpanded),
            "children": [as_dict(c) for c in node.children],
        }

    emit(root)
    lines.append("}")
    return TreeDump(dot="\n".join(lines), tree=as_dict(root))
