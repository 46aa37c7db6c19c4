"""Discrete-time traffic simulator around the intersection scheduler.

Vehicles arrive per lane as Poisson processes, wait in per-lane point queues
at the control-zone boundary, enter at maximum speed once the predecessor has
opened enough space, and then travel at exactly the constant speed needed to
hit their assigned conflict-zone entry time. Every replan period the vehicles
inside the conflict zone are frozen into the occupancy state and all
approaching vehicles are rescheduled by the selected strategy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .model import (
    IntersectionModel,
    Movement,
    SafetyGapTable,
    Vehicle,
    VehicleState,
    route_for,
)
from .schedule import (
    KinematicLimits,
    OccupancyState,
    ScheduleResult,
    improvement_rate,
    interpret_order,
    min_arrival_time,
)
from .search import (
    EnumerationCapExceeded,
    MctsConfig,
    _SplitMix,
    enumerate_optimal,
    fifo_order,
    mcts_search,
)

log = logging.getLogger(__name__)

_EPS = 1e-9
# hold-off distance before the stop line while burning schedule slack
_LINE_BUFFER = 0.5


@dataclass
class ScenarioConfig:
    model: IntersectionModel
    arrival_rate: float | Mapping[str, float] = 300.0  # veh/(lane*h)
    horizon: float = 1200.0
    replan_period: float = 2.0
    time_step: float = 0.1
    rng_seed: int = 0
    kinematics: KinematicLimits = field(default_factory=KinematicLimits)
    min_entry_gap: float = 10.0
    gaps: SafetyGapTable = field(default_factory=SafetyGapTable)
    # "eager": cruise at v_max and burn schedule slack near the stop line,
    # which keeps earliest-arrival estimates tight across replans;
    # "required": hold the constant speed that meets the assigned time.
    approach_profile: str = "eager"

    def validate(self) -> None:
        if self.approach_profile not in ("eager", "required"):
            raise ValueError("approach_profile must be 'eager' or 'required'")
        if self.horizon <= 0:
            raise ValueError("horizon must be > 0")
        if self.time_step <= 0:
            raise ValueError("time_step must be > 0")
        ratio = self.replan_period / self.time_step
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("replan_period must be a positive multiple of time_step")
        for lane, rate in self._lane_rates().items():
            if rate < 0:
                raise ValueError(f"arrival rate for lane {lane!r} must be >= 0")
        if self.min_entry_gap <= 0:
            raise ValueError("min_entry_gap must be > 0")

    def _lane_rates(self) -> dict[str, float]:
        lanes = sorted(self.model.lane_movement)
        if isinstance(self.arrival_rate, Mapping):
            return {lane: float(self.arrival_rate.get(lane, 0.0)) for lane in lanes}
        return {lane: float(self.arrival_rate) for lane in lanes}


@dataclass
class Metrics:
    average_delay: float
    total_delay: float
    throughput: int
    eta: float
    replan_count: int
    nodes_per_replan: dict[str, float]
    generated: int
    trace: list[dict] | None = None

    def to_row(self) -> dict[str, object]:
        return {
            "average_delay": self.average_delay,
            "total_delay": self.total_delay,
            "throughput": self.throughput,
            "eta": self.eta,
            "replan_count": self.replan_count,
            "nodes_mean": self.nodes_per_replan.get("mean", 0.0),
            "nodes_max": self.nodes_per_replan.get("max", 0.0),
            "generated": self.generated,
        }


@dataclass
class SimState:
    clock: float = 0.0
    pending: dict[str, list[tuple[float, str]]] = field(default_factory=dict)
    queues: dict[str, list[str]] = field(default_factory=dict)
    active: dict[str, Vehicle] = field(default_factory=dict)
    crossing: dict[str, Vehicle] = field(default_factory=dict)
    committed: OccupancyState = field(default_factory=OccupancyState)
    assigned_entry: dict[str, float] = field(default_factory=dict)
    realized_entry: dict[str, float] = field(default_factory=dict)
    spawn_time: dict[str, float] = field(default_factory=dict)
    enter_time: dict[str, float] = field(default_factory=dict)
    depart_time: dict[str, float] = field(default_factory=dict)
    lane_last_entered: dict[str, str] = field(default_factory=dict)
    vehicles: dict[str, Vehicle] = field(default_factory=dict)
    departed: list[str] = field(default_factory=list)
    generated: int = 0

    def in_system(self) -> int:
        queued = sum(len(q) for q in self.queues.values())
        return queued + len(self.active) + len(self.crossing) + len(self.departed)


class SchedulerConsistencyError(RuntimeError):
    """A vehicle is about to enter the conflict zone off-schedule."""


# ---------------------------------------------------------------------------
# strategies


class FifoStrategy:
    name = "fifo"

    def plan(self, vehicles, model, gaps, t_min, occupancy, rng_seed):
        order = fifo_order(vehicles, model, t_min)
        sched = interpret_order(order.sequence, vehicles, model, gaps, occupancy, t_min)
        return sched, {"nodes": 0}


class MctsStrategy:
    name = "mcts"

    def __init__(self, config: MctsConfig | None = None) -> None:
        self.config = config or MctsConfig(budget_time=None)

    def plan(self, vehicles, model, gaps, t_min, occupancy, rng_seed):
        cfg = replace(self.config, rng_seed=rng_seed, retain_tree=False)
        report = mcts_search(vehicles, model, gaps, cfg, occupancy, t_min)
        sched = interpret_order(
            report.best_order.sequence, vehicles, model, gaps, occupancy, t_min
        )
        return sched, {"nodes": report.nodes_expanded}


class OracleStrategy:
    name = "oracle"

    def __init__(self, cap: int = 1_000_000) -> None:
        self.cap = cap

    def plan(self, vehicles, model, gaps, t_min, occupancy, rng_seed):
        result = enumerate_optimal(
            vehicles, model, gaps, cap=self.cap, seed_occupancy=occupancy, t_min=t_min
        )
        sched = interpret_order(
            result.best_order.sequence, vehicles, model, gaps, occupancy, t_min
        )
        return sched, {"nodes": result.order_count}


def make_strategy(
    name: str, mcts_config: MctsConfig | None = None, oracle_cap: int = 1_000_000
):
    if name == "fifo":
        return FifoStrategy()
    if name == "mcts":
        return MctsStrategy(mcts_config)
    if name == "oracle":
        return OracleStrategy(oracle_cap)
    raise ValueError(f"unknown strategy {name!r}")


# ---------------------------------------------------------------------------
# arrivals and scenario generation


def generate_arrivals(config: ScenarioConfig) -> dict[str, np.ndarray]:
    """Per-lane Poisson arrival times over the horizon (exponential
    interarrivals with mean 3600/rate seconds); deterministic per seed."""
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    events: dict[str, np.ndarray] = {}
    for lane, rate in sorted(config._lane_rates().items()):
        times = []
        if rate > 0:
            mean = 3600.0 / rate
            t = rng.exponential(mean)
            while t <= config.horizon:
                times.append(t)
                t += rng.exponential(mean)
        events[lane] = np.array(times, dtype=np.float64)
    return events


def random_scenario(
    model: IntersectionModel,
    count: int,
    rng,
    kinematics: KinematicLimits | None = None,
    min_spacing: float = 12.0,
    max_spacing: float = 55.0,
    first_distance: tuple[float, float] = (15.0, 45.0),
    speed_fraction: tuple[float, float] = (0.4, 1.0),
    balanced: bool = False,
) -> list[Vehicle]:
    """A static snapshot of `count` vehicles approaching the zone.

    Lanes are drawn uniformly (or round-robin when balanced=True, which gives
    equal per-lane counts whenever count divides evenly); same-lane vehicles
    keep at least min_spacing between them.
    """
    kin = kinematics or KinematicLimits()
    lanes = sorted(model.lane_movement)
    chosen: list[str] = []
    if balanced:
        for i in range(count):
            chosen.append(lanes[i % len(lanes)])
    else:
        chosen = [lanes[rng.randrange(len(lanes))] for _ in range(count)]
    last_d: dict[str, float] = {}
    vehicles = []
    for i, lane in enumerate(chosen):
        if lane in last_d:
            d = last_d[lane] + rng.uniform(min_spacing, max_spacing)
        else:
            d = rng.uniform(*first_distance)
        last_d[lane] = d
        speed = kin.v_max * rng.uniform(*speed_fraction)
        vehicles.append(
            Vehicle(
                id=f"v{i:04d}",
                lane=lane,
                movement=model.lane_movement[lane],
                distance_to_zone=d,
                speed=speed,
                v_max=kin.v_max,
                a_max=kin.a_max,
            )
        )
    return vehicles


# ---------------------------------------------------------------------------
# core loop


def init_state(config: ScenarioConfig, arrivals: Mapping[str, np.ndarray]) -> SimState:
    state = SimState()
    events: list[tuple[float, str]] = []
    for lane in sorted(arrivals):
        for t in arrivals[lane]:
            events.append((float(t), lane))
    events.sort()
    state.generated = len(events)
    state.pending = {lane: [] for lane in sorted(config.model.lane_movement)}
    for i, (t, lane) in enumerate(events):
        state.pending[lane].append((t, f"v{i:05d}"))
    return state


def step(state: SimState, config: ScenarioConfig) -> SimState:
    """Advance the simulation by one time step (mutates and returns state)."""
    dt = config.time_step
    t_next = state.clock + dt
    model = config.model
    kin = config.kinematics

    # arrivals join their lane's point queue
    for lane in sorted(state.pending):
        pend = state.pending[lane]
        while pend and pend[0][0] <= t_next + _EPS:
            t_arr, vid = pend.pop(0)
            veh = Vehicle(
                id=vid,
                lane=lane,
                movement=model.lane_movement[lane],
                distance_to_zone=model.control_zone_length,
                speed=kin.v_max,
                v_max=kin.v_max,
                a_max=kin.a_max,
                state=VehicleState.QUEUED,
            )
            state.vehicles[vid] = veh
            state.spawn_time[vid] = t_arr
            state.queues.setdefault(lane, []).append(vid)

    # point-queue dequeue: front enters once the predecessor has moved
    # min_entry_gap into the control zone
    for lane in sorted(state.queues):
        queue = state.queues[lane]
        if not queue:
            continue
        pred_id = state.lane_last_entered.get(lane)
        clear = True
        if pred_id is not None and pred_id in state.active:
            pred = state.active[pred_id]
            clear = (
                pred.distance_to_zone
                <= model.control_zone_length - config.min_entry_gap + _EPS
            )
        if clear:
            vid = queue.pop(0)
            veh = state.vehicles[vid]
            veh.state = VehicleState.APPROACHING
            veh.distance_to_zone = model.control_zone_length
            veh.speed = kin.v_max
            state.active[vid] = veh
            state.enter_time[vid] = t_next
            state.lane_last_entered[lane] = vid

    # approach motion toward the assigned entry time
    eager = config.approach_profile == "eager"
    promotions: list[tuple[str, float]] = []
    for vid, veh in state.active.items():
        assigned = state.assigned_entry.get(vid)
        d = veh.distance_to_zone
        if assigned is None:
            v = veh.v_max
        else:
            tau = assigned - state.clock
            if tau <= _EPS:
                v = veh.v_max
            else:
                v = d / tau
            if v > veh.v_max * (1 + 1e-6):
                raise SchedulerConsistencyError(
                    f"vehicle {vid} would need speed {v:.3f} > v_max to make "
                    f"its assigned entry time"
                )
            v = min(max(v, 0.0), veh.v_max)
            if eager and tau > dt:
                # close in at full speed but never cross the line early;
                # the final-approach step above lands exactly on `assigned`
                v = min(veh.v_max, max(v, (d - _LINE_BUFFER) / dt))
                v = min(max(v, 0.0), veh.v_max)
        moved = v * dt
        if moved >= d - _EPS and v > 0:
            if assigned is None:
                raise SchedulerConsistencyError(
                    f"vehicle {vid} reached the conflict zone without a schedule"
                )
            promotions.append((vid, state.clock + d / v))
        else:
            veh.distance_to_zone = d - moved
            veh.speed = v

    for vid, realized in promotions:
        veh = state.active.pop(vid)
        veh.distance_to_zone = 0.0
        veh.state = VehicleState.CROSSING
        veh.speed = config.model.crossing_speed[veh.movement]
        state.crossing[vid] = veh
        state.realized_entry[vid] = realized
        route = route_for(model, veh.lane)
        for z, off in zip(route.subzones, route.offsets):
            state.committed.observe(z, realized + off, veh.movement)
        state.depart_time[vid] = realized + route.total_time

    # retire vehicles that cleared their final subzone
    for vid in sorted(state.crossing):
        if state.depart_time[vid] <= t_next + _EPS:
            veh = state.crossing.pop(vid)
            veh.state = VehicleState.DEPARTED
            state.departed.append(vid)

    state.clock = t_next
    return state


def replan(
    state: SimState,
    strategy,
    model: IntersectionModel,
    gaps: SafetyGapTable,
    config: ScenarioConfig,
    rng_seed: int,
) -> dict:
    """Reschedule all approaching vehicles; crossing vehicles stay frozen in
    the committed occupancy. On strategy failure previous assignments are
    kept. Returns the strategy's info dict."""
    if not state.active:
        return {"nodes": 0}
    vehicles = [state.active[vid] for vid in sorted(state.active)]
    t_min = {
        v.id: state.clock
        + min_arrival_time(
            v.distance_to_zone, v.speed, KinematicLimits(v.v_max, v.a_max)
        )
        for v in vehicles
    }
    occupancy = state.committed.copy()
    try:
        sched, info = strategy.plan(vehicles, model, gaps, t_min, occupancy, rng_seed)
    except Exception:
        log.exception("replanning strategy %s failed; keeping previous plan", strategy.name)
        return {"nodes": 0, "failed": True}
    for vid, entry in sched.entry_time.items():
        if entry < t_min[vid] - 1e-6:
            raise SchedulerConsistencyError(
                f"strategy assigned {vid} an entry before its earliest arrival"
            )
        state.assigned_entry[vid] = entry
    return info


def _run_loop(config: ScenarioConfig, strategy, collect_trace: bool) -> Metrics:
    arrivals = generate_arrivals(config)
    state = init_state(config, arrivals)
    steps_total = int(round(config.horizon / config.time_step))
    replan_every = int(round(config.replan_period / config.time_step))
    seed_stream = _SplitMix(config.rng_seed ^ 0x5EED5EED)
    replan_count = 0
    nodes: list[int] = []
    for k in range(steps_total):
        if k % replan_every == 0:
            info = replan(
                state, strategy, config.model, config.gaps, config, seed_stream.next_u64()
            )
            replan_count += 1
            nodes.append(int(info.get("nodes", 0)))
        step(state, config)

    free_flow = config.model.control_zone_length / config.kinematics.v_max
    total_delay = 0.0
    for vid in state.departed:
        total_delay += state.realized_entry[vid] - (state.spawn_time[vid] + free_flow)
    throughput = len(state.departed)
    nodes_summary = {
        "mean": float(np.mean(nodes)) if nodes else 0.0,
        "max": float(np.max(nodes)) if nodes else 0.0,
        "total": float(np.sum(nodes)) if nodes else 0.0,
    }
    trace = None
    if collect_trace:
        trace = []
        has_departed = set(state.departed)
        for vid in sorted(state.vehicles):
            veh = state.vehicles[vid]
            trace.append(
                {
                    "vehicle": vid,
                    "lane": veh.lane,
                    "movement": veh.movement.value,
                    "spawn_time": state.spawn_time.get(vid),
                    "enter_time": state.enter_time.get(vid),
                    "assigned_entry": state.assigned_entry.get(vid),
                    "realized_entry": state.realized_entry.get(vid),
                    "depart_time": state.depart_time.get(vid)
                    if vid in has_departed or vid in state.crossing
                    else None,
                    "state": veh.state.value,
                    "delay": (
                        state.realized_entry[vid] - state.spawn_time[vid] - free_flow
                        if vid in state.realized_entry
                        else None
                    ),
                }
            )
    return Metrics(
        average_delay=total_delay / throughput if throughput else 0.0,
        total_delay=total_delay,
        throughput=throughput,
        eta=0.0,
        replan_count=replan_count,
        nodes_per_replan=nodes_summary,
        generated=state.generated,
        trace=trace,
    )


def run_experiment(
    config: ScenarioConfig, strategy, collect_trace: bool = False
) -> Metrics:
    """Simulate the full horizon under `strategy`. For non-FIFO strategies a
    paired FIFO run on the identical arrival stream provides the improvement
    rate eta."""
    config.validate()
    metrics = _run_loop(config, strategy, collect_trace)
    if getattr(strategy, "name", "") != "fifo":
        baseline = _run_loop(config, FifoStrategy(), False)
        metrics.eta = improvement_rate(baseline.total_delay, metrics.total_delay)
    return metrics
