"""Intersection geometry: legs, lanes, movements, conflict subzones and routes.

The conflict zone is modeled as a square grid of subzones (cells). Each
(lane, movement) pair maps to a Route: the ordered cells the vehicle sweeps,
with a crossing-time offset per cell measured from the moment the vehicle
enters the zone. A 4-leg intersection with k lanes per leg yields a 2k x 2k
grid (36 cells for the 3-lane layout, 4 for the single-lane layout).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

LEG_IDS = ("S", "E", "N", "W")

DEFAULT_LANE_WIDTH = 3.5
DEFAULT_CONTROL_ZONE_LENGTH = 300.0
DEFAULT_CROSSING_SPEED = {"straight": 12.0, "left": 8.0, "right": 6.0}
DEFAULT_GAPS = {"straight": 1.5, "left": 2.0, "right": 1.5}

# sampling resolution (radians) used to rasterize turn arcs onto the grid
_ARC_STEP = 1e-4


class Movement(str, Enum):
    LEFT = "left"
    STRAIGHT = "straight"
    RIGHT = "right"


class VehicleState(str, Enum):
    QUEUED = "queued"
    APPROACHING = "approaching"
    CROSSING = "crossing"
    DEPARTED = "departed"


class ModelConfigError(ValueError):
    """Raised when an intersection description is internally inconsistent."""


class UnknownLaneError(KeyError):
    """Raised when a lane id is not part of the model."""


@dataclass(frozen=True)
class Route:
    """Ordered conflict subzones for one lane plus per-subzone time offsets.

    offsets[k] is the travel time from zone entry to the entry of
    subzones[k] at the movement's constant crossing speed; offsets[0] == 0.
    total_time is the time to clear the final subzone.
    """

    subzones: tuple[int, ...]
    offsets: tuple[float, ...]
    total_time: float

    def __post_init__(self) -> None:
        if not self.subzones:
            raise ModelConfigError("route must cross at least one subzone")
        if len(self.subzones) != len(self.offsets):
            raise ModelConfigError("route subzones/offsets length mismatch")
        if self.offsets[0] != 0.0:
            raise ModelConfigError("first route offset must be 0")
        for a, b in zip(self.offsets, self.offsets[1:]):
            if b <= a:
                raise ModelConfigError("route offsets must strictly increase")
        if self.total_time <= self.offsets[-1]:
            raise ModelConfigError("route total_time must exceed last offset")


@dataclass(frozen=True)
class SafetyGapTable:
    """Minimum headway (s) required behind a vehicle on each movement."""

    gap: Mapping[Movement, float] = field(
        default_factory=lambda: {Movement(k): v for k, v in DEFAULT_GAPS.items()}
    )

    def __post_init__(self) -> None:
        for mov in Movement:
            if mov not in self.gap:
                raise ModelConfigError(f"missing safety gap for movement {mov.value!r}")
            if self.gap[mov] <= 0:
                raise ModelConfigError(f"safety gap for {mov.value!r} must be > 0")

    def __getitem__(self, movement: Movement) -> float:
        return self.gap[movement]

    def to_dict(self) -> dict[str, float]:
        return {m.value: self.gap[m] for m in Movement}


@dataclass
class Vehicle:
    """A controlled vehicle approaching (or inside) the intersection."""

    id: str
    lane: str
    movement: Movement
    distance_to_zone: float
    speed: float
    v_max: float = 15.0
    a_max: float = 3.0
    state: VehicleState = VehicleState.APPROACHING


@dataclass(frozen=True)
class IntersectionModel:
    """Immutable intersection description; safe to share across threads."""

    legs: int
    lanes_per_leg: int
    lane_width: float
    grid_size: int
    subzone_count: int
    lane_movement: Mapping[str, Movement]
    route_table: Mapping[str, Route]
    control_zone_length: float
    crossing_speed: Mapping[Movement, float]

    @property
    def lanes(self) -> tuple[str, ...]:
        return tuple(sorted(self.lane_movement))

    def to_dict(self) -> dict:
        """JSON-serializable view; feeding it back to build_intersection
        reproduces the model bit for bit."""
        return {
            "legs": self.legs,
            "lanes_per_leg": self.lanes_per_leg,
            "lane_width": self.lane_width,
            "control_zone_length": self.control_zone_length,
            "crossing_speed": {m.value: self.crossing_speed[m] for m in Movement},
            "lane_movements": {l: m.value for l, m in sorted(self.lane_movement.items())},
            "routes": {
                lane: {
                    "subzones": list(r.subzones),
                    "offsets": list(r.offsets),
                    "total_time": r.total_time,
                }
                for lane, r in sorted(self.route_table.items())
            },
        }


def _default_lane_movements(lanes_per_leg: int) -> dict[str, Movement]:
    if lanes_per_leg == 3:
        per_leg = [Movement.LEFT, Movement.STRAIGHT, Movement.RIGHT]
    else:
        per_leg = [Movement.STRAIGHT]
    return {
        f"{leg}{i}": mov for leg in LEG_IDS for i, mov in enumerate(per_leg)
    }


def _rotate_cell(row: int, col: int, n: int, quarter_turns: int) -> tuple[int, int]:
    # 90-degree counter-clockwise rotations about the grid center
    for _ in range(quarter_turns % 4):
        row, col = col, n - 1 - row
    return row, col


def _south_leg_path_cells(
    lane_index: int, movement: Movement, n: int, width: float
) -> tuple[list[tuple[int, int]], list[float]]:
    """Cells swept by a northbound vehicle entering in approach lane
    `lane_index` (0 = innermost), with the path distance at which each cell
    is first entered. Returns (cells, entry_distances)."""
    col = n // 2 + lane_index
    x_in = (col + 0.5) * width
    zone = n * width

    if movement is Movement.STRAIGHT:
        cells = [(row, col) for row in range(n)]
        dists = [row * width for row in range(n)]
        return cells, dists

    if movement is Movement.LEFT:
        # quarter circle centered on the SW corner of the zone, entering
        # northbound at x_in and exiting westbound at y = x_in
        radius = x_in
    else:
        # right turn hugs the SE corner; radius keeps it inside the corner cell
        radius = zone - x_in

    cells: list[tuple[int, int]] = []
    dists: list[float] = []
    seen: set[tuple[int, int]] = set()
    steps = int(math.pi / 2 / _ARC_STEP)
    for k in range(steps + 1):
        phi = min(k * _ARC_STEP, math.pi / 2)
        if movement is Movement.LEFT:
            x = radius * math.cos(phi)
            y = radius * math.sin(phi)
        else:
            x = zone - radius * math.cos(phi)
            y = radius * math.sin(phi)
        row = min(int(y / width), n - 1)
        col_k = min(int(x / width), n - 1)
        if x >= zone or y >= zone:
            continue
        cell = (row, col_k)
        if cell not in seen:
            seen.add(cell)
            cells.append(cell)
            dists.append(radius * phi)
    return cells, dists


def _build_route(
    lane_index: int, movement: Movement, quarter_turns: int, n: int, width: float, speed: float
) -> Route:
    cells, dists = _south_leg_path_cells(lane_index, movement, n, width)
    if movement is Movement.STRAIGHT:
        path_len = n * width
    else:
        radius = (n // 2 + lane_index + 0.5) * width
        if movement is Movement.RIGHT:
            radius = n * width - radius
        path_len = radius * math.pi / 2
    subzones = []
    for row, col in cells:
        r, c = _rotate_cell(row, col, n, quarter_turns)
        subzones.append(r * n + c)
    offsets = tuple(d / speed for d in dists)
    return Route(tuple(subzones), offsets, total_time=path_len / speed)


def build_intersection(config: Mapping | None = None) -> IntersectionModel:
    """Build an IntersectionModel from a config mapping (parsed JSON).

    Recognized keys: legs, lanes_per_leg, lane_width, control_zone_length,
    crossing_speed {movement: m/s}, lane_movements {lane: movement},
    routes {lane: {subzones, offsets, total_time?}}. Missing keys fall back
    to the defaults documented in the README.
    """
    cfg = dict(config or {})
    legs = int(cfg.get("legs", 4))
    lanes_per_leg = int(cfg.get("lanes_per_leg", 3))
    lane_width = float(cfg.get("lane_width", DEFAULT_LANE_WIDTH))
    control_zone_length = float(cfg.get("control_zone_length", DEFAULT_CONTROL_ZONE_LENGTH))

    if legs != 4:
        raise ModelConfigError("only 4-leg intersections are supported")
    if lanes_per_leg not in (1, 3):
        raise ModelConfigError("lanes_per_leg must be 1 or 3")
    if lane_width <= 0 or control_zone_length <= 0:
        raise ModelConfigError("lane_width and control_zone_length must be > 0")

    speed_cfg = dict(DEFAULT_CROSSING_SPEED)
    speed_cfg.update(cfg.get("crossing_speed", {}))
    crossing_speed: dict[Movement, float] = {}
    for key, value in speed_cfg.items():
        try:
            mov = Movement(key)
        except ValueError:
            raise ModelConfigError(f"unknown movement {key!r} in crossing_speed") from None
        if value <= 0:
            raise ModelConfigError(f"crossing speed for {key!r} must be > 0")
        crossing_speed[mov] = float(value)

    lane_movement: dict[str, Movement] = _default_lane_movements(lanes_per_leg)
    for lane, raw in cfg.get("lane_movements", {}).items():
        if lane not in lane_movement:
            raise ModelConfigError(f"lane_movements references unknown lane {lane!r}")
        try:
            lane_movement[lane] = Movement(raw)
        except ValueError:
            raise ModelConfigError(f"lane {lane!r} mapped to unknown movement {raw!r}") from None

    n = 2 * lanes_per_leg
    subzone_count = n * n

    route_table: dict[str, Route] = {}
    for quarter_turns, leg in enumerate(LEG_IDS):
        for i in range(lanes_per_leg):
            lane = f"{leg}{i}"
            mov = lane_movement[lane]
            route_table[lane] = _build_route(
                i, mov, quarter_turns, n, lane_width, crossing_speed[mov]
            )

    for lane, raw in cfg.get("routes", {}).items():
        if lane not in lane_movement:
            raise ModelConfigError(f"routes section references unknown lane {lane!r}")
        subzones = tuple(int(z) for z in raw["subzones"])
        offsets = tuple(float(t) for t in raw["offsets"])
        mov = lane_movement[lane]
        total = raw.get("total_time")
        if total is None:
            total = offsets[-1] + lane_width / crossing_speed[mov] if offsets else 0.0
        route_table[lane] = Route(subzones, offsets, float(total))

    for lane, route in route_table.items():
        for z in route.subzones:
            if not 0 <= z < subzone_count:
                raise ModelConfigError(
                    f"route for lane {lane!r} references nonexistent subzone {z}"
                )

    return IntersectionModel(
        legs=legs,
        lanes_per_leg=lanes_per_leg,
        lane_width=lane_width,
        grid_size=n,
        subzone_count=subzone_count,
        lane_movement=lane_movement,
        route_table=route_table,
        control_zone_length=control_zone_length,
        crossing_speed=crossing_speed,
    )


def route_for(model: IntersectionModel, lane: str) -> Route:
    """Route of the given lane; raises UnknownLaneError for foreign ids."""
    try:
        return model.route_table[lane]
    except KeyError:
        raise UnknownLaneError(lane) from None


def validate_scenario(model: IntersectionModel, vehicles: Iterable[Vehicle]) -> list[str]:
    """Check a static vehicle set against the model.

    Returns a list of human-readable violations; an empty list means ok.
    """
    violations: list[str] = []
    seen_ids: set[str] = set()
    by_lane: dict[str, list[Vehicle]] = {}
    for veh in vehicles:
        if veh.id in seen_ids:
            violations.append(f"duplicate id {veh.id!r}")
        seen_ids.add(veh.id)
        if veh.lane not in model.lane_movement:
            violations.append(f"vehicle {veh.id!r} on unknown lane {veh.lane!r}")
            continue
        expected = model.lane_movement[veh.lane]
        if veh.movement is not expected:
            violations.append(
                f"vehicle {veh.id!r} declares movement {veh.movement.value!r} "
                f"but lane {veh.lane!r} carries {expected.value!r}"
            )
        if veh.distance_to_zone < 0 and veh.state is VehicleState.APPROACHING:
            violations.append(f"vehicle {veh.id!r} has negative distance_to_zone")
        if not 0 <= veh.speed <= veh.v_max:
            violations.append(f"vehicle {veh.id!r} speed outside [0, v_max]")
        by_lane.setdefault(veh.lane, []).append(veh)
    for lane, vs in by_lane.items():
        dists = [v.distance_to_zone for v in vs]
        if len(set(dists)) != len(dists):
            violations.append(f"same-lane distance tie on lane {lane!r}")
    return violations
