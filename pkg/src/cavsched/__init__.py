"""Cooperative passing-order scheduling for automated vehicles at an
unsignalized intersection."""

from .model import (
    IntersectionModel,
    ModelConfigError,
    Movement,
    Route,
    SafetyGapTable,
    UnknownLaneError,
    Vehicle,
    VehicleState,
    build_intersection,
    route_for,
    validate_scenario,
)
from .schedule import (
    InvalidPassingOrder,
    KinematicLimits,
    OccupancyState,
    ScheduleResult,
    earliest_entry_times,
    improvement_rate,
    interpret_order,
    min_arrival_time,
    total_delay,
)
from .search import (
    DelayNormalizer,
    EnumerationCapExceeded,
    EnumerationResult,
    MctsConfig,
    PassingOrder,
    SearchReport,
    TreeDump,
    TreeNode,
    count_orders,
    dump_tree,
    enumerate_optimal,
    fifo_order,
    mcts_search,
    node_score,
    rollout_heuristic,
    rollout_random,
    ucb1_select,
    valid_children,
)

__version__ = "0.1.0"
