"""Command-line front end: scenario configuration, experiment orchestration,
and plot-ready file emission.

Commands: search (static-scenario comparison of FIFO/MCTS/enumeration),
simulate (rolling-horizon traffic runs), enumerate (full solution histogram
and ranks), sweep (parameter grids), dump-tree (search-tree DOT/JSON export).
Every command echoes the effective configuration into the output directory;
re-running from that echo reproduces the outputs.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .model import (
    DEFAULT_GAPS,
    IntersectionModel,
    Movement,
    SafetyGapTable,
    Vehicle,
    build_intersection,
    validate_scenario,
)
from .schedule import KinematicLimits, improvement_rate, interpret_order
from .search import (
    EnumerationCapExceeded,
    MctsConfig,
    count_orders,
    dump_tree,
    enumerate_optimal,
    fifo_order,
    mcts_search,
    rank_of,
)
from .sim import Metrics, ScenarioConfig, make_strategy, random_scenario, run_experiment

DEFAULT_CONFIG: dict[str, Any] = {
    "model": {
        "legs": 4,
        "lanes_per_leg": 3,
        "lane_width": 3.5,
        "control_zone_length": 300.0,
        "crossing_speed": {"straight": 12.0, "left": 8.0, "right": 6.0},
        "lane_movements": {},
        "routes": {},
    },
    "gaps": dict(DEFAULT_GAPS),
    "kinematics": {"v_max": 15.0, "a_max": 3.0},
    "search": {
        "omega": 0.85,
        "c": 0.05,
        "budget_nodes": 1000,
        "budget_time": None,
        "rollout_policy": "heuristic",
        "rollouts_per_expansion": 1,
        "rng_seed": 0,
        "engine": "kernel",
    },
    "scenario": {
        "vehicles": [],
        "random": {
            "count": 30,
            "seed": 0,
            "balanced": False,
            "min_spacing": 12.0,
            "max_spacing": 55.0,
        },
    },
    "sim": {
        "rates": [300.0],
        "strategies": ["fifo", "mcts"],
        "horizon": 1200.0,
        "replan_period": 2.0,
        "time_step": 0.1,
        "rng_seed": 0,
        "min_entry_gap": 10.0,
        "oracle_cap": 1000000,
        "trace": False,
    },
    "enumerate": {"cap": 10000000, "bins": 200, "raw_delays": False},
    "sweep": {
        "omega": [0.85],
        "c": [0.05],
        "budgets": [],
        "scenario_count": 30,
        "scenario_seeds": [0, 1, 2, 3, 4],
        "jobs": 1,
    },
}


@dataclass
class RunSpec:
    command: str
    config_path: str | None
    overrides: list[str] = field(default_factory=list)
    output_dir: str = "out"
    format: str = "csv"


class ConfigError(ValueError):
    pass


def _deep_merge(base: dict, extra: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, Mapping):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_override_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_overrides(config: dict, overrides: Sequence[str]) -> dict:
    out = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        keys = path.split(".")
        node = out
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(f"override references unknown key {path!r}")
            node = node[key]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ConfigError(f"override references unknown key {path!r}")
        node[keys[-1]] = _parse_override_value(raw)
    return out


def load_config(spec: RunSpec) -> dict:
    file_cfg: dict = {}
    if spec.config_path is not None:
        path = Path(spec.config_path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must contain a JSON object")
    merged = _deep_merge(DEFAULT_CONFIG, file_cfg)
    return _apply_overrides(merged, spec.overrides)


def _build_model(config: Mapping) -> IntersectionModel:
    return build_intersection(config["model"])


def _build_gaps(config: Mapping) -> SafetyGapTable:
    return SafetyGapTable({Movement(k): float(v) for k, v in config["gaps"].items()})


def _build_kinematics(config: Mapping) -> KinematicLimits:
    kin = config["kinematics"]
    return KinematicLimits(v_max=float(kin["v_max"]), a_max=float(kin["a_max"]))


def _build_mcts_config(config: Mapping) -> MctsConfig:
    s = config["search"]
    return MctsConfig(
        c=float(s["c"]),
        omega=float(s["omega"]),
        budget_nodes=None if s["budget_nodes"] is None else int(s["budget_nodes"]),
        budget_time=None if s["budget_time"] is None else float(s["budget_time"]),
        rollout_policy=s["rollout_policy"],
        rollouts_per_expansion=int(s["rollouts_per_expansion"]),
        rng_seed=int(s["rng_seed"]),
        engine=s.get("engine", "kernel"),
    )


def _scenario_vehicles(
    config: Mapping, model: IntersectionModel, kin: KinematicLimits
) -> list[Vehicle]:
    import random as _random

    scen = config["scenario"]
    explicit = scen.get("vehicles") or []
    if explicit:
        vehicles = []
        for raw in explicit:
            lane = raw["lane"]
            movement = Movement(raw.get("movement", model.lane_movement[lane].value))
            vehicles.append(
                Vehicle(
                    id=str(raw["id"]),
                    lane=lane,
                    movement=movement,
                    distance_to_zone=float(raw["distance"]),
                    speed=float(raw["speed"]),
                    v_max=float(raw.get("v_max", kin.v_max)),
                    a_max=float(raw.get("a_max", kin.a_max)),
                )
            )
    else:
        rnd = scen["random"]
        rng = _random.Random(int(rnd["seed"]))
        vehicles = random_scenario(
            model,
            int(rnd["count"]),
            rng,
            kinematics=kin,
            min_spacing=float(rnd.get("min_spacing", 12.0)),
            max_spacing=float(rnd.get("max_spacing", 55.0)),
            balanced=bool(rnd.get("balanced", False)),
        )
    violations = validate_scenario(model, vehicles)
    if violations:
        raise ConfigError("invalid scenario: " + "; ".join(violations))
    if not vehicles:
        raise ConfigError("scenario contains no vehicles")
    return vehicles


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in columns})


def _emit_table(
    out_dir: Path, name: str, rows: Sequence[Mapping[str, Any]], columns: Sequence[str], fmt: str
) -> list[Path]:
    paths = [out_dir / f"{name}.csv"]
    _write_csv(paths[0], rows, columns)
    if fmt == "json":
        paths.append(out_dir / f"{name}.json")
        _write_json(paths[-1], [dict(r) for r in rows])
    return paths


def _echo_config(out_dir: Path, config: dict) -> None:
    _write_json(out_dir / "effective_config.json", config)


# ---------------------------------------------------------------------------
# commands


def cmd_search(spec: RunSpec, config: dict) -> int:
    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = _build_model(config)
    gaps = _build_gaps(config)
    kin = _build_kinematics(config)
    vehicles = _scenario_vehicles(config, model, kin)
    mcts_cfg = _build_mcts_config(config)

    fifo = fifo_order(vehicles, model)
    fifo_delay = interpret_order(fifo.sequence, vehicles, model, gaps).total_delay
    report = mcts_search(vehicles, model, gaps, mcts_cfg)

    summary: dict[str, Any] = {
        "vehicles": len(vehicles),
        "valid_orders": count_orders(vehicles),
        "j_fifo": fifo_delay,
        "j_mcts": report.best_delay,
        "eta": improvement_rate(fifo_delay, report.best_delay),
        "nodes_expanded": report.nodes_expanded,
        "rollouts": report.rollouts,
        "elapsed": report.elapsed,
        "best_order": list(report.best_order.sequence),
        "fifo_order": list(fifo.sequence),
    }
    cap = int(config["enumerate"]["cap"])
    if count_orders(vehicles) <= cap:
        optimum = enumerate_optimal(vehicles, model, gaps, cap=cap)
        summary["j_star"] = optimum.best_delay
        summary["optimality_gap"] = report.best_delay - optimum.best_delay

    _write_json(out_dir / "summary.json", summary)
    rows = [
        {"iteration": it, "best_delay": bd, "nodes_expanded": ne, "elapsed": el}
        for it, bd, ne, el in report.iterations
    ]
    _emit_table(
        out_dir, "iterations", rows, ["iteration", "best_delay", "nodes_expanded", "elapsed"], spec.format
    )
    _echo_config(out_dir, config)
    print(
        f"search: J_FIFO={summary['j_fifo']:.4f} J_MCTS={summary['j_mcts']:.4f} "
        f"eta={summary['eta']:.4f} nodes={report.nodes_expanded}"
        + (f" J*={summary['j_star']:.4f}" if "j_star" in summary else "")
    )
    return 0


def _sim_config(config: dict, model: IntersectionModel, rate: float) -> ScenarioConfig:
    s = config["sim"]
    return ScenarioConfig(
        model=model,
        arrival_rate=rate,
        horizon=float(s["horizon"]),
        replan_period=float(s["replan_period"]),
        time_step=float(s["time_step"]),
        rng_seed=int(s["rng_seed"]),
        kinematics=_build_kinematics(config),
        min_entry_gap=float(s["min_entry_gap"]),
        gaps=_build_gaps(config),
    )


def cmd_simulate(spec: RunSpec, config: dict) -> int:
    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = _build_model(config)
    s = config["sim"]
    mcts_cfg = _build_mcts_config(config)
    rows = []
    trace_rows: list[dict] = []
    for rate in s["rates"]:
        for name in s["strategies"]:
            strategy = make_strategy(name, mcts_cfg, int(s["oracle_cap"]))
            sim_cfg = _sim_config(config, model, float(rate))
            metrics = run_experiment(sim_cfg, strategy, collect_trace=bool(s["trace"]))
            row = {"arrival_rate": float(rate), "strategy": name}
            row.update(metrics.to_row())
            rows.append(row)
            if metrics.trace:
                for t in metrics.trace:
                    t2 = {"arrival_rate": float(rate), "strategy": name}
                    t2.update(t)
                    trace_rows.append(t2)
            print(
                f"simulate rate={rate} strategy={name}: "
                f"avg_delay={metrics.average_delay:.4f} throughput={metrics.throughput} "
                f"eta={metrics.eta:.4f}"
            )
    columns = [
        "arrival_rate",
        "strategy",
        "average_delay",
        "total_delay",
        "throughput",
        "eta",
        "replan_count",
        "nodes_mean",
        "nodes_max",
        "generated",
    ]
    _emit_table(out_dir, "metrics", rows, columns, spec.format)
    if trace_rows:
        _emit_table(
            out_dir,
            "trace",
            trace_rows,
            [
                "arrival_rate",
                "strategy",
                "vehicle",
                "lane",
                "movement",
                "spawn_time",
                "enter_time",
                "assigned_entry",
                "realized_entry",
                "depart_time",
                "state",
                "delay",
            ],
            spec.format,
        )
    _echo_config(out_dir, config)
    return 0


def cmd_enumerate(spec: RunSpec, config: dict) -> int:
    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = _build_model(config)
    gaps = _build_gaps(config)
    kin = _build_kinematics(config)
    vehicles = _scenario_vehicles(config, model, kin)
    cap = int(config["enumerate"]["cap"])
    total = count_orders(vehicles)
    try:
        result = enumerate_optimal(vehicles, model, gaps, cap=cap, collect_delays=True)
    except EnumerationCapExceeded as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 2

    delays = result.delays
    bins = int(config["enumerate"]["bins"])
    counts, edges = np.histogram(delays, bins=bins)
    hist_rows = [
        {"bin_left": float(edges[i]), "bin_right": float(edges[i + 1]), "count": int(counts[i])}
        for i in range(len(counts))
    ]
    _write_csv(out_dir / "histogram.csv", hist_rows, ["bin_left", "bin_right", "count"])
    if config["enumerate"]["raw_delays"]:
        _write_csv(
            out_dir / "delays.csv",
            [{"delay": float(d)} for d in delays],
            ["delay"],
        )

    fifo = fifo_order(vehicles, model)
    fifo_delay = interpret_order(fifo.sequence, vehicles, model, gaps).total_delay
    report = mcts_search(vehicles, model, gaps, _build_mcts_config(config))
    fifo_rank, fifo_pct = rank_of(delays, fifo_delay)
    mcts_rank, mcts_pct = rank_of(delays, report.best_delay)
    summary = {
        "vehicles": len(vehicles),
        "valid_orders": total,
        "optimum_delay": result.best_delay,
        "optimum_order": list(result.best_order.sequence),
        "j_fifo": fifo_delay,
        "fifo_rank": fifo_rank,
        "fifo_percentile": fifo_pct,
        "j_mcts": report.best_delay,
        "mcts_rank": mcts_rank,
        "mcts_percentile": mcts_pct,
    }
    _write_json(out_dir / "enumerate_summary.json", summary)
    _echo_config(out_dir, config)
    print(
        f"enumerate: {total} orders, J*={result.best_delay:.4f}, "
        f"FIFO rank {fifo_rank} ({fifo_pct:.2%}), MCTS rank {mcts_rank} ({mcts_pct:.2%})"
    )
    return 0


def _sweep_point(args: tuple) -> dict:
    config, omega, c_param, budget = args
    model = _build_model(config)
    gaps = _build_gaps(config)
    kin = _build_kinematics(config)
    sw = config["sweep"]
    import random as _random

    etas = []
    for seed in sw["scenario_seeds"]:
        rng = _random.Random(int(seed))
        vehicles = random_scenario(model, int(sw["scenario_count"]), rng, kinematics=kin)
        cfg = _build_mcts_config(config)
        cfg.omega = omega
        cfg.c = c_param
        if budget is not None:
            cfg.budget_nodes = int(budget)
            cfg.budget_time = None
        cfg.rng_seed = int(seed)
        fifo = fifo_order(vehicles, model)
        fifo_delay = interpret_order(fifo.sequence, vehicles, model, gaps).total_delay
        report = mcts_search(vehicles, model, gaps, cfg)
        etas.append(improvement_rate(fifo_delay, report.best_delay))
    return {
        "omega": omega,
        "c": c_param,
        "budget_nodes": budget if budget is not None else config["search"]["budget_nodes"],
        "eta_mean": float(np.mean(etas)),
        "eta_std": float(np.std(etas)),
        "runs": len(etas),
    }


def cmd_sweep(spec: RunSpec, config: dict) -> int:
    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sw = config["sweep"]
    budgets = sw["budgets"] or [None]
    points = [
        (config, float(omega), float(c_param), budget)
        for omega in sw["omega"]
        for c_param in sw["c"]
        for budget in budgets
    ]
    if not points or not sw["omega"] or not sw["c"]:
        print("sweep grid is empty", file=sys.stderr)
        return 2
    jobs = int(sw["jobs"])
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_point, points))
    else:
        rows = [_sweep_point(p) for p in points]
    _emit_table(
        out_dir,
        "sweep",
        rows,
        ["omega", "c", "budget_nodes", "eta_mean", "eta_std", "runs"],
        spec.format,
    )
    _echo_config(out_dir, config)
    for row in rows:
        print(
            f"sweep omega={row['omega']} c={row['c']} budget={row['budget_nodes']}: "
            f"eta={row['eta_mean']:.4f} +/- {row['eta_std']:.4f}"
        )
    return 0


def cmd_dump_tree(spec: RunSpec, config: dict) -> int:
    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = _build_model(config)
    gaps = _build_gaps(config)
    kin = _build_kinematics(config)
    vehicles = _scenario_vehicles(config, model, kin)
    cfg = _build_mcts_config(config)
    cfg.retain_tree = True
    report = mcts_search(vehicles, model, gaps, cfg)
    dump = dump_tree(report)
    (out_dir / "tree.dot").write_text(dump.dot + "\n")
    _write_json(out_dir / "tree.json", dump.tree)
    _echo_config(out_dir, config)
    print(
        f"dump-tree: {report.nodes_expanded + 1} nodes, best delay {report.best_delay:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cavsched",
        description="Cooperative intersection scheduling experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("search", "one-shot passing-order search on a static scenario"),
        ("simulate", "rolling-horizon traffic simulation"),
        ("enumerate", "exhaustive enumeration: histogram, optimum, ranks"),
        ("sweep", "parameter grid sweeps of the search"),
        ("dump-tree", "export the search tree as DOT and JSON"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", "-c", default=None, help="JSON config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (dotted path), repeatable",
        )
        p.add_argument("--out", "-o", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override all rng seeds")
        p.add_argument("--strategy", choices=["fifo", "mcts", "oracle"], default=None)
        p.add_argument("--rollout", choices=["heuristic", "random"], default=None)
        p.add_argument("--budget-nodes", type=int, default=None)
        p.add_argument("--budget-time", type=float, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--format", choices=["csv", "json"], default="csv")
    return parser


def _flag_overrides(args: argparse.Namespace) -> list[str]:
    extra: list[str] = []
    if args.seed is not None:
        extra += [
            f"search.rng_seed={args.seed}",
            f"sim.rng_seed={args.seed}",
            f"scenario.random.seed={args.seed}",
        ]
    if args.strategy is not None:
        extra.append(f'sim.strategies=["{args.strategy}"]')
    if args.rollout is not None:
        extra.append(f"search.rollout_policy={args.rollout}")
    if args.budget_nodes is not None:
        extra.append(f"search.budget_nodes={args.budget_nodes}")
    if args.budget_time is not None:
        extra.append(f"search.budget_time={args.budget_time}")
    if args.jobs is not None:
        extra.append(f"sweep.jobs={args.jobs}")
    return extra


COMMANDS = {
    "search": cmd_search,
    "simulate": cmd_simulate,
    "enumerate": cmd_enumerate,
    "sweep": cmd_sweep,
    "dump-tree": cmd_dump_tree,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    spec = RunSpec(
        command=args.command,
        config_path=args.config,
        overrides=list(args.overrides) + _flag_overrides(args),
        output_dir=args.out,
        format=args.format,
    )
    try:
        config = load_config(spec)
        return COMMANDS[spec.command](spec, config)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
