"""Closed-loop runs, output files and cross-run comparison."""
from __future__ import annotations

import json
import platform
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .admm import write_trace_csv
from .controllers import CONTROLLER_TYPES, make_controller
from .errors import EmptyRun, LaneMpcError, MalformedConfig, MismatchedScenario
from .metrics import (STEP_COLUMNS, SUMMARY_COLUMNS, TIMING_COLUMNS, read_rows, run_kpis,
                      write_rows)
from .plant import write_flow_csv
from .scenarios import load_config, load_scenario

MANIFEST_KEY = "lanempc_manifest"
CONSERVATION_TOL = 1e-9


class ConservationViolation(LaneMpcError):
    pass


@dataclass
class RunPlan:
    config: object  # path, bundled name or parsed dict
    controllers: list | None = None  # controller types; None runs every configured one
    seed: int | None = None
    horizon: int | None = None
    out_dir: Path | None = None
    plots: bool = True
    trace: bool = False


@dataclass
class ControllerRun:
    name: str
    records: list = field(default_factory=list)
    controls: list = field(default_factory=list)  # applied N x 4 green times per step
    compute_times: list = field(default_factory=list)
    solve_times: list = field(default_factory=list)
    traces: list = field(default_factory=list)  # (step, intersection, SolverTrace)
    fallback_steps: int = 0
    kpis: object = None


@dataclass
class RunResult:
    scenario: object
    seed: int
    horizon: int
    runs: dict  # controller name -> ControllerRun
    files: list = field(default_factory=list)


def check_step(before, rec, signal, u):
    """Conservation and control feasibility for one plant step."""
    gap = abs(float(rec.counts_after.sum()) - float(before.sum()) - float(rec.demand.sum()) + float(rec.exits.sum()))
    scale = max(1.0, float(before.sum()))
    if gap > CONSERVATION_TOL * scale:
        raise ConservationViolation(f"step {rec.step}: vehicle balance off by {gap:.3e}")
    if (u < signal.u_min - 1e-9).any() or (u > signal.u_max + 1e-9).any():
        raise ConservationViolation(f"step {rec.step}: applied green time outside bounds")
    if np.abs(u.sum(axis=1) + signal.yellow - signal.cycle).max() > 1e-9:
        raise ConservationViolation(f"step {rec.step}: applied plan breaks the cycle identity")


def resolve_controllers(scenario, requested=None):
    specs = scenario.controller_specs() or [(t, {}) for t in CONTROLLER_TYPES]
    configured = {}
    for kind, params in specs:
        if kind not in CONTROLLER_TYPES:
            raise MalformedConfig(f"unknown controller type {kind!r}")
        if kind in configured:
            raise MalformedConfig(f"controller {kind!r} configured twice")
        configured[kind] = params
    if not requested:
        return list(configured.items())
    out = []
    for kind in requested:
        if kind not in CONTROLLER_TYPES:
            raise MalformedConfig(f"unknown controller type {kind!r}; expected one of {', '.join(CONTROLLER_TYPES)}")
        out.append((kind, configured.get(kind, {})))
    return out


def run_controller(scenario, kind, params, seed, horizon):
    plant = scenario.make_plant(seed)
    ctrl = make_controller(kind, params)
    ctrl.reset(scenario.topology, scenario.signal, oracle=plant if ctrl.uses_oracle else None)
    run = ControllerRun(kind)
    for k in range(horizon):
        meas = plant.measure()
        out = ctrl.control(meas)
        u = np.asarray(out.u, float)
        _, rec = plant.step(u)
        check_step(meas.counts, rec, scenario.signal, u)
        run.records.append(rec)
        run.controls.append(u)
        run.compute_times.append(out.compute_time)
        run.solve_times.extend(out.solve_times)
        run.traces.extend((k, i, tr) for i, tr in out.traces)
        run.fallback_steps += any(out.forecast_fallback)
    if not run.records:
        raise EmptyRun(f"{kind}: horizon produced no steps")
    run.kpis = run_kpis(run.records, scenario.topology, scenario.signal.cycle)
    return run


def run_scenario(plan):
    config = load_config(plan.config)
    if isinstance(config, dict) and config.get(MANIFEST_KEY):
        config, plan = _plan_from_manifest(config, plan)
    scenario = load_scenario(config, plan.seed)
    horizon = scenario.horizon if plan.horizon is None else int(plan.horizon)
    if horizon < 1:
        raise MalformedConfig("horizon must be >= 1")
    runs = {}
    for kind, params in resolve_controllers(scenario, plan.controllers):
        runs[kind] = run_controller(scenario, kind, params, scenario.seed, horizon)
    result = RunResult(scenario, scenario.seed, horizon, runs)
    if plan.out_dir is not None:
        result.files = write_outputs(result, Path(plan.out_dir), plots=plan.plots, trace=plan.trace)
    return result


def _plan_from_manifest(manifest, plan):
    return manifest["config"], RunPlan(
        config=manifest["config"],
        controllers=plan.controllers or manifest["controllers"],
        seed=manifest["seed"] if plan.seed is None else plan.seed,
        horizon=manifest["horizon"] if plan.horizon is None else plan.horizon,
        out_dir=plan.out_dir, plots=plan.plots, trace=plan.trace,
    )


def summary_rows(result):
    scen = result.scenario
    rows = []
    for name, run in result.runs.items():
        row = {"scenario": scen.name, "scenario_hash": scen.hash, "controller": name, "seed": result.seed}
        row.update(run.kpis.summary)
        rows.append(row)
    return rows


def timing_rows(result):
    rows = []
    for name, run in result.runs.items():
        rows.append({
            "scenario_hash": result.scenario.hash,
            "controller": name,
            "average_computation_time_s": float(np.mean(run.compute_times)),
            "mean_intersection_solve_time_s": float(np.mean(run.solve_times)) if run.solve_times else 0.0,
            "max_step_time_s": float(np.max(run.compute_times)),
        })
    return rows


def write_outputs(result, out_dir, plots=True, trace=False):
    """Write CSVs, manifest and figures; returns the written paths.

    steps.csv, summary.csv and flows_*.csv depend only on config and seed;
    wall-clock numbers live in timing.csv and trace_*.csv.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []

    def emit(name, columns, rows):
        path = out_dir / name
        with path.open("w", newline="") as fh:
            write_rows(fh, columns, rows)
        files.append(path)

    emit("summary.csv", SUMMARY_COLUMNS, summary_rows(result))
    step_rows = [dict(row, controller=name) for name, run in result.runs.items() for row in run.kpis.steps]
    emit("steps.csv", STEP_COLUMNS, step_rows)
    emit("timing.csv", TIMING_COLUMNS, timing_rows(result))
    for name, run in result.runs.items():
        path = out_dir / f"flows_{name}.csv"
        with path.open("w", newline="") as fh:
            write_flow_csv(run.records, fh)
        files.append(path)
        if trace and run.traces:
            path = out_dir / f"trace_{name}.csv"
            with path.open("w", newline="") as fh:
                write_trace_csv(run.traces, fh)
            files.append(path)
    if plots:
        from .plotting import plot_run

        files.extend(plot_run({name: run.kpis.steps for name, run in result.runs.items()}, out_dir))
    manifest = {
        MANIFEST_KEY: 1,
        "scenario": result.scenario.name,
        "config_hash": result.scenario.hash,
        "config": result.scenario.config,
        "seed": result.seed,
        "horizon": result.horizon,
        "controllers": list(result.runs),
        "versions": {"lanempc": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "files": sorted(p.name for p in files),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    files.append(path)
    return files


# -- comparison ---------------------------------------------------------------

KPI_ALIASES = {
    "delay": "average_delay_s", "stops": "average_stops", "ttt": "total_travel_time_min",
    "travel_time": "total_travel_time_min", "rlt": "relative_loss_time", "density": "average_density",
    "flow": "average_flow", "speed": "average_speed_proxy", "time": "average_computation_time_s",
    "computation_time": "average_computation_time_s",
}
CONTROLLER_ALIASES = {
    "dmpc": "dmpc_admm", "admm": "dmpc_admm", "mp": "max_pressure", "pressure": "max_pressure",
    "ftc": "fixed_time", "fixed": "fixed_time", "road": "mpc_road", "central": "centralized_ref",
    "centralized": "centralized_ref",
}
HIGHER_IS_BETTER = {"average_flow", "average_speed_proxy", "vehicles_served"}
COMPARE_KPIS = ("average_delay_s", "average_stops", "total_travel_time_min", "relative_loss_time",
                "average_computation_time_s")


def load_summaries(paths):
    """Rows of several summary.csv files keyed by controller, plus timing when present."""
    table = {}
    hashes = set()
    for path in map(Path, paths):
        try:
            with path.open(newline="") as fh:
                rows = read_rows(fh)
        except FileNotFoundError:
            raise MalformedConfig(f"summary file not found: {path}") from None
        if not rows or "controller" not in rows[0]:
            raise MalformedConfig(f"{path}: not a summary file")
        timing = {}
        tpath = path.with_name("timing.csv")
        if tpath.exists():
            with tpath.open(newline="") as fh:
                timing = {r["controller"]: r for r in read_rows(fh)}
        for row in rows:
            hashes.add(row.get("scenario_hash"))
            label = row["controller"]
            if label in table:
                label = f"{label}@{path.parent.name or path.stem}"
            merged = dict(row)
            for key, val in timing.get(row["controller"], {}).items():
                merged.setdefault(key, val)
            table[label] = merged
    if len(hashes) > 1:
        raise MismatchedScenario(f"summaries come from different scenarios: {sorted(h or '?' for h in hashes)}")
    return table


def ranked(table, kpi):
    present = [(float(row[kpi]), name) for name, row in table.items() if row.get(kpi, "") != ""]
    return sorted(present, key=lambda t: (-t[0], t[1]) if kpi in HIGHER_IS_BETTER else t)


def format_tables(table, kpis=COMPARE_KPIS):
    lines = []
    for kpi in kpis:
        order = ranked(table, kpi)
        if not order:
            continue
        lines.append(f"{kpi} ({'higher' if kpi in HIGHER_IS_BETTER else 'lower'} is better)")
        for rank, (val, name) in enumerate(order, 1):
            lines.append(f"  {rank}. {name:<20s} {val:.6g}")
    return "\n".join(lines)


_CHAIN = re.compile(r"\s*(<=|<)\s*")


def parse_ordering(spec):
    """Parse ``"[kpi:] a < b <= c, ..."`` into (kpi, [(lhs, op, rhs), ...]) clauses."""
    clauses = []
    for part in filter(None, (p.strip() for p in spec.replace(";", ",").split(","))):
        kpi = "average_delay_s"
        if ":" in part:
            kpi, part = (s.strip() for s in part.split(":", 1))
            kpi = KPI_ALIASES.get(kpi, kpi)
        tokens = _CHAIN.split(part)
        if len(tokens) < 3 or len(tokens) % 2 == 0 or any(not t for t in tokens[::2]):
            raise MalformedConfig(f"cannot parse ordering {part!r}; expected e.g. 'dmpc < max_pressure'")
        names = [CONTROLLER_ALIASES.get(t, t) for t in tokens[::2]]
        for lhs, op, rhs in zip(names, tokens[1::2], names[1:]):
            clauses.append((kpi, lhs, op, rhs))
    if not clauses:
        raise MalformedConfig("empty ordering specification")
    return clauses


def check_ordering(table, spec):
    """Evaluate an ordering spec; returns (all_ok, report lines)."""
    report, ok = [], True
    for kpi, lhs, op, rhs in parse_ordering(spec):
        for name in (lhs, rhs):
            if name not in table:
                raise MalformedConfig(f"controller {name!r} not in the compared summaries")
            if table[name].get(kpi, "") == "":
                raise MalformedConfig(f"KPI {kpi!r} missing for {name}")
        a, b = float(table[lhs][kpi]), float(table[rhs][kpi])
        good = a < b if op == "<" else a <= b  # raw values, whatever the KPI's direction
        ok &= good
        report.append(f"{'PASS' if good else 'FAIL'} {kpi}: {lhs} ({a:.6g}) {op} {rhs} ({b:.6g})")
    return ok, report


def compare(paths, assert_ordering=None):
    table = load_summaries(paths)
    text = format_tables(table)
    if assert_ordering is None:
        return True, text
    ok, report = check_ordering(table, assert_ordering)
    return ok, text + "\n" + "\n".join(report)


def validate(source):
    """Load and check a scenario; returns a one-line description."""
    config = load_config(source)
    if isinstance(config, dict) and config.get(MANIFEST_KEY):
        config = config["config"]
    scen = load_scenario(config)
    resolve_controllers(scen)
    topo = scen.topology
    return (f"{scen.name}: {topo.n_intersections} intersections, {topo.road_count()} roads, "
            f"{topo.lane_lengths.size} lanes, horizon {scen.horizon}, hash {scen.hash}")
