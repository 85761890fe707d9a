"""Evaluation indicators folded from plant flow records.

Conventions of the flow model: a vehicle present at the start of a step and
not discharged during it waits one full step (``cycle`` seconds) and makes
one stop; a discharged vehicle spends one step traversing the lane.  Hence
total travel time = free-flow time + delay holds exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyRun

FREE_FLOW_SPEED = 50.0 / 3.6  # m/s

STEP_COLUMNS = ("controller", "step", "average_density", "average_flow", "relative_loss_time",
                "average_speed_proxy", "vehicles_present", "queued")
SUMMARY_COLUMNS = ("scenario", "scenario_hash", "controller", "seed", "average_delay_s", "average_stops",
                   "total_travel_time_min", "free_flow_time_min", "total_delay_min", "relative_loss_time",
                   "average_density", "average_flow",
                   "average_speed_proxy", "vehicles_entered", "vehicles_served")
TIMING_COLUMNS = ("scenario_hash", "controller", "average_computation_time_s",
                  "mean_intersection_solve_time_s", "max_step_time_s")


def speed_proxy(counts, outflow, lengths, cycle, free_flow_speed=FREE_FLOW_SPEED):
    """Space-mean speed: lane-metres travelled by discharged vehicles per vehicle-second present.

    An empty network reports 0 so that an idle run has all-zero indicators.
    """
    present = float(counts.sum())
    if present <= 0.0:
        return 0.0
    return min(free_flow_speed, float((outflow * lengths).sum()) / (cycle * present))


def step_kpis(rec, topology, cycle, free_flow_speed=FREE_FLOW_SPEED):
    lengths = topology.lane_lengths
    n_lanes = lengths.size
    return {
        "step": rec.step,
        "average_density": float((rec.counts / lengths).sum()) / n_lanes,
        "average_flow": float(rec.outflow.sum()) / (n_lanes * cycle),
        "average_speed_proxy": speed_proxy(rec.counts, rec.outflow, lengths, cycle, free_flow_speed),
        "vehicles_present": float(rec.counts.sum()),
        "queued": float((rec.counts - rec.outflow).sum()),
    }


def _loss_ratio(travel, free, cycle):
    if travel == 0.0:
        return 0.0
    # nothing served yet: measure against one vehicle-step of free-flow time
    return (travel - free) / (free if free > 0.0 else cycle)


@dataclass
class KpiSeries:
    steps: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def run_kpis(records, topology, cycle, free_flow_speed=FREE_FLOW_SPEED):
    """Fold a run's FlowRecords into per-step rows and a run summary."""
    if not records:
        raise EmptyRun("no flow records to summarize")
    series = KpiSeries()
    travel = free = 0.0
    queued_total = served = entered = 0.0
    for rec in records:
        row = step_kpis(rec, topology, cycle, free_flow_speed)
        travel += row["vehicles_present"] * cycle
        free += float(rec.outflow.sum()) * cycle
        queued_total += row["queued"]
        served += float(rec.exits.sum())
        entered += float(rec.demand.sum())
        row["relative_loss_time"] = _loss_ratio(travel, free, cycle)
        series.steps.append(row)
    per_vehicle = max(served, 1.0)
    series.summary = {
        "average_delay_s": queued_total * cycle / per_vehicle,
        "average_stops": queued_total / per_vehicle,
        "total_travel_time_min": travel / 60.0,
        "free_flow_time_min": free / 60.0,
        "total_delay_min": queued_total * cycle / 60.0,
        "relative_loss_time": series.steps[-1]["relative_loss_time"],
        "average_density": float(np.mean([r["average_density"] for r in series.steps])),
        "average_flow": float(np.mean([r["average_flow"] for r in series.steps])),
        "average_speed_proxy": float(np.mean([r["average_speed_proxy"] for r in series.steps])),
        "vehicles_entered": entered,
        "vehicles_served": served,
    }
    return series


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_rows(fh, columns, rows):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])


def read_rows(fh):
    return list(csv.DictReader(fh))
