"""Intersection graph, lane geometry and signal-phase structure.

Every intersection has four incoming two-lane roads (8 lanes) and four
signal phases, each phase serving two lanes.  Lanes and intersections are
numbered from 1 in configs and in :class:`LaneId`; arrays are indexed from 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InconsistentGraph, MalformedConfig, UnknownLane

N_LANES = 8
N_PHASES = 4

# phase -> the two lanes it serves (1-based)
PHASE_LANES = {1: (2, 6), 2: (3, 7), 3: (4, 8), 4: (1, 5)}
LANE_PHASE = {lane: p for p, lanes in PHASE_LANES.items() for lane in lanes}

# 0-based helpers used by the numerical code
PHASE_OF_LANE = np.array([LANE_PHASE[m] - 1 for m in range(1, N_LANES + 1)])
LANES_OF_PHASE = np.array([[a - 1, b - 1] for a, b in (PHASE_LANES[p] for p in range(1, N_PHASES + 1))])


class LaneId(NamedTuple):
    intersection: int
    lane: int

    @property
    def idx(self):
        return self.intersection - 1, self.lane - 1

    @property
    def road(self):
        return (self.lane + 1) // 2

    def __str__(self):
        return f"{self.intersection}.{self.lane}"


@dataclass(frozen=True)
class PhaseGroup:
    phase: int
    lanes: tuple

    def __post_init__(self):
        if len(self.lanes) != 2:
            raise ValueError("a phase group serves exactly two lanes")


def phase_groups(intersection):
    return tuple(
        PhaseGroup(p, tuple(LaneId(intersection, m) for m in PHASE_LANES[p]))
        for p in range(1, N_PHASES + 1)
    )


class Downstream(NamedTuple):
    """Receiving lanes of a lane; ``sink`` is set when some discharge leaves the network."""

    lanes: tuple
    sink: bool

    def __len__(self):
        return len(self.lanes)


@dataclass(frozen=True)
class NetworkTopology:
    n_intersections: int
    edges: tuple
    neighbor_sets: tuple
    lane_lengths: np.ndarray
    downstream_sets: dict
    boundary_lanes: frozenset
    phase_groups: tuple = field(repr=False)

    def neighbors(self, i):
        """Upstream neighbours of intersection ``i`` (those feeding it), sorted."""
        return self.neighbor_sets[i - 1]

    def out_neighbors(self, i):
        return tuple(sorted(t for s, t in self.edges if s == i))

    def contacts(self, i):
        """Intersections that exchange messages with ``i`` (either direction)."""
        return tuple(sorted(set(self.neighbors(i)) | set(self.out_neighbors(i))))

    def lanes(self):
        for i in range(1, self.n_intersections + 1):
            for m in range(1, N_LANES + 1):
                yield LaneId(i, m)

    def length(self, lane):
        i, m = lane.idx
        return float(self.lane_lengths[i, m])

    def is_sink_only(self, lane):
        return len(self.downstream_sets[lane].lanes) == 0

    def upstream_of(self, lane):
        """Lanes (in other intersections) whose discharge can reach ``lane``."""
        return tuple(sorted(g for g, ds in self.downstream_sets.items() if lane in ds.lanes))

    def transfer_pattern(self, i):
        """Boolean 8 x 4*N_i mask of transfer-matrix entries that can be nonzero.

        Column block ``l`` belongs to the ``l``-th upstream neighbour in sorted
        order; entry (lane, phase) is live when some lane of that phase at the
        neighbour discharges into ``lane``.
        """
        nbrs = self.neighbors(i)
        mask = np.zeros((N_LANES, N_PHASES * len(nbrs)), dtype=bool)
        col = {j: l for l, j in enumerate(nbrs)}
        for m in range(1, N_LANES + 1):
            for g in self.upstream_of(LaneId(i, m)):
                l = col[g.intersection]
                mask[m - 1, N_PHASES * l + LANE_PHASE[g.lane] - 1] = True
        return mask

    def road_count(self):
        """Directed two-lane roads touching the network: internal, entry and exit."""
        internal = len(self.edges)
        entry = len({(lane.intersection, lane.road) for lane in self.boundary_lanes})
        exits = N_PHASES * self.n_intersections - internal
        return internal + entry + exits


def downstream_lanes(topology, lane):
    lane = LaneId(*lane)
    try:
        return topology.downstream_sets[lane]
    except KeyError:
        raise UnknownLane(f"lane {lane} is not part of the network") from None


def _lane(raw, where):
    try:
        i, m = raw
        return LaneId(int(i), int(m))
    except (TypeError, ValueError):
        raise MalformedConfig(f"{where}: expected [intersection, lane], got {raw!r}") from None


def build_network(config):
    """Validate the ``network`` block of a scenario config and build a topology.

    Accepts either the whole scenario document or just its ``network`` block.
    """
    net = config.get("network", config) if isinstance(config, dict) else None
    if not isinstance(net, dict):
        raise MalformedConfig("scenario config must be a JSON object")
    for key in ("n_intersections", "edges", "lanes"):
        if key not in net:
            raise MalformedConfig(f"network block is missing '{key}'")
    n = int(net["n_intersections"])
    if n < 1:
        raise MalformedConfig("n_intersections must be >= 1")

    def check_lane(lane, where):
        if not (1 <= lane.intersection <= n and 1 <= lane.lane <= N_LANES):
            raise InconsistentGraph("lane index out of range", f"{where} references {lane} with N={n}")
        return lane

    edges = set()
    for raw in net["edges"]:
        try:
            j, i = (int(v) for v in raw)
        except (TypeError, ValueError):
            raise MalformedConfig(f"edge must be a pair [j, i], got {raw!r}") from None
        if not (1 <= i <= n and 1 <= j <= n) or i == j:
            raise InconsistentGraph("edge endpoints", f"edge ({j}, {i}) invalid for N={n}")
        edges.add((j, i))
    edges = tuple(sorted(edges))
    neighbor_sets = tuple(tuple(sorted(j for j, t in edges if t == i)) for i in range(1, n + 1))
    if "neighbor_sets" in net:
        declared = tuple(tuple(sorted(int(v) for v in s)) for s in net["neighbor_sets"])
        if declared != neighbor_sets:
            raise InconsistentGraph("neighbor sets disagree with edges")

    lengths = np.full((n, N_LANES), np.nan)
    downstream = {}
    for k, entry in enumerate(net["lanes"]):
        if "id" not in entry or "length" not in entry:
            raise MalformedConfig(f"lanes[{k}] needs 'id' and 'length'")
        lane = check_lane(_lane(entry["id"], f"lanes[{k}].id"), f"lanes[{k}]")
        if lane in downstream:
            raise MalformedConfig(f"lane {lane} declared twice")
        length = float(entry["length"])
        if not length > 0:
            raise InconsistentGraph("lane lengths must be strictly positive", f"lane {lane} has {length}")
        lengths[lane.idx] = length
        targets = []
        for raw in entry.get("downstream", []):
            tgt = check_lane(_lane(raw, f"lanes[{k}].downstream"), f"downstream of lane {lane}")
            if tgt.intersection == lane.intersection:
                raise InconsistentGraph("downstream lane must belong to another intersection", f"{lane} -> {tgt}")
            if (lane.intersection, tgt.intersection) not in edges:
                raise InconsistentGraph(
                    "downstream lane requires an edge", f"{lane} -> {tgt} but no edge ({lane.intersection}, {tgt.intersection})"
                )
            targets.append(tgt)
        if len(set(targets)) != len(targets):
            raise InconsistentGraph("duplicate downstream lane", f"lane {lane}")
        sink = bool(entry.get("sink", not targets))
        if not targets and not sink:
            raise InconsistentGraph("lane without downstream lanes must carry the sink marker", f"lane {lane}")
        downstream[lane] = Downstream(tuple(sorted(targets)), sink)
    if np.isnan(lengths).any():
        missing = [str(LaneId(i + 1, m + 1)) for i, m in zip(*np.where(np.isnan(lengths)))]
        raise MalformedConfig(f"lanes not declared: {', '.join(missing)}")
    lengths.setflags(write=False)

    boundary = frozenset(
        check_lane(_lane(raw, "boundary_lanes"), "boundary_lanes") for raw in net.get("boundary_lanes", [])
    )
    fed = {t for ds in downstream.values() for t in ds.lanes}
    for lane in sorted(downstream):
        if lane not in boundary and lane not in fed:
            raise InconsistentGraph("non-boundary lane has no upstream feeding phase", f"lane {lane}")

    groups = tuple(phase_groups(i) for i in range(1, n + 1))
    return NetworkTopology(
        n_intersections=n,
        edges=edges,
        neighbor_sets=neighbor_sets,
        lane_lengths=lengths,
        downstream_sets=dict(sorted(downstream.items())),
        boundary_lanes=boundary,
        phase_groups=groups,
    )
