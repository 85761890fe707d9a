"""Scenario documents: loading, validation, plant construction, grid generator.

A scenario is one JSON object with ``network``, ``demand``, ``simulation``
and ``controllers`` blocks; see README.md for the schema.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import MalformedConfig
from .plant import DemandProfile, Plant, SignalParams, SplitRatioProfile
from .qp import check_box_budget
from .topology import N_LANES, N_PHASES, LaneId, build_network

BUNDLED = {"grid2x3_rush": "grid2x3_rush.json"}

# heading order S, W, N, E; a vehicle heading h enters the next intersection on road h+1
_MOVES = {0: (1, 0), 1: (0, -1), 2: (-1, 0), 3: (0, 1)}
_THROUGH_LANE = {1: 2, 2: 3, 3: 6, 4: 7}
_LEFT_LANE = {1: 1, 2: 4, 3: 5, 4: 8}


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config):
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def grid_network(rows=2, cols=3, through_split=(0.45, 0.2, 0.35), left_split=(0.65, 0.35),
                 lengths=(300.0, 400.0, 350.0, 450.0), through_rate=0.5, left_rate=0.4):
    """Network block for a rows x cols grid of four-way intersections.

    Roads are numbered by the side vehicles arrive from (1 north, 2 east,
    3 south, 4 west); each has a through/right lane and a left-turn lane.
    A through/right lane feeds both lanes of the road straight ahead and the
    through lane of the road to the right; a left lane feeds both lanes of
    the road to the left.  Shares heading out of the grid go to the sink.
    """
    def node(r, c):
        return r * cols + c + 1 if 0 <= r < rows and 0 <= c < cols else None

    edges, lanes, boundary = set(), [], []
    for r in range(rows):
        for c in range(cols):
            i = node(r, c)
            for road in range(1, 5):
                heading = road - 1
                dr, dc = _MOVES[heading]
                if node(r - dr, c - dc) is None:
                    boundary += [[i, _LEFT_LANE[road]], [i, _THROUGH_LANE[road]]]
                length = lengths[(i + road) % len(lengths)]

                def reach(h):
                    mr, mc = _MOVES[h]
                    return node(r + mr, c + mc), h + 1

                # through/right lane
                targets, fracs, sink = [], [], 0.0
                j, rd = reach(heading)
                if j:
                    targets += [[j, _THROUGH_LANE[rd]], [j, _LEFT_LANE[rd]]]
                    fracs += [through_split[0], through_split[1]]
                    edges.add((i, j))
                else:
                    sink += through_split[0] + through_split[1]
                j, rd = reach((heading + 1) % 4)
                if j:
                    targets.append([j, _THROUGH_LANE[rd]])
                    fracs.append(through_split[2])
                    edges.add((i, j))
                else:
                    sink += through_split[2]
                lanes.append(_lane_entry(i, _THROUGH_LANE[road], length, through_rate, targets, fracs, sink))
                # left lane
                j, rd = reach((heading + 3) % 4)
                if j:
                    targets, fracs, sink = [[j, _THROUGH_LANE[rd]], [j, _LEFT_LANE[rd]]], list(left_split), 0.0
                    edges.add((i, j))
                else:
                    targets, fracs, sink = [], [], 1.0
                lanes.append(_lane_entry(i, _LEFT_LANE[road], length, left_rate, targets, fracs, sink))
    lanes.sort(key=lambda e: tuple(e["id"]))
    return {
        "n_intersections": rows * cols,
        "edges": sorted([list(e) for e in edges]),
        "lanes": lanes,
        "boundary_lanes": sorted(boundary),
    }


def _lane_entry(i, m, length, rate, targets, fracs, sink):
    order = sorted(range(len(targets)), key=lambda n: tuple(targets[n]))
    split = [fracs[n] for n in order] + ([round(sink, 12)] if sink > 0 else [])
    return {
        "id": [i, m],
        "length": length,
        "saturation": rate,
        "downstream": [targets[n] for n in order],
        "sink": sink > 0,
        "split": split,
    }


def load_config(source):
    """Parse a scenario from a path, a bundled name, or an already-parsed dict."""
    if isinstance(source, dict):
        return source
    if isinstance(source, str) and source in BUNDLED:
        return json.loads(resources.files("lanempc.data").joinpath(BUNDLED[source]).read_text())
    path = Path(source)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise MalformedConfig(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise MalformedConfig(f"{path}: invalid JSON ({exc})") from None


@dataclass
class Scenario:
    config: dict
    topology: object
    signal: SignalParams
    horizon: int
    seed: int

    @property
    def name(self):
        return self.config.get("name", "scenario")

    @property
    def hash(self):
        return config_hash(self.config)

    def controller_specs(self):
        block = self.config.get("controllers", self.config.get("controller"))
        if block is None:
            return []
        if isinstance(block, dict):
            block = [block]
        specs = []
        for entry in block:
            if "type" not in entry:
                raise MalformedConfig("controller entries need a 'type'")
            specs.append((entry["type"], dict(entry.get("params", {}))))
        return specs

    def saturation(self):
        sat = np.zeros((self.topology.n_intersections, N_LANES))
        for entry in self.config["network"]["lanes"]:
            lane = LaneId(*entry["id"])
            sat[lane.idx] = float(entry.get("saturation", 0.5))
        return sat

    def split_profile(self, seed):
        sim = self.config.get("simulation", {})
        prof = sim.get("split_profile", {"kind": "constant"})
        base = {}
        for entry in self.config["network"]["lanes"]:
            if "split" in entry:
                base[LaneId(*entry["id"])] = entry["split"]
        return SplitRatioProfile(self.topology, base, kind=prof.get("kind", "constant"),
                                 amplitude=prof.get("amplitude", 0.0), period=prof.get("period", 24.0), seed=seed)

    def demand_and_initial(self, seed):
        rng = np.random.default_rng(seed)
        block = self.config.get("demand", {})
        default_left = float(block.get("left_share", 0.3))
        roads = {}
        for entry in block.get("roads", []):
            roads[tuple(entry["road"])] = entry
        boundary_roads = sorted({(lane.intersection, lane.road) for lane in self.topology.boundary_lanes})
        unknown = set(roads) - set(boundary_roads)
        if unknown:
            raise MalformedConfig(f"demand declared on non-boundary roads: {sorted(unknown)}")
        segments = block.get("segments", [])
        per = block.get("per", "road")
        if per not in ("lane", "road"):
            raise MalformedConfig("demand 'per' must be 'lane' or 'road'")
        per_lane = per == "lane"
        rates = {}
        for road in boundary_roads:
            entry = roads.get(road, {})
            i, rd = road
            left_lane = LaneId(i, 2 * rd - 1) if rd in (1, 3) else LaneId(i, 2 * rd)
            through_lane = LaneId(i, 2 * rd) if rd in (1, 3) else LaneId(i, 2 * rd - 1)
            if "rates" not in entry and per_lane:
                # each boundary lane draws its own rate per segment
                for lane in (left_lane, through_lane):
                    rates[lane] = [(int(seg["start"]), float(rng.uniform(*seg["range"]))) for seg in segments]
                continue
            if "rates" in entry:
                segs = [(int(s), float(v)) for s, v in entry["rates"]]
            else:
                segs = [(int(seg["start"]), float(rng.uniform(*seg["range"]))) for seg in segments]
            left = float(entry.get("left_share", default_left))
            if not 0.0 <= left <= 1.0:
                raise MalformedConfig(f"left_share of road {road} outside [0, 1]")
            rates[left_lane] = [(s, v * left) for s, v in segs]
            rates[through_lane] = [(s, v * (1.0 - left)) for s, v in segs]
        sim = self.config.get("simulation", {})
        init = sim.get("initial_counts", 0.0)
        N = self.topology.n_intersections
        if isinstance(init, dict):
            x0 = rng.uniform(*init["range"], size=(N, N_LANES))
        else:
            x0 = np.broadcast_to(np.asarray(init, float), (N, N_LANES)).copy()
        return DemandProfile(rates, self.signal.cycle), x0

    def make_plant(self, seed=None):
        seed = self.seed if seed is None else seed
        demand, x0 = self.demand_and_initial(seed)
        sim = self.config.get("simulation", {})
        return Plant(self.topology, self.saturation(), self.split_profile(seed), demand, self.signal,
                     initial_counts=x0, spillback=bool(sim.get("spillback", False)))


def load_scenario(source, seed=None):
    config = load_config(source)
    if not isinstance(config, dict) or "network" not in config:
        raise MalformedConfig("scenario config needs a 'network' block")
    topology = build_network(config)
    sim = config.get("simulation", {})
    signal = SignalParams.from_config(sim)
    check_box_budget(N_PHASES, signal.cycle - signal.yellow, signal.u_min, signal.u_max)
    horizon = int(sim.get("horizon", 60))
    if horizon < 1:
        raise MalformedConfig("simulation horizon must be >= 1")
    scen = Scenario(config, topology, signal, horizon, int(sim.get("seed", 0) if seed is None else seed))
    scen.controller_specs()
    scen.make_plant()  # validates demand, splits and saturation up front
    return scen


def grid_scenario(rows=2, cols=3, name="grid", horizon=60, seed=0, demand=None, split_profile=None,
                  controllers=None, **network_kw):
    """A complete scenario document around :func:`grid_network`."""
    return {
        "name": name,
        "network": grid_network(rows, cols, **network_kw),
        "demand": demand if demand is not None else {
            "per": "road", "left_share": 0.3,
            "segments": [{"start": 0, "range": [300, 800]}],
        },
        "simulation": {
            "horizon": horizon, "cycle": 120, "yellow": 8, "u_min": 10, "u_max": 70, "seed": seed,
            "split_profile": split_profile or {"kind": "sinusoidal", "amplitude": 0.05, "period": 24},
            "initial_counts": {"range": [0, 10]},
        },
        "controllers": controllers if controllers is not None else [
            {"type": t} for t in ("fixed_time", "max_pressure", "mpc_road", "dmpc_admm", "centralized_ref")
        ],
    }
