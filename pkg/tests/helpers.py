"""Small hand-built networks and plants shared by the test modules."""
import numpy as np

from lanempc.plant import DemandProfile, Plant, SignalParams, SplitRatioProfile
from lanempc.scenarios import grid_network
from lanempc.topology import N_LANES, LaneId, build_network


def single_intersection(length=500.0):
    """One intersection, every lane boundary-fed and discharging to the sink."""
    return {
        "n_intersections": 1,
        "edges": [],
        "lanes": [{"id": [1, m], "length": length, "sink": True} for m in range(1, N_LANES + 1)],
        "boundary_lanes": [[1, m] for m in range(1, N_LANES + 1)],
    }


def base_splits(net):
    return {LaneId(*e["id"]): e["split"] for e in net["lanes"] if "split" in e}


def make_plant(net, saturation=0.5, x0=None, rates=None, signal=None, kind="constant", amplitude=0.0, seed=0):
    topo = build_network(net)
    signal = signal or SignalParams()
    sat = np.broadcast_to(np.asarray(saturation, float), (topo.n_intersections, N_LANES))
    splits = SplitRatioProfile(topo, base_splits(net), kind=kind, amplitude=amplitude, seed=seed)
    demand = DemandProfile(rates or {}, signal.cycle)
    return Plant(topo, sat, splits, demand, signal, initial_counts=x0)


def chain_network(**kw):
    """Two intersections side by side (1 west, 2 east)."""
    return grid_network(1, 2, **kw)


def random_plan(rng, n, signal=SignalParams()):
    """Feasible green times: a random point of the capped simplex per intersection."""
    from lanempc.qp import project_capped_simplex

    raw = rng.uniform(signal.u_min, signal.u_max, size=(n, 4))
    return project_capped_simplex(raw, signal.cycle - signal.yellow, signal.u_min, signal.u_max)
