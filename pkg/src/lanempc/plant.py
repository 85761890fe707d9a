"""Ground-truth store-and-forward simulator.

The plant owns the true saturation flows and the time-varying split ratios.
Controllers only ever see :class:`Measurement` snapshots; the true transfer
matrices are exposed for the estimator oracle and the centralized reference.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleControl, MalformedConfig
from .topology import LANE_PHASE, N_LANES, N_PHASES, PHASE_OF_LANE, LaneId

SINK = "sink"
FLOW_COLUMNS = ("step", "intersection", "lane", "count", "inflow", "outflow", "demand", "exit")


@dataclass(frozen=True)
class SignalParams:
    cycle: float = 120.0
    yellow: float = 8.0
    u_min: float = 10.0
    u_max: float = 70.0

    @property
    def green_budget(self):
        return self.cycle - self.yellow

    @classmethod
    def from_config(cls, sim):
        return cls(
            cycle=float(sim.get("cycle", 120.0)),
            yellow=float(sim.get("yellow", 8.0)),
            u_min=float(sim.get("u_min", 10.0)),
            u_max=float(sim.get("u_max", 70.0)),
        )


class SplitRatioProfile:
    """Per-lane routing distributions over downstream lanes (plus sink).

    ``kind`` is ``constant``, ``sinusoidal`` (smooth drift around the base
    ratios) or ``piecewise`` (square-wave drift with the same amplitude and
    period).  Drift vectors sum to zero so the total stays 1.
    """

    def __init__(self, topology, base, kind="sinusoidal", amplitude=0.0, period=24.0, seed=0):
        if kind not in ("constant", "sinusoidal", "piecewise"):
            raise MalformedConfig(f"unknown split profile kind {kind!r}")
        self.topology = topology
        self.kind = kind
        self.amplitude = float(amplitude)
        self.period = float(period)
        self.targets = {}
        self.base = {}
        rng = np.random.default_rng(seed)
        self.phase_offset = {}
        for lane, ds in topology.downstream_sets.items():
            targets = list(ds.lanes) + ([SINK] if ds.sink else [])
            frac = np.asarray(base.get(lane, np.full(len(targets), 1.0 / len(targets))), dtype=float)
            if frac.shape != (len(targets),) or (frac < 0).any() or abs(frac.sum() - 1.0) > 1e-9:
                raise MalformedConfig(f"split ratios of lane {lane} must be {len(targets)} fractions summing to 1")
            self.targets[lane] = tuple(targets)
            self.base[lane] = frac
            self.phase_offset[lane] = float(rng.uniform(0.0, 2 * np.pi))

    def ratios(self, lane, k):
        base = self.base[lane]
        n = len(base)
        if self.kind == "constant" or self.amplitude == 0.0 or n < 2:
            return base.copy()
        angle = 2 * np.pi * k / self.period + self.phase_offset[lane] + 2 * np.pi * np.arange(n) / n
        wave = np.sin(angle)
        if self.kind == "piecewise":
            wave = np.sign(wave)
            wave -= wave.mean()
        p = np.maximum(base + self.amplitude * wave, 0.0)
        return p / p.sum()


class DemandProfile:
    """Piecewise-constant external arrivals on boundary lanes.

    ``rates`` maps a boundary lane to a list of ``(start_step, veh_per_hour)``.
    """

    def __init__(self, rates, cycle):
        self.cycle = float(cycle)
        self.rates = {lane: sorted((int(s), float(r)) for s, r in segs) for lane, segs in rates.items()}
        for lane, segs in self.rates.items():
            if any(r < 0 for _, r in segs):
                raise MalformedConfig(f"negative demand on lane {lane}")

    def rate(self, lane, k):
        current = 0.0
        for start, r in self.rates.get(lane, ()):
            if start <= k:
                current = r
        return current

    def vehicles(self, topology, k):
        out = np.zeros((topology.n_intersections, N_LANES))
        for lane in self.rates:
            out[lane.idx] = self.rate(lane, k) * self.cycle / 3600.0
        return out


@dataclass
class FlowRecord:
    step: int
    counts: np.ndarray
    inflow: np.ndarray
    outflow: np.ndarray
    demand: np.ndarray
    exits: np.ndarray
    counts_after: np.ndarray

    def rows(self):
        n = self.counts.shape[0]
        for i in range(n):
            for m in range(N_LANES):
                yield (
                    self.step, i + 1, m + 1, self.counts[i, m], self.inflow[i, m],
                    self.outflow[i, m], self.demand[i, m], self.exits[i, m],
                )


def write_flow_csv(records, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(FLOW_COLUMNS)
    for rec in records:
        for row in rec.rows():
            w.writerow([row[0], row[1], row[2], *(repr(float(v)) for v in row[3:])])


def read_flow_csv(fh, n_intersections=None):
    """Rebuild FlowRecords from CSV text written by :func:`write_flow_csv`."""
    if isinstance(fh, str):
        fh = io.StringIO(fh)
    rows = list(csv.DictReader(fh))
    if n_intersections is None:
        n_intersections = max(int(r["intersection"]) for r in rows)
    by_step = {}
    for r in rows:
        by_step.setdefault(int(r["step"]), []).append(r)
    records = []
    for k in sorted(by_step):
        arrs = {c: np.zeros((n_intersections, N_LANES)) for c in FLOW_COLUMNS[3:]}
        for r in by_step[k]:
            i, m = int(r["intersection"]) - 1, int(r["lane"]) - 1
            for c in arrs:
                arrs[c][i, m] = float(r[c])
        after = arrs["count"] - arrs["outflow"] + arrs["inflow"] + arrs["demand"]
        records.append(FlowRecord(k, arrs["count"], arrs["inflow"], arrs["outflow"], arrs["demand"], arrs["exit"], after))
    return records


@dataclass
class PlantState:
    counts: np.ndarray
    step: int = 0
    entered: float = 0.0
    exited: float = 0.0
    delay_vehicle_steps: float = 0.0
    initial_total: float = field(default=0.0)


@dataclass(frozen=True)
class Measurement:
    """What a controller may observe at step k."""

    step: int
    counts: np.ndarray
    outflow_matrices: tuple
    arrivals: np.ndarray  # boundary arrivals observed during the previous step


class Plant:
    def __init__(self, topology, saturation, splits, demand, signal=SignalParams(),
                 initial_counts=None, spillback=False, jam_density=1.0 / 7.5):
        self.topology = topology
        self.saturation = np.asarray(saturation, dtype=float)
        if self.saturation.shape != (topology.n_intersections, N_LANES) or (self.saturation <= 0).any():
            raise MalformedConfig("saturation rates must be a positive N x 8 array")
        self.splits = splits
        self.demand = demand
        self.signal = signal
        self.spillback = spillback
        self.capacity = topology.lane_lengths * jam_density
        x0 = np.zeros((topology.n_intersections, N_LANES)) if initial_counts is None else np.array(initial_counts, dtype=float)
        if (x0 < 0).any():
            raise MalformedConfig("initial counts must be non-negative")
        self.state = PlantState(counts=x0, initial_total=float(x0.sum()))
        self._last_arrivals = np.zeros_like(x0)
        self._index = {lane: n for n, lane in enumerate(topology.lanes())}

    # -- model matrices -------------------------------------------------
    def true_outflow_matrix(self, i, k=None):
        B = np.zeros((N_LANES, N_PHASES))
        B[np.arange(N_LANES), PHASE_OF_LANE] = self.saturation[i - 1]
        return B

    def true_transfer_matrix(self, i, k=None):
        """Transfer rates from upstream neighbours' phases into the lanes of ``i``.

        Oracle only: controllers must not call this.
        """
        k = self.state.step if k is None else k
        nbrs = self.topology.neighbors(i)
        C = np.zeros((N_LANES, N_PHASES * len(nbrs)))
        for l, j in enumerate(nbrs):
            for g in range(1, N_LANES + 1):
                sender = LaneId(j, g)
                p = self.splits.ratios(sender, k)
                for t, frac in zip(self.splits.targets[sender], p):
                    if t != SINK and t.intersection == i:
                        C[t.lane - 1, N_PHASES * l + LANE_PHASE[g] - 1] += self.saturation[j - 1, g - 1] * frac
        return C

    def measure(self):
        k = self.state.step
        return Measurement(
            step=k,
            counts=self.state.counts.copy(),
            outflow_matrices=tuple(self.true_outflow_matrix(i, k) for i in range(1, self.topology.n_intersections + 1)),
            arrivals=self._last_arrivals.copy(),
        )

    # -- dynamics ---------------------------------------------------------
    def check_controls(self, u):
        sig = self.signal
        tol = 1e-9
        if u.shape != (self.topology.n_intersections, N_PHASES) or not np.isfinite(u).all():
            raise InfeasibleControl(f"controls must be a finite {self.topology.n_intersections} x 4 array")
        if (u < sig.u_min - tol).any() or (u > sig.u_max + tol).any():
            raise InfeasibleControl(f"green times outside [{sig.u_min}, {sig.u_max}]: {u.tolist()}")
        gap = np.abs(u.sum(axis=1) + sig.yellow - sig.cycle)
        if (gap > tol).any():
            raise InfeasibleControl(f"cycle identity violated by {gap.max():.3e} s")

    def step(self, controls):
        """Advance one cycle under ``controls`` (N x 4 green times, seconds)."""
        u = np.asarray(controls, dtype=float)
        self.check_controls(u)
        st = self.state
        k = st.step
        x = st.counts
        requested = self.saturation * u[:, PHASE_OF_LANE]
        out = np.minimum(requested, x)

        routes = {}
        for lane in self.topology.lanes():
            routes[lane] = self.splits.ratios(lane, k)
        if self.spillback:
            out = self._limit_by_space(x, out, routes)

        inflow = np.zeros_like(x)
        exits = np.zeros_like(x)
        for lane, p in routes.items():
            q = out[lane.idx]
            if q == 0.0:
                continue
            for t, frac in zip(self.splits.targets[lane], p):
                if t == SINK:
                    exits[lane.idx] += q * frac
                else:
                    inflow[t.idx] += q * frac
        demand = self.demand.vehicles(self.topology, k)
        # out <= x elementwise, so new counts are non-negative without clipping
        new = x - out + inflow + demand

        rec = FlowRecord(k, x.copy(), inflow, out, demand, exits, new.copy())
        st.entered += float(demand.sum())
        st.exited += float(exits.sum())
        st.delay_vehicle_steps += float((x - out).sum())
        st.counts = new
        st.step = k + 1
        self._last_arrivals = demand
        return st, rec

    def _limit_by_space(self, x, out, routes):
        space = np.maximum(self.capacity - x + out, 0.0)
        wanted = np.zeros_like(x)
        for lane, p in routes.items():
            for t, frac in zip(self.splits.targets[lane], p):
                if t != SINK:
                    wanted[t.idx] += out[lane.idx] * frac
        factor = np.ones_like(x)
        mask = wanted > space
        factor[mask] = space[mask] / wanted[mask]
        limited = out.copy()
        for lane in routes:
            recv = [t for t in self.splits.targets[lane] if t != SINK]
            if recv:
                limited[lane.idx] *= min(factor[t.idx] for t in recv)
        return limited

    def conservation_gap(self):
        st = self.state
        return abs(st.initial_total + st.entered - st.exited - float(st.counts.sum()))
