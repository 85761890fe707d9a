import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import chain_network, make_plant
from lanempc.admm import AugmentedProblem, solve_block_admm
from lanempc.controllers.max_pressure import max_pressure
from lanempc.controllers.mpc import build_local_cost
from lanempc.estimation import CouplingEstimate, estimation_objective, update_ar_weights, update_transfer_estimate
from lanempc.metrics import run_kpis
from lanempc.plant import SignalParams
from lanempc.prediction import assemble_stacked, predict_trajectory, predicted_densities
from lanempc.qp import _project_by_pattern, project_capped_simplex, solve_grouped_qp
from lanempc.topology import LaneId, PHASE_OF_LANE

SIG = SignalParams()
finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
seeds = st.integers(0, 2**32 - 1)
fast = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@fast
@given(seed=seeds, M=st.integers(1, 6), q=st.sampled_from([0, 4, 8, 12]))
def test_stacked_prediction_equals_recursion(seed, M, q):
    rng = np.random.default_rng(seed)
    B = [rng.normal(size=(8, 4)) for _ in range(M)]
    C = [rng.normal(size=(8, q)) for _ in range(M)]
    x, U, Z = rng.normal(size=8), rng.normal(size=(M, 4)), rng.normal(size=(M, q))
    y = predict_trajectory(assemble_stacked(B, C), x, U.ravel(), Z.ravel()).reshape(M, 8)
    for h in range(M):
        x = x - B[h] @ U[h] + C[h] @ Z[h]
        assert np.abs(y[h] - x).max() < 1e-10


@fast
@given(seed=seeds, M=st.integers(1, 5), a=finite, b=finite)
def test_prediction_is_affine(seed, M, a, b):
    rng = np.random.default_rng(seed)
    model = assemble_stacked([rng.normal(size=(8, 4)) for _ in range(M)], [rng.normal(size=(8, 4)) for _ in range(M)])
    x = rng.normal(size=8)
    U1, U2, Z1, Z2 = (rng.normal(size=4 * M) for _ in range(4))
    base = predict_trajectory(model, x, np.zeros(4 * M), np.zeros(4 * M))
    lhs = predict_trajectory(model, x, a * U1 + b * U2, a * Z1 + b * Z2) - base
    rhs = a * (predict_trajectory(model, x, U1, Z1) - base) + b * (predict_trajectory(model, x, U2, Z2) - base)
    assert np.allclose(lhs, rhs, atol=1e-9 * (1 + abs(a) + abs(b)) * 100)


@fast
@given(v=arrays(float, 4, elements=st.floats(-1e6, 1e6)), lo=st.floats(0, 20), width=st.floats(30, 80))
def test_projection_is_feasible_idempotent_and_optimal(v, lo, width):
    hi = lo + width
    total = float(np.clip(112.0, 4 * lo, 4 * hi))
    p = project_capped_simplex(v, total, lo, hi)
    assert abs(p.sum() - total) <= 1e-9 * max(1.0, total)
    assert (p >= lo).all() and (p <= hi).all()
    assert np.allclose(project_capped_simplex(p, total, lo, hi), p, atol=1e-9)
    assert np.allclose(p, _project_by_pattern(v, total, lo, hi), atol=1e-6 * max(1.0, np.abs(v).max()) ** 0.5)


def _random_plan(rng, n):
    return project_capped_simplex(rng.uniform(0, 100, size=(n, 4)), SIG.green_budget, SIG.u_min, SIG.u_max)


@fast
@given(seed=seeds, steps=st.integers(1, 8), amp=st.floats(0, 0.1))
def test_plant_conserves_vehicles_and_stays_nonnegative(seed, steps, amp):
    rng = np.random.default_rng(seed)
    rates = {LaneId(1, 7): [(0, float(rng.uniform(0, 900)))], LaneId(2, 4): [(0, float(rng.uniform(0, 900)))]}
    plant = make_plant(chain_network(), x0=rng.uniform(0, 40, (2, 8)), rates=rates, kind="sinusoidal",
                       amplitude=amp, seed=seed % 1000)
    records = []
    for _ in range(steps):
        before = plant.state.counts.sum()
        _, rec = plant.step(_random_plan(rng, 2))
        assert abs(rec.counts_after.sum() - before - rec.demand.sum() + rec.exits.sum()) < 1e-9
        assert (rec.counts_after >= 0).all() and (rec.outflow <= rec.counts + 1e-12).all()
        records.append(rec)
    s = run_kpis(records, plant.topology, SIG.cycle).summary
    assert abs(s["total_travel_time_min"] - s["free_flow_time_min"] - s["total_delay_min"]) <= 1e-9 * max(
        1.0, s["total_travel_time_min"])
    assert all(np.isfinite(v) and v >= 0 for v in s.values())


@fast
@given(seed=seeds, mu=st.floats(1e-3, 1e3), q=st.integers(1, 12))
def test_estimate_update_is_minimizer(seed, mu, q):
    rng = np.random.default_rng(seed)
    est = CouplingEstimate(rng.normal(size=(8, q)), mu)
    args = (rng.normal(size=8), rng.normal(size=8), rng.normal(size=(8, 4)), rng.normal(size=4), rng.normal(size=q))
    new = update_transfer_estimate(est, *args)
    assert np.isfinite(new.C_hat).all()
    best = estimation_objective(new.C_hat, est.C_hat, mu, *args)
    tol = 1e-9 * max(1.0, best)
    assert best <= estimation_objective(est.C_hat, est.C_hat, mu, *args) + tol
    for _ in range(10):
        other = new.C_hat + 1e-2 * rng.normal(size=new.C_hat.shape)
        assert best <= estimation_objective(other, est.C_hat, mu, *args) + tol


@fast
@given(seed=seeds, p=st.integers(1, 7), delta=st.floats(1e-3, 1.0))
def test_ar_weight_update_is_finite_and_fixed_at_zero_error(seed, p, delta):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=p)
    eta = rng.normal(size=(p, 5))
    assert np.array_equal(update_ar_weights(w, eta, eta.T @ w, delta), w)
    assert np.array_equal(update_ar_weights(w, np.zeros((p, 5)), rng.normal(size=5), delta), w)
    assert np.isfinite(update_ar_weights(w, eta, rng.normal(size=5), delta)).all()


@fast
@given(counts=arrays(float, (2, 8), elements=st.floats(0, 500)))
def test_max_pressure_output_is_feasible(counts):
    plant = make_plant(chain_network(), x0=counts)
    u = max_pressure(plant.measure(), plant.topology, plant.signal).u
    assert (u >= SIG.u_min - 1e-9).all() and (u <= SIG.u_max + 1e-9).all()
    assert np.abs(u.sum(axis=1) + SIG.yellow - SIG.cycle).max() < 1e-9


@fast
@given(seed=seeds, alpha=st.floats(0.1, 10))
def test_densities_scale_with_counts(seed, alpha):
    rng = np.random.default_rng(seed)
    topo = make_plant(chain_network()).topology
    traj = {i: rng.uniform(0, 50, (3, 8)) for i in (1, 2)}
    rho, bar = predicted_densities(topo, traj)
    rho2, bar2 = predicted_densities(topo, {i: alpha * t for i, t in traj.items()})
    for i in (1, 2):
        assert np.allclose(rho2[i], alpha * rho[i]) and np.allclose(bar2[i], alpha * bar[i])


def _local_qp(rng, M, alpha=1.0):
    sat = rng.uniform(0.3, 0.6, 8)
    B = np.zeros((8, 4))
    B[np.arange(8), PHASE_OF_LANE] = sat
    model = assemble_stacked([alpha * B] * M, [np.zeros((8, 0))] * M)
    x = alpha * rng.uniform(0, 60, 8)
    rho_bar = alpha * rng.uniform(0, 0.05, (M, 8))
    return build_local_cost(model, x, np.zeros(0), np.zeros(8), rho_bar, np.full(8, 400.0), [True] * 8, 0.0, 1000.0)


@settings(max_examples=15, deadline=None)
@given(seed=seeds, alpha=st.floats(0.2, 5))
def test_deviation_argmin_is_scale_invariant(seed, alpha):
    # counts, targets and discharge rates scaled together scale the cost by alpha^2
    M = 3
    groups = np.arange(4 * M).reshape(M, 4)
    sol = []
    for a in (1.0, alpha):
        H, g, _, _ = _local_qp(np.random.default_rng(seed), M, a)
        sol.append(solve_grouped_qp(H, g, groups, SIG.green_budget, SIG.u_min, SIG.u_max, tol=1e-11)[0])
    assert np.allclose(sol[0], sol[1], atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(seed=seeds, M=st.integers(2, 6), rho=st.floats(0.1, 10), cover=st.booleans())
def test_block_admm_output_is_feasible_and_dual_step_exact(seed, M, rho, cover):
    rng = np.random.default_rng(seed)
    H, g, _, _ = _local_qp(rng, M)
    H = H + 2e-4 * np.eye(4 * M)
    p = AugmentedProblem(np.stack([H[m::4, m::4] for m in range(4)]), np.stack([g[m::4] for m in range(4)]),
                         SIG.cycle, SIG.yellow, SIG.u_min, SIG.u_max, rho=rho, cover_first=cover)
    lam0 = rng.normal(size=len(p.covered))
    U, lam, trace, theta = solve_block_admm(p, lam0=lam0, max_sweeps=1)
    assert np.allclose(lam - lam0, rho * theta, atol=1e-12, rtol=0)
    U, _, trace, theta = solve_block_admm(p, max_sweeps=40)
    assert (U >= SIG.u_min - 1e-12).all() and (U <= SIG.u_max + 1e-12).all()
    assert np.abs(U.sum(axis=0) + SIG.yellow - SIG.cycle).max() < 1e-9
    assert np.linalg.norm(theta) <= trace.rows[0].r + 1e-9
