import cvxpy as cp
import numpy as np
import pytest

from lanempc.errors import InfeasibleBox
from lanempc.qp import _project_by_pattern, project_capped_simplex, solve_box_qp, solve_grouped_qp


def _spd(rng, n, cond=50.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return Q @ np.diag(np.geomspace(1.0, cond, n)) @ Q.T


def _cvx(H, g, lo, hi, groups=None, total=None):
    v = cp.Variable(g.size)
    cons = [v >= lo, v <= hi]
    if groups is not None:
        cons += [cp.sum(v[list(row)]) == total for row in groups]
    cp.Problem(cp.Minimize(0.5 * cp.quad_form(v, cp.psd_wrap(H)) + g @ v), cons).solve(
        solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return v.value


@pytest.mark.parametrize("seed", range(5))
def test_box_qp_matches_cvxpy(seed):
    rng = np.random.default_rng(seed)
    H = _spd(rng, 6)
    g = rng.normal(scale=20, size=6)
    x, _ = solve_box_qp(H, g, -1.0, 2.0)
    np.testing.assert_allclose(x, _cvx(H, g, -1.0, 2.0), atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_grouped_qp_matches_cvxpy(seed):
    rng = np.random.default_rng(100 + seed)
    H = _spd(rng, 12, cond=200.0)
    g = rng.normal(scale=200, size=12)
    groups = np.arange(12).reshape(3, 4)
    x, _ = solve_grouped_qp(H, g, groups, 112.0, 8.0, 70.0)
    np.testing.assert_allclose(x, _cvx(H, g, 8.0, 70.0, groups, 112.0), atol=1e-5)
    np.testing.assert_allclose(x[groups].sum(axis=1), 112.0, atol=1e-9)


def test_projection_examples():
    np.testing.assert_allclose(project_capped_simplex(np.full(4, 28.0), 112, 8, 70), [28, 28, 28, 28])
    np.testing.assert_allclose(project_capped_simplex(np.array([112.0, 0, 0, 0]), 112, 8, 70), [70, 14, 14, 14])
    np.testing.assert_allclose(project_capped_simplex(np.array([56.0, 56, 0, 0]), 112, 8, 70), [48, 48, 8, 8])


def test_projection_matches_cvxpy_and_pattern_search():
    rng = np.random.default_rng(7)
    V = rng.normal(scale=60, size=(40, 4)) + 28
    P = project_capped_simplex(V, 112.0, 8.0, 70.0)
    for v, p in zip(V, P):
        np.testing.assert_allclose(p, _cvx(np.eye(4), -v, 8.0, 70.0, [range(4)], 112.0), atol=1e-6)
        np.testing.assert_allclose(p, _project_by_pattern(v, 112.0, 8.0, 70.0), atol=1e-9)


def test_projection_survives_huge_inputs():
    u = project_capped_simplex(np.array([1e18, 3e18, 1e18 + 5e3, -2e18]), 112.0, 10.0, 70.0)
    assert abs(u.sum() - 112.0) < 1e-9
    assert (u >= 10.0).all() and (u <= 70.0).all()


def test_infeasible_budget():
    with pytest.raises(InfeasibleBox):
        project_capped_simplex(np.zeros(4), 112.0, 29.0, 70.0)
    with pytest.raises(InfeasibleBox):
        project_capped_simplex(np.zeros(4), 112.0, 8.0, 20.0)
