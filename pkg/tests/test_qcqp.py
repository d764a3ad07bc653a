import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttsbeam.qcqp import (
    BoxDomain,
    ProxQuadratic,
    inner_argmin,
    kkt_residuals,
    solve_constrained,
    solve_minimax,
)


def _pq(c, lin, tau, center):
    return ProxQuadratic(c, np.asarray(lin, float), tau, np.asarray(center, float))


def test_validation():
    with pytest.raises(ValueError):
        _pq(0.0, [1.0], 0.0, [0.0])
    with pytest.raises(ValueError):
        _pq(0.0, [1.0, 2.0], 1.0, [0.0])
    with pytest.raises(ValueError):
        BoxDomain([1.0], [0.0])
    with pytest.raises(ValueError):
        inner_argmin([0.0], [_pq(0, [1], 1, [0])], BoxDomain([0], [1]))


def test_prox_quadratic_value_and_gradient():
    f = _pq(1.0, [2.0, -1.0], 0.5, [1.0, 1.0])
    assert f(np.array([2.0, 3.0])) == pytest.approx(1.0 + 2.0 - 2.0 + 0.5 * 5.0)
    np.testing.assert_allclose(f.grad(np.array([2.0, 3.0])), [3.0, 1.0])


def test_inner_argmin_zero_linear_returns_center():
    box = BoxDomain(np.zeros(3), np.ones(3))
    c = np.array([0.2, 0.5, 1.7])
    np.testing.assert_allclose(inner_argmin([1.0], [_pq(0, np.zeros(3), 2.0, c)], box), [0.2, 0.5, 1.0])


def test_inner_argmin_one_dimensional_calculus():
    # minimizer of c + g (x - x0) + tau (x - x0)^2 is x0 - g / (2 tau), then clipped
    box = BoxDomain([0.0], [10.0])
    assert inner_argmin([1.0], [_pq(0, [-3.0], 0.5, [1.0])], box)[0] == pytest.approx(4.0)
    assert inner_argmin([1.0], [_pq(0, [30.0], 0.5, [1.0])], box)[0] == 0.0


def test_unconstrained_equals_clipped_prox_step():
    box = BoxDomain(np.zeros(4), np.full(4, 2 * np.pi))
    f = _pq(0.3, [1.0, -2.0, 40.0, 0.0], 0.01, [3.0, 3.0, 3.0, 6.0])
    res = solve_constrained(f, [], box)
    np.testing.assert_array_equal(res.x, np.clip(f.center - f.lin / 0.02, 0, 2 * np.pi))


def test_slack_constraints_reduce_to_prox_step():
    box = BoxDomain(np.zeros(2), np.ones(2))
    f = _pq(0.0, [0.2, -0.1], 1.0, [0.5, 0.5])
    cons = [_pq(-1.0, [0.0, 0.0], 1.0, [0.5, 0.5]), _pq(-2.0, [0.0, 0.0], 1.0, [0.5, 0.5])]
    res = solve_constrained(f, cons, box)
    assert res.converged and res.feasible
    np.testing.assert_allclose(res.x, [0.4, 0.55], atol=1e-12)
    np.testing.assert_array_equal(res.multipliers, 0.0)


def test_infeasible_detected():
    box = BoxDomain(np.zeros(2), np.ones(2))
    f = _pq(0.0, [1.0, 1.0], 1.0, [0.5, 0.5])
    res = solve_constrained(f, [_pq(1.0, [0.0, 0.0], 1.0, [0.5, 0.5])], box)
    assert not res.feasible
    assert "infeasible" in res.diagnostic


def test_minimax_two_parabolas():
    # max((x-0)^2, (x-1)^2) on [0, 1] -> x = 1/2, value 1/4
    box = BoxDomain([0.0], [1.0])
    res = solve_minimax([_pq(0, [0.0], 1.0, [0.0]), _pq(0, [0.0], 1.0, [1.0])], box)
    assert res.x[0] == pytest.approx(0.5, abs=1e-12)
    assert res.value == pytest.approx(0.25, abs=1e-12)
    np.testing.assert_allclose(res.multipliers, [0.5, 0.5], atol=1e-12)


def test_pinned_coordinates_with_flat_dual_face():
    # phases pinned by lower == upper; multipliers start on their bound and the
    # Newton direction on the flat face is very long
    lam0 = [0.33333333, 0.66574489]
    x0 = np.concatenate([[1.0, 2.0], lam0])
    box = BoxDomain([1.0, 2.0, 0.0, 0.0], [1.0, 2.0, 1e6, 1e6])
    f = _pq(1.8230709949778976, [0.3, -0.2, 2.14969161, 0.2965867], 0.01, x0)
    cons = [_pq(-1.6047502783337508, [0.1, 0.4, -14.90207054, 2.98954819], 0.01, x0),
            _pq(-6.600187099584957, [-0.5, 0.0, 0.1338707, -0.83352225], 0.01, x0)]
    res = solve_constrained(f, cons, box)
    assert res.feasible and res.converged, res.diagnostic
    np.testing.assert_array_equal(res.x[:2], [1.0, 2.0])
    assert res.x[2] == pytest.approx(0.09242626, rel=1e-6)
    assert max(res.kkt.values()) < 1e-8


def _cvx(obj, cons, box, minimax=False):
    x = cp.Variable(obj.center.size if obj is not None else cons[0].center.size)
    e = lambda f: f.constant + f.lin @ (x - f.center) + f.tau * cp.sum_squares(x - f.center)
    bounds = [x >= box.lower, x <= box.upper]
    if minimax:
        t = cp.Variable()
        prob = cp.Problem(cp.Minimize(t), [e(c) <= t for c in cons] + bounds)
    else:
        prob = cp.Problem(cp.Minimize(e(obj)), [e(c) <= 0 for c in cons] + bounds)
    prob.solve()
    return prob.value


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 4))
def test_matches_conic_solver(seed, n, K):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0, 1, n)
    box = BoxDomain(np.zeros(n), np.ones(n))
    obj = _pq(rng.normal(), rng.normal(size=n), 0.5, x0)
    cons = [_pq(rng.normal(scale=0.3) - 0.1, rng.normal(size=n), rng.uniform(0.2, 1), x0) for _ in range(K)]
    mm = solve_minimax(cons, box)
    assert mm.converged
    assert mm.value == pytest.approx(_cvx(None, cons, box, minimax=True), abs=1e-6)
    res = solve_constrained(obj, cons, box)
    if not res.feasible:
        assert mm.value > 0
        return
    assert res.converged
    assert res.value == pytest.approx(_cvx(obj, cons, box), abs=1e-6)
    kkt = kkt_residuals(res.x, res.multipliers, obj, cons, box)
    assert max(kkt.values()) < 1e-8


def test_badly_scaled_minimax():
    rng = np.random.default_rng(0)
    n = 4
    x0 = rng.uniform(0, 1e3, n)
    box = BoxDomain(np.zeros(n), np.full(n, 1e6))
    cons = [_pq(1e5 * rng.normal(), 1e3 * rng.normal(size=n), 0.01, x0) for _ in range(3)]
    res = solve_minimax(cons, box)
    assert res.converged
    assert res.kkt["duality_gap"] <= 1e-9 * abs(res.value)
    # no nearby box point does better
    fmax = lambda x: max(c(x) for c in cons)
    for d in rng.normal(size=(200, n)):
        y = box.clip(res.x + d)
        assert fmax(y) >= res.value - 1e-9 * abs(res.value)


def test_inner_argmin_matches_projected_gradient():
    rng = np.random.default_rng(1)
    n = 5
    box = BoxDomain(np.zeros(n), np.ones(n))
    fs = [_pq(0.0, rng.normal(size=n), rng.uniform(0.2, 1), rng.uniform(0, 1, n)) for _ in range(3)]
    w = rng.uniform(0.1, 1, 3)
    x = np.full(n, 0.5)
    step = 1.0 / (2 * sum(wi * f.tau for wi, f in zip(w, fs)))
    for _ in range(2000):
        x = box.clip(x - step * sum(wi * f.grad(x) for wi, f in zip(w, fs)))
    np.testing.assert_allclose(inner_argmin(w, fs, box), x, atol=1e-8)


def test_single_active_constraint_hand_kkt():
    # project (2, 2) onto the unit disk: x = (1, 1)/sqrt 2, mu = 2 sqrt 2 - 1
    box = BoxDomain(np.zeros(2), np.full(2, 10.0))
    obj = _pq(0.0, [0.0, 0.0], 1.0, [2.0, 2.0])
    disk = _pq(-1.0, [0.0, 0.0], 1.0, [0.0, 0.0])
    res = solve_constrained(obj, [disk], box)
    np.testing.assert_allclose(res.x, [np.sqrt(0.5)] * 2, atol=1e-8)
    assert res.multipliers[0] == pytest.approx(2 * np.sqrt(2) - 1, abs=1e-8)


def test_minimax_single_and_duplicated():
    box = BoxDomain(np.zeros(3), np.ones(3))
    f = _pq(0.4, [0.3, -0.5, 0.1], 0.8, [0.5, 0.5, 0.5])
    prox = box.clip(f.center - f.lin / (2 * f.tau))
    one, two = solve_minimax([f], box), solve_minimax([f, f], box)
    np.testing.assert_allclose(one.x, prox, atol=1e-12)
    np.testing.assert_allclose(two.x, prox, atol=1e-10)
    assert two.value == pytest.approx(f(prox), abs=1e-12)


def test_dual_is_concave_along_rays():
    from ttsbeam.qcqp import _Dual
    rng = np.random.default_rng(2)
    n = 3
    box = BoxDomain(np.zeros(n), np.ones(n))
    fs = [_pq(rng.normal(), rng.normal(size=n), rng.uniform(0.2, 1), rng.uniform(0, 1, n)) for _ in range(4)]
    dual = _Dual(fs, box, 1.0)
    for _ in range(50):
        y0, d = rng.uniform(0, 2, 3), rng.normal(size=3)
        ts = np.linspace(0, 1, 21)
        ys = [y0 + t * d for t in ts if np.all(y0 + t * d >= 0)]
        vals = np.array([dual.evaluate(y)[0] for y in ys])
        assert np.all(np.diff(vals, 2) <= 1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_feasibility_decision_consistent(seed):
    rng = np.random.default_rng(seed)
    n, box = 2, BoxDomain(np.zeros(2), np.ones(2))
    x0 = rng.uniform(0, 1, n)
    obj = _pq(0.0, rng.normal(size=n), 0.5, x0)
    cons = [_pq(rng.normal(scale=0.3), rng.normal(size=n), 0.5, x0) for _ in range(2)]
    assert solve_constrained(obj, cons, box).feasible == (solve_minimax(cons, box).value <= 1e-9)
