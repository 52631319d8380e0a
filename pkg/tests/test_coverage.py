import math

import numpy as np
import pytest

from prefbandit import (CoverageCurve, Instance, coverage_curve, coverage_ratio, local_coverage_estimate,
                        mad, mad_pair_coverage, min_softmax_over_ball, pair_coverage,
                        radius_recursion_predict, sqrt_convexity_check, UNBOUNDED)
from prefbandit.coverage import (covariance_matrix, feature_covariance, lambda_min_on_S,
                                 xi_coefficient)
from prefbandit.instances import easy_instance

from conftest import random_instance
from oracles import bisect_coverage, min_softmax_grid, naive_covariance, naive_policy, random_min_softmax


def tabular(base, theta=None):
    base = np.atleast_2d(np.asarray(base, dtype=float))
    na = base.shape[1]
    return Instance(np.ones(1), np.eye(na)[None], base, 1.0, 10.0, 2.0,
                    np.zeros(na) if theta is None else theta)


def test_point_mass_zero_covariance():
    inst = tabular([[1.0, 0.0, 0.0]])
    assert np.allclose(covariance_matrix(inst.base()), 0)
    assert lambda_min_on_S(inst.base()) == 0.0


def test_two_arm_uniform_covariance():
    v = covariance_matrix(tabular([[0.5, 0.5]]).base())
    assert np.allclose(v, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)


def test_covariance_matches_naive(inst, rng):
    th = rng.standard_normal(inst.dim)
    v = covariance_matrix(inst.policy(th))
    assert np.allclose(v, naive_covariance(inst, naive_policy(inst, th)), atol=1e-13)
    assert np.allclose(v, v.T, atol=1e-12)
    assert np.linalg.eigvalsh(v).min() >= -1e-10


def test_covariance_matches_monte_carlo(rng):
    inst = random_instance(rng, nx=3, na=4, d=2)
    pi = inst.policy(rng.standard_normal(2))
    v = covariance_matrix(pi)
    n = 10 ** 6
    x, a = pi.sample(rng, n)
    mean = np.einsum("xa,xad->xd", pi.probs(), inst.features)
    c = inst.features[x, a] - mean[x]
    prods = c[:, :, None] * c[:, None, :]
    est = prods.mean(axis=0)
    se = prods.std(axis=0) / math.sqrt(n)
    assert np.all(np.abs(est - v) <= 3 * se + 1e-12)


def test_restricted_basis_tabular(tab_inst):
    cov = feature_covariance(tab_inst.base())
    assert cov.basis.shape == (4, 3)
    assert np.allclose(cov.basis.T @ np.ones(4), 0, atol=1e-12)


def test_lambda_uniform_is_one_over_d():
    for d in (2, 3, 6):
        assert lambda_min_on_S(tabular(np.full((1, d), 1 / d)).base()) == pytest.approx(1 / d, rel=1e-12)


def test_lambda_near_uniform_bound(rng):
    for _ in range(20):
        d, tau = 5, 0.5
        th = rng.uniform(-tau, tau, d)
        inst = tabular(np.full((1, d), 1 / d), th)
        assert lambda_min_on_S(inst.target()) >= math.exp(-4 * tau) / d - 1e-9


def test_self_coverage_is_one(inst, rng):
    pi = inst.policy(rng.standard_normal(inst.dim))
    assert pair_coverage(pi, pi) == pytest.approx(1.0, abs=1e-10)


def test_two_arm_coverage_hand_value():
    inst = tabular([[0.5, 0.5]])
    pi2 = inst.policy(np.log([0.9 / 0.5, 0.1 / 0.5]))
    assert pair_coverage(inst.base(), pi2) == pytest.approx(0.36, rel=1e-10)


def test_coverage_matches_bisection(rng):
    for _ in range(20):
        inst = random_instance(rng, nx=2, na=4, d=3)
        a, b = inst.policy(rng.standard_normal(3)), inst.policy(rng.standard_normal(3))
        va, vb = covariance_matrix(a), covariance_matrix(b)
        assert pair_coverage(a, b) == pytest.approx(bisect_coverage(va, vb), rel=1e-6)


def test_coverage_unbounded_and_zero():
    v_den = np.diag([1.0, 0.0])
    assert coverage_ratio(v_den, np.diag([0.0, 1.0])) == UNBOUNDED
    assert coverage_ratio(v_den, np.zeros((2, 2))) == 0.0
    batch = coverage_ratio(np.stack([np.eye(2), 2 * np.eye(2)]), np.eye(2))
    assert np.allclose(batch, [1.0, 0.5])


def test_mad_identity_and_constant_probe(inst, rng):
    pi = inst.policy(rng.standard_normal(inst.dim))
    probes = rng.standard_normal((5, inst.dim))
    assert mad_pair_coverage(pi, pi, probes) == pytest.approx(1.0, abs=1e-12)
    tab = tabular(np.full((1, 3), 1 / 3))
    # u = 1 is orthogonal to every feature difference in the tabular case
    assert mad_pair_coverage(tab.base(), tab.policy(np.array([0.3, 0, -0.3])), [np.ones(3)]) == 1.0
    with pytest.raises(ValueError):
        mad_pair_coverage(pi, pi, np.zeros((0, inst.dim)))


def test_mad_hand_value():
    inst = tabular([[0.5, 0.5]])
    assert mad(inst.base(), np.array([[1.0, -1.0]])) == pytest.approx(1.0)


def test_local_coverage_zero_radius():
    inst = easy_instance(4, np.random.default_rng(0))
    pt = local_coverage_estimate(inst, 0.0, budget=8, rng=np.random.default_rng(0))
    assert pt.value == 1.0 and np.array_equal(pt.theta, inst.true_param)


def test_local_coverage_rejects_bad_input():
    inst = easy_instance(4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        local_coverage_estimate(inst, 0.5, budget=0)
    with pytest.raises(ValueError):
        local_coverage_estimate(inst, inst.radius * 2)


@pytest.mark.parametrize("p", [1.0, 2.0])
def test_local_coverage_certificate_and_bound(p):
    inst = easy_instance(5, np.random.default_rng(1), p=p)
    for r in (0.2, 0.7, 1.5):
        pt = local_coverage_estimate(inst, r, budget=64, rng=np.random.default_rng(2))
        # the reported maximizer is feasible and replays the value
        assert np.sum(np.abs(pt.theta - inst.true_param) ** p) ** (1 / p) <= r * (1 + 1e-9)
        assert pair_coverage(inst.policy(pt.theta), inst.target()) == pytest.approx(pt.value, abs=1e-9)
        assert pt.value <= math.exp(2 * r) + 1e-6
        assert pt.value >= 1.0 - 1e-12


def test_coverage_curve_monotone_and_csv(tmp_path):
    inst = easy_instance(4, np.random.default_rng(3))
    curve = coverage_curve(inst, [0, 0.25, 0.5, 1.0, 2.0], budget=32, rng=np.random.default_rng(0))
    assert curve.values[0] == 1.0
    assert np.all(np.diff(curve.values) >= 0)
    text = curve.to_csv(tmp_path / "c.csv")
    back = CoverageCurve.from_csv(tmp_path / "c.csv")
    assert back.to_csv() == text
    assert curve(0.75) == pytest.approx(0.5 * (curve.values[2] + curve.values[3]))


def test_min_softmax_p1_closed_form():
    v, th = min_softmax_over_ball(4, 3.0, 1)
    assert v == pytest.approx(1 / (3 * math.e ** 3 + 1), rel=1e-14)
    assert v == pytest.approx(0.01633, abs=1e-5)
    s = np.exp(th) / np.exp(th).sum()
    assert s.min() == pytest.approx(v, rel=1e-12)


def test_min_softmax_p2_against_grid():
    v, th = min_softmax_over_ball(3, 4.0, 2)
    assert v == pytest.approx(min_softmax_grid(3, 4.0, 2), rel=0.01)
    assert np.linalg.norm(th) <= 4.0 + 1e-9
    s = np.exp(th - th.max())
    assert (s / s.sum()).min() == pytest.approx(v, rel=1e-9)


@pytest.mark.parametrize("d,R,p", [(3, 2.0, 1.5), (5, 3.0, 2.0), (4, 1.0, 1.2)])
def test_min_softmax_below_random_points(d, R, p, rng):
    v, _ = min_softmax_over_ball(d, R, p)
    assert v <= random_min_softmax(d, R, p, rng) + 1e-12
    assert v == pytest.approx(min_softmax_grid(d, R, p, grid=41), rel=0.02)


def test_min_softmax_small_radius_uniform():
    for p in (1, 1.5, 2):
        v, _ = min_softmax_over_ball(5, 1e-8, p)
        assert v == pytest.approx(0.2, rel=1e-6)


def flat(c, R=1.0):
    r = np.linspace(0, R, 11)
    return CoverageCurve(r, np.full_like(r, c))


def test_xi_formula():
    n, g, R, d, p, lam, dl = 1000, 0.5, 1.0, 4, 2, 0.2, 0.05
    assert xi_coefficient(n, g, R, d, p, lam, dl) == pytest.approx(
        52 * math.e ** 2 * 4 / (0.2 * 0.25 * 1000) * math.log(9 * 0.5 * 1000 / 0.05), rel=1e-14)
    with pytest.raises(ValueError):
        xi_coefficient(0, g, R, d, p, lam, dl)


def test_recursion_flat_curve_fixed_point():
    c = 2.0
    pred = radius_recursion_predict(flat(c), 10 ** 9, 0.5, 1.0, 4, 2, 0.25, 0.05, 5)
    assert not pred.halted
    s = math.sqrt(pred.xi * c)
    assert s < 1.0
    assert np.allclose(pred.radii[1:], s, rtol=1e-14)


def test_recursion_exponential_curve_geometric():
    r = np.linspace(0, 1.0, 201)
    curve = CoverageCurve(r, np.exp(2 * r))
    pred = radius_recursion_predict(curve, 10 ** 8, 0.5, 1.0, 4, 2, 0.25, 0.05, 6)
    # direct iteration of the scalar map, with the same linear interpolation
    direct = [1.0]
    for _ in range(6):
        direct.append(math.sqrt(pred.xi * float(np.interp(direct[-1], r, np.exp(2 * r)))))
    assert np.allclose(pred.radii, direct, rtol=1e-12)
    eta, floor = 0.5, math.e * math.sqrt(pred.xi) / 0.5
    for a, b in zip(pred.radii, pred.radii[1:]):
        assert b <= max(eta * a, floor) + 1e-12


def test_recursion_halts_for_tiny_n():
    pred = radius_recursion_predict(flat(5.0), 3, 0.5, 1.0, 4, 2, 0.25, 0.05, 5)
    assert pred.halted and pred.halted_at == 1 and len(pred.radii) == 1


def test_sqrt_convexity_examples():
    r = np.array([0, 0.3, 0.5, 1.2, 2.0, 3.1])
    assert sqrt_convexity_check(CoverageCurve(r, np.exp(2 * r))).convex
    assert sqrt_convexity_check(CoverageCurve(r, np.full_like(r, 3.0))).convex
    # sqrt(1 + r^2) is itself convex, so there is nothing to flag
    assert sqrt_convexity_check(CoverageCurve(r, 1 + r ** 2)).convex
    # sqrt(1 + r) is concave: the check must flag it
    rep = sqrt_convexity_check(CoverageCurve(r, 1 + r))
    assert not rep.convex and rep.worst_violation > 0
    with pytest.raises(ValueError):
        sqrt_convexity_check(CoverageCurve(r[:2], r[:2]))


def test_kappa_diagnostic_for_quadratic_curve():
    r = np.linspace(0, 2, 9)
    rep = sqrt_convexity_check(CoverageCurve(r, 1 + r ** 2))
    assert rep.kappa >= 1.0
