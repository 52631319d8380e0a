import numpy as np
import pytest

from prefbandit.bandit import lp_norm
from prefbandit.projection import project_lp_ball, sample_lp_ball

from oracles import l1_projection_by_enumeration, slsqp_projection


def test_inside_unchanged():
    v = np.array([0.1, -0.2, 0.3])
    for p in (1, 1.5, 2):
        assert np.array_equal(project_lp_ball(v, 0.0, 1.0, p), v)


def test_l2_rescale():
    assert np.allclose(project_lp_ball([3.0, 4.0], 0.0, 1.0, 2), [0.6, 0.8], atol=1e-15)


def test_l1_threshold_by_hand():
    assert np.allclose(project_lp_ball([1.0, 1.0], 0.0, 1.0, 1), [0.5, 0.5], atol=1e-15)


def test_zero_radius_returns_center():
    c = np.array([1.0, 2.0])
    for p in (1, 1.3, 2):
        assert np.allclose(project_lp_ball([5.0, -3.0], c, 0.0, p), c)


def test_bad_order_rejected():
    with pytest.raises(ValueError):
        project_lp_ball([1.0, 1.0], 0.0, 1.0, 3)
    with pytest.raises(ValueError):
        project_lp_ball([1.0, 1.0], 0.0, -1.0, 2)


@pytest.mark.parametrize("seed", range(10))
def test_l1_matches_bisection_oracle(seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(7) * 3
    c = rng.standard_normal(7)
    got = project_lp_ball(v, c, 1.3, 1)
    assert np.allclose(got, c + l1_projection_by_enumeration(v - c, 1.3), atol=1e-10)


@pytest.mark.parametrize("p", [1.25, 1.5, 1.8, 2.0])
@pytest.mark.parametrize("seed", range(5))
def test_smooth_p_matches_slsqp(p, seed):
    rng = np.random.default_rng(100 + seed)
    v = rng.standard_normal(4) * 2
    got = project_lp_ball(v, 0.0, 0.7, p)
    ref = slsqp_projection(v, np.zeros(4), 0.7, p)
    assert lp_norm(got, p) <= 0.7 + 1e-9
    # the projection is the closest feasible point
    assert np.linalg.norm(got - v) <= np.linalg.norm(ref - v) + 1e-7
    assert np.allclose(got, ref, atol=1e-5)


@pytest.mark.parametrize("p", [1, 1.5, 2])
def test_ball_samples_inside(p, rng):
    pts = sample_lp_ball(5, 2.0, p, 2000, rng)
    norms = np.sum(np.abs(pts) ** p, axis=1) ** (1 / p)
    assert norms.max() <= 2.0 + 1e-12


@pytest.mark.parametrize("p", [1, 1.5, 2])
def test_ball_samples_uniform_radial_law(p, rng):
    # for a uniform point in a d-dim ball, (||x||/r)^d is Uniform(0, 1)
    d = 3
    pts = sample_lp_ball(d, 1.0, p, 20000, rng)
    u = (np.sum(np.abs(pts) ** p, axis=1) ** (1 / p)) ** d
    assert abs(u.mean() - 0.5) < 0.01
    assert abs(np.mean(u < 0.25) - 0.25) < 0.015
