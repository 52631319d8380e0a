import math
import warnings

import numpy as np
import pytest

from prefbandit import (balanced_codewords, dumps_instance, easy_instance, local_coverage_estimate,
                        pair_coverage, skewed_base_instance_p1, two_coord_instance)
from prefbandit.bandit import lp_norm
from prefbandit.coverage import lambda_min_on_S
from prefbandit.instances import CapacityError

from oracles import hamming_pairs


def test_d2_codewords(rng):
    words = balanced_codewords(2, 2, rng)
    assert sorted(tuple(w) for w in words) == [(-1.0, 1.0), (1.0, -1.0)]
    with pytest.raises(CapacityError):
        balanced_codewords(2, 3, rng)


def test_codeword_balance_and_distance(rng):
    words = balanced_codewords(16, 8, rng)
    assert len(words) == 8
    assert all(w.sum() == 0 and set(np.unique(w)) == {-1.0, 1.0} for w in words)
    assert min(hamming_pairs(words)) >= 2


def test_codeword_capacity_by_proposals(rng):
    with pytest.raises(CapacityError):
        balanced_codewords(16, 5000, rng, max_proposals=100)
    with pytest.raises(ValueError):
        balanced_codewords(5, 2, rng)


def test_skewed_base_values():
    inst, fam = skewed_base_instance_p1(4, 4.0, np.random.default_rng(0))
    eps = 4 * math.exp(-3)
    assert eps == pytest.approx(0.19915, abs=1e-5)
    assert inst.base_policy[0, 0] == pytest.approx(0.80085, abs=1e-5)
    assert np.allclose(inst.base_policy[0, 1:], 0.04979, atol=1e-5)
    assert inst.norm_order == 1.0 and inst.gamma == pytest.approx(0.25)
    assert inst.n_responses == 5 and inst.is_tabular()


def test_skewed_targets_in_ball_and_separated():
    d, R = 8, 6.0
    inst, fam = skewed_base_instance_p1(d, R, np.random.default_rng(1), n=4096)
    for th in fam.thetas:
        assert lp_norm(th, 1) <= R
    assert np.array_equal(inst.true_param, fam.thetas[fam.chosen])
    sep = 2 * fam.tau * math.sqrt(d / 8)
    for i in range(len(fam.thetas)):
        for j in range(i + 1, len(fam.thetas)):
            assert np.linalg.norm(fam.thetas[i] - fam.thetas[j]) >= sep - 1e-12


def test_skewed_tau_depends_on_n():
    _, a = skewed_base_instance_p1(6, 6.0, np.random.default_rng(0), n=2 ** 8)
    _, b = skewed_base_instance_p1(6, 6.0, np.random.default_rng(0), n=2 ** 14)
    _, c = skewed_base_instance_p1(6, 6.0, np.random.default_rng(0))
    assert b.tau < a.tau <= c.tau == pytest.approx(1 / 6)


def test_skewed_coverage_grows_like_exp_R():
    Rs = np.arange(4, 9)
    cov = [pair_coverage(i.base(), i.target())
           for i in (skewed_base_instance_p1(4, float(R), np.random.default_rng(0))[0] for R in Rs)]
    slope = np.polyfit(Rs, np.log(cov), 1)[0]
    assert abs(slope - 1) <= 0.25


def test_skewed_radius_precondition():
    with pytest.raises(ValueError, match="ln d"):
        skewed_base_instance_p1(4, 2.0, np.random.default_rng(0))


def test_dimension_warning():
    with pytest.warns(UserWarning):
        two_coord_instance(10, 2.0, 2.0, np.random.default_rng(0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        two_coord_instance(5, 2.0, 2.0, np.random.default_rng(0))


def test_two_coord_targets():
    d, R, p = 3, 5.0, 2.0
    inst, fam = two_coord_instance(d, R, p, np.random.default_rng(0), n=1000)
    phi = fam.thetas[len(fam.thetas) // 2]
    c = 2 ** (-1 / p) * (R - 1)
    assert np.allclose(phi, [-c, c, 0])
    for th in fam.thetas:
        assert lp_norm(th - phi, p) <= 1 + 1e-12
        assert lp_norm(th, p) <= R
    b = inst.base_policy[0]
    assert b.max() / b.min() == pytest.approx(math.exp(2 * 2 ** -0.5 * 4), rel=1e-9)


def test_two_coord_rejects_p1():
    with pytest.raises(ValueError):
        two_coord_instance(3, 5.0, 1.0, np.random.default_rng(0))


def test_easy_instance_properties():
    for s in range(5):
        inst = easy_instance(5, np.random.default_rng(s))
        assert np.abs(inst.true_param).max() <= 0.5
        assert inst.radius == 2.0 and inst.gamma == 0.5 and inst.norm_order == 2.0
        assert lambda_min_on_S(inst.target()) >= math.exp(-2) / 5
        pt = local_coverage_estimate(inst, inst.radius, budget=64, rng=np.random.default_rng(0))
        assert pt.value <= math.exp(2 * inst.radius)


def test_regeneration_bit_identical():
    a = dumps_instance(easy_instance(6, np.random.default_rng(3)))
    b = dumps_instance(easy_instance(6, np.random.default_rng(3)))
    assert a == b and "recipe.kind = easy" in a
    s1 = dumps_instance(skewed_base_instance_p1(6, 6.0, np.random.default_rng(4))[0])
    s2 = dumps_instance(skewed_base_instance_p1(6, 6.0, np.random.default_rng(4))[0])
    assert s1 == s2
