import math

import numpy as np
import pytest

from prefbandit import (DistillLoss, DistillLossKind, DpoConfig, Instance, PreferenceDataset, RewardModel,
                        rd_loss, rebel_exact_tabular, run_onpolicy_rd)
from prefbandit.distill import calibrated_reward, soft_label_cross_entropy
from prefbandit.instances import easy_instance
from prefbandit.preference import collect_pairs, sigmoid

from conftest import random_instance
from oracles import finite_diff


def pairs(inst, n, rng, policy=None):
    return collect_pairs(inst.base() if policy is None else policy, n, rng)


def all_pairs(inst):
    na = inst.n_responses
    a1, a2 = np.meshgrid(np.arange(na), np.arange(na), indexing="ij")
    x = np.repeat(np.arange(inst.n_prompts), na * na)
    return PreferenceDataset(x, np.tile(a1.ravel(), inst.n_prompts), np.tile(a2.ravel(), inst.n_prompts),
                             0, "all", 0)


def test_realizable_zero_loss(inst, rng):
    rm = RewardModel.exact(inst)
    d = pairs(inst, 300, rng)
    sq, _ = rd_loss(inst.true_param, inst.base(), rm.table, d, DistillLossKind.SQUARED)
    bk, _ = rd_loss(inst.true_param, inst.base(), rm.table, d, DistillLossKind.BINARY_KL)
    assert sq <= 1e-18 and abs(bk) <= 1e-12


def test_squared_at_zero(inst, rng):
    rm = RewardModel.corrupted(inst, 0.3, rng)
    d = pairs(inst, 200, rng)
    loss, _ = rd_loss(np.zeros(inst.dim), inst.base(), rm.table, d)
    gap = rm.table[d.x, d.a_plus] - rm.table[d.x, d.a_minus]
    assert loss == pytest.approx(float(np.sum(gap ** 2)), rel=1e-12)


@pytest.mark.parametrize("kind", list(DistillLossKind))
def test_gradient_finite_difference(kind, inst, rng):
    rm = RewardModel.corrupted(inst, 0.5, rng)
    ref = inst.policy(rng.standard_normal(inst.dim) * 0.5)
    d = pairs(inst, 150, rng, ref)
    for _ in range(3):
        th = rng.standard_normal(inst.dim)
        _, g = rd_loss(th, ref, rm.table, d, kind, beta=2.0)
        fd = finite_diff(lambda t: rd_loss(t, ref, rm.table, d, kind, beta=2.0)[0], th)
        assert np.allclose(g, fd, rtol=1e-5, atol=1e-6 * max(np.abs(g).max(), 1))


def test_binary_kl_is_cross_entropy_minus_label_entropy(inst, rng):
    rm = RewardModel.corrupted(inst, 0.5, rng)
    d = pairs(inst, 120, rng)
    th, beta = rng.standard_normal(inst.dim), 1.7
    bk, _ = rd_loss(th, inst.base(), rm.table, d, DistillLossKind.BINARY_KL, beta)
    ce = soft_label_cross_entropy(th, inst.base(), rm.table, d, beta)
    q = sigmoid(beta * (rm.table[d.x, d.a_plus] - rm.table[d.x, d.a_minus]))
    h = -np.sum(q * np.log(q) + (1 - q) * np.log(1 - q))
    assert bk == pytest.approx(ce - h, rel=1e-10)
    assert bk >= 0


def test_empty_dataset_rejected(inst):
    with pytest.raises(ValueError):
        rd_loss(np.zeros(inst.dim), inst.base(), np.zeros((2, 4)), PreferenceDataset([], [], [], 0, "e", 0))


def test_loss_config_validation():
    assert DistillLoss("binary-kl").kind is DistillLossKind.BINARY_KL
    with pytest.raises(ValueError):
        DistillLoss(beta=0.0)


def test_reward_model_error(inst, rng):
    assert RewardModel.exact(inst).error <= 1e-12
    assert RewardModel.corrupted(inst, 0.2, rng).error > 0
    with pytest.raises(ValueError):
        RewardModel(np.zeros((1, 1)), inst)


def test_calibrated_reward_identities(inst, rng):
    r = rng.standard_normal((inst.n_prompts, inst.n_responses))
    base = inst.base()
    assert np.allclose(calibrated_reward(r, base, base, 0.8), r, atol=1e-15)
    th = rng.standard_normal(inst.dim)
    cur = inst.policy(th)
    assert np.array_equal(calibrated_reward(r, cur, base, 0.0), r)
    rh = calibrated_reward(r, cur, base, inst.gamma)
    f = inst.features @ th
    for x in range(inst.n_prompts):
        for a in range(inst.n_responses):
            for b in range(inst.n_responses):
                lhs = rh[x, a] - rh[x, b]
                rhs = r[x, a] - r[x, b] - inst.gamma * (f[x, a] - f[x, b])
                assert lhs == pytest.approx(rhs, abs=1e-12)


def test_calibrated_reward_zero_base():
    inst = Instance(np.ones(1), np.eye(3)[None], np.array([[0.5, 0.5, 0.0]]), 1.0, 1.0, 2.0, np.zeros(3))
    other = inst.replace(base_policy=np.full((1, 3), 1 / 3))
    with pytest.raises(ValueError):
        calibrated_reward(np.zeros((1, 3)), other.base(), inst.base(), 1.0)


def test_exact_interpolation_one_round():
    inst = easy_instance(4, np.random.default_rng(0))
    rm = RewardModel.exact(inst)
    traj = run_onpolicy_rd(inst, rm, "fixed-regularization", DpoConfig(K=1, n=2000), np.random.default_rng(1))
    assert traj.final.mad_err < 1e-6
    assert traj.records[0].mad_err > 0.1


def test_calibration_equivalent_to_fixed_when_realizable():
    inst = easy_instance(4, np.random.default_rng(0))
    rm = RewardModel.exact(inst)
    cfg = DpoConfig(K=3, n=256)
    a = run_onpolicy_rd(inst, rm, "fixed-regularization", cfg, np.random.default_rng(5))
    b = run_onpolicy_rd(inst, rm, "reward-calibration", cfg, np.random.default_rng(5), gamma_c=inst.gamma)
    for x, y in zip(a.thetas, b.thetas):
        assert np.linalg.norm(inst.canonical(x - y)) < 1e-4


def test_mode_validation():
    inst = easy_instance(3, np.random.default_rng(0))
    rm = RewardModel.exact(inst)
    with pytest.raises(ValueError):
        run_onpolicy_rd(inst, rm, "nope", DpoConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        run_onpolicy_rd(inst, rm, "reward-calibration", DpoConfig(), np.random.default_rng(0))


def test_rebel_legacy_degrades_on_easy_instance():
    inst = easy_instance(5, np.random.default_rng(0))
    rm = RewardModel.exact(inst)
    k3, k20 = [], []
    for s in range(20):
        t = run_onpolicy_rd(inst, rm, "rebel-legacy", DpoConfig(K=20, n=256), np.random.default_rng(s))
        k3.append(t.records[3].kl_fwd)
        k20.append(t.records[20].kl_fwd)
    assert np.median(k20) > np.median(k3)


def test_corrupted_reward_error_floor():
    inst = easy_instance(5, np.random.default_rng(0))
    for n in (256, 1024, 4096):
        ratios = []
        for s in range(5):
            rm = RewardModel.corrupted(inst, 0.1, np.random.default_rng(50 + s))
            t = run_onpolicy_rd(inst, rm, "fixed-regularization", DpoConfig(n=n), np.random.default_rng(s))
            ratios.append(t.final.mad_err / rm.error)
        assert 0.5 <= np.median(ratios) <= 5


def test_rebel_exact_constant_reward():
    base = np.array([[0.2, 0.3, 0.5]])
    seq = rebel_exact_tabular(base, np.full((1, 3), 1.3), 0.5, 5)
    assert all(np.allclose(p, base) for p in seq.policies)


def test_rebel_exact_first_step_is_rlhf(rng):
    base = rng.dirichlet(np.ones(4), size=2)
    r = rng.standard_normal((2, 4))
    g = 0.7
    seq = rebel_exact_tabular(base, r, g, 1)
    expect = base * np.exp(r / g)
    expect /= expect.sum(axis=1, keepdims=True)
    assert np.allclose(seq.policies[1], expect, atol=1e-14)


def test_rebel_exact_collapse():
    base = np.full((1, 4), 0.25)
    r = np.array([[0.2, 0.9, -0.1, 0.5]])
    g = 0.5
    gap = 0.9 - 0.5
    k = math.ceil(g * 50 / gap)
    seq = rebel_exact_tabular(base, r, g, k)
    assert seq.entropies[-1] < 0.1
    assert int(np.argmax(seq.policies[-1][0])) == 1
    assert np.all(np.diff(seq.entropies) <= 1e-12)
