"""Reward distillation: regress implicit reward gaps onto a reward model.

Three on-policy modes are provided. 'fixed-regularization' anchors on pi0
with the raw reward model, 'reward-calibration' anchors on the current
policy and subtracts its implicit reward, and 'rebel-legacy' anchors on
the current policy with the raw reward (kept as a negative control: the
tilt compounds every round).
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .bandit import Instance, SoftmaxPolicy, entropy
from .coverage import mad
from .dpo import DpoConfig, Trajectory, evaluate_round, fit_projected
from .preference import PreferenceDataset, bernoulli_kl, collect_pairs, log_sigmoid, sigmoid
from .projection import project_lp_ball

MODES = ("fixed-regularization", "reward-calibration", "rebel-legacy")


class DistillLossKind(enum.Enum):
    SQUARED = "squared"
    BINARY_KL = "binary-kl"


@dataclass
class DistillLoss:
    kind: DistillLossKind = DistillLossKind.SQUARED
    beta: float = 1.0  # soft-label sharpness, used by BINARY_KL

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = DistillLossKind(self.kind)
        if not self.beta > 0:
            raise ValueError("beta must be positive")


class RewardModel:
    """Reward table r~(x, a) with its error MAD_{pi*}(r~/gamma - f*)."""

    def __init__(self, table, instance: Instance):
        self.table = np.array(table, dtype=float)
        if self.table.shape != (instance.n_prompts, instance.n_responses):
            raise ValueError("reward table shape does not match the instance")
        self.instance = instance
        f_star = instance.features @ instance.true_param
        self.error = mad(instance.target(), self.table / instance.gamma - f_star)

    @classmethod
    def exact(cls, instance: Instance) -> "RewardModel":
        return cls(instance.gamma * (instance.features @ instance.true_param), instance)

    @classmethod
    def corrupted(cls, instance: Instance, scale: float, rng: np.random.Generator) -> "RewardModel":
        """Exact reward plus gamma * scale * standard normal noise per cell."""
        f = instance.features @ instance.true_param
        noise = rng.standard_normal(f.shape)
        return cls(instance.gamma * (f + scale * noise), instance)


def _pair_offsets(inst: Instance, ref: SoftmaxPolicy, x, a1, a2):
    # ln pi0(a1)/pi0(a2) - ln ref(a1)/ref(a2), which is added to theta.dphi
    lb, lr = inst.log_base, ref.log_probs()
    off = (lb[x, a1] - lb[x, a2]) - (lr[x, a1] - lr[x, a2])
    same = a1 == a2
    off = np.where(same, 0.0, off)
    if not np.all(np.isfinite(off)):
        raise ValueError("pair contains a response with zero probability")
    return off


@dataclass
class _PairProblem:
    diffs: np.ndarray
    offsets: np.ndarray
    targets: np.ndarray
    counts: np.ndarray
    gamma: float
    loss: DistillLoss

    def __call__(self, theta):
        g = self.gamma
        y = g * (self.diffs @ theta + self.offsets)
        z = self.targets
        c = self.counts
        if self.loss.kind is DistillLossKind.SQUARED:
            r = y - z
            return float(c @ (r * r)), (2 * g) * ((c * r) @ self.diffs)
        z = self.loss.beta * z
        val = bernoulli_kl(z, y)
        return float(c @ val), g * ((c * (sigmoid(y) - sigmoid(z))) @ self.diffs)


def _problem(theta_dim, inst: Instance, ref: SoftmaxPolicy, reward, data: PreferenceDataset,
             loss: DistillLoss, gamma: Optional[float] = None) -> _PairProblem:
    if len(data) == 0:
        raise ValueError("dataset is empty")
    x, a1, a2, cnt = data.compressed()
    reward = np.asarray(reward, dtype=float)
    return _PairProblem(inst.features[x, a1] - inst.features[x, a2],
                        _pair_offsets(inst, ref, x, a1, a2),
                        reward[x, a1] - reward[x, a2], cnt,
                        inst.gamma if gamma is None else gamma, loss)


def rd_loss(theta, ref_policy: SoftmaxPolicy, reward, dataset: PreferenceDataset,
            kind=DistillLossKind.SQUARED, beta: float = 1.0):
    """Sum over pairs of l(gamma * implicit gap, reward gap) and its gradient.

    The implicit gap is ln pi_theta(a1)/pi_theta(a2) - ln ref(a1)/ref(a2).
    SQUARED uses (y - z)^2; BINARY_KL uses KL(Bern(s(beta z)) || Bern(s(y))),
    the soft-label cross-entropy minus its label entropy.
    """
    inst = ref_policy.instance
    loss = kind if isinstance(kind, DistillLoss) else DistillLoss(kind, beta)
    prob = _problem(inst.dim, inst, ref_policy, reward, dataset, loss)
    return prob(np.asarray(theta, dtype=float))


def soft_label_cross_entropy(theta, ref_policy: SoftmaxPolicy, reward, dataset, beta: float = 1.0):
    """Preference-distillation objective with labels s(beta * reward gap)."""
    inst = ref_policy.instance
    x, a1, a2 = dataset.x, dataset.a_plus, dataset.a_minus
    reward = np.asarray(reward, dtype=float)
    y = inst.gamma * (inst.features[x, a1] - inst.features[x, a2]) @ np.asarray(theta, dtype=float)
    y = y + inst.gamma * _pair_offsets(inst, ref_policy, x, a1, a2)
    q = sigmoid(beta * (reward[x, a1] - reward[x, a2]))
    return float(-(q * log_sigmoid(y) + (1 - q) * log_sigmoid(-y)).sum())


def calibrated_reward(reward, current: SoftmaxPolicy, base: SoftmaxPolicy, gamma_c: float) -> np.ndarray:
    """r~ - gamma_c ln(current / base)."""
    lc, lb = current.log_probs(), base.log_probs()
    pc = np.exp(lc)
    bad = (np.exp(lb) == 0) & (pc > 0)
    if np.any(bad):
        raise ValueError("base policy has zero probability where the current one does not")
    ratio = np.where(np.isfinite(lc) & np.isfinite(lb), lc - np.where(np.isfinite(lb), lb, 0.0), 0.0)
    return np.asarray(reward, dtype=float) - gamma_c * ratio


def fit_distill(inst: Instance, ref: SoftmaxPolicy, reward, data: PreferenceDataset, config: DpoConfig,
                loss: DistillLoss, warm_start=None) -> np.ndarray:
    g, R, p = config.resolve(inst)
    prob = _problem(inst.dim, inst, ref, reward, data, loss, g)
    x0 = np.zeros(inst.dim) if warm_start is None else warm_start
    res = fit_projected(prob, x0, lambda th: project_lp_ball(th, 0.0, R, p),
                        config.grad_tol * len(data), config.max_steps, config.step_rule)
    return res.theta


def run_onpolicy_rd(instance: Instance, reward_model: RewardModel, mode: str, config: DpoConfig,
                    rng: np.random.Generator, gamma_c: Optional[float] = None,
                    loss: Optional[DistillLoss] = None, seed: int = -1) -> Trajectory:
    """Alternate on-policy pair sampling with a distillation fit per mode."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "reward-calibration" and gamma_c is None:
        raise ValueError("reward-calibration needs gamma_c")
    loss = DistillLoss() if loss is None else loss
    base = instance.base()
    theta = np.zeros(instance.dim)
    records = [evaluate_round(instance, theta, 0, 0, 0.0, with_mad=True)]
    for k, n_k in enumerate(config.batches()):
        t0 = time.perf_counter()
        current = instance.policy(theta)
        data = collect_pairs(current, n_k, rng, round_index=k, seed=seed, sampler_id=f"rd-{k}")
        if mode == "fixed-regularization":
            ref, reward = base, reward_model.table
        elif mode == "reward-calibration":
            ref, reward = current, calibrated_reward(reward_model.table, current, base, gamma_c)
        else:
            ref, reward = current, reward_model.table
        theta = fit_distill(instance, ref, reward, data, config, loss, warm_start=theta)
        records.append(evaluate_round(instance, theta, k + 1, n_k, time.perf_counter() - t0,
                                      with_mad=True))
    return Trajectory(records, seed)


@dataclass
class RebelSequence:
    policies: List[np.ndarray]  # each of shape (X, A)
    entropies: np.ndarray


def rebel_exact_tabular(base_policy, reward, gamma: float, K: int,
                        context_dist=None) -> RebelSequence:
    """Closed-form iterates pi_k proportional to pi0 exp(k r~ / gamma), k = 0..K."""
    base_policy = np.atleast_2d(np.asarray(base_policy, dtype=float))
    reward = np.atleast_2d(np.asarray(reward, dtype=float))
    if base_policy.shape != reward.shape:
        raise ValueError("base policy and reward shapes differ")
    w = np.full(len(base_policy), 1.0 / len(base_policy)) if context_dist is None else np.asarray(context_dist)
    with np.errstate(divide="ignore"):
        lb = np.log(base_policy)
    pols, ents = [], []
    for k in range(K + 1):
        z = lb + k * reward / gamma
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        pols.append(p)
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
        ents.append(float(w @ h))
    return RebelSequence(pols, np.array(ents))
