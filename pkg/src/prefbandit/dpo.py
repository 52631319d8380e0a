"""DPO objective, constrained fitting and the online/offline loops."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .bandit import Instance, SoftmaxPolicy, divergences, lp_norm
from .coverage import mad, pair_coverage
from .preference import (PreferenceDataset, RewardFunction, collect_dataset,
                         log_sigmoid, sigmoid)
from .projection import project_lp_ball

__all__ = ["DpoConfig", "RoundRecord", "Trajectory", "NumericalError", "dpo_loss_grad",
           "project_lp_ball", "fit_projected", "fit_dpo", "make_batch_schedule",
           "run_online_dpo", "run_offline_dpo", "offline_dataset", "evaluate_round"]


class NumericalError(ArithmeticError):
    pass


@dataclass
class DpoConfig:
    """Learner settings. gamma, R and p default to the instance values."""

    K: int = 1
    schedule: str = "constant"
    n: int = 1024
    n_final: Optional[int] = None
    eta: float = 0.5
    alpha: float = 2.0
    gamma: Optional[float] = None
    R: Optional[float] = None
    p: Optional[float] = None
    max_steps: int = 50_000
    grad_tol: float = 1e-8  # per sample; the effective tolerance is grad_tol * n
    step_rule: str = "bb-backtracking"
    delta: float = 0.05
    cumulative: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.p is not None and self.p not in (1, 2):
            raise ValueError("p must be 1 or 2")
        if self.step_rule not in ("bb-backtracking", "backtracking"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")

    def resolve(self, inst: Instance):
        g = inst.gamma if self.gamma is None else float(self.gamma)
        R = inst.radius if self.R is None else float(self.R)
        p = inst.norm_order if self.p is None else float(self.p)
        return g, R, p

    def batches(self) -> List[int]:
        return make_batch_schedule(self.schedule, self.n, self.n_final or self.n,
                                   self.eta, self.alpha, self.K)


def make_batch_schedule(kind: str, n_i: int, n_f: int, eta: float, alpha: float, K: int) -> List[int]:
    """Batch sizes n_0..n_{K-1}.

    'constant' repeats n_i. 'exp-decay' uses max(ceil(eta^(alpha k) n_i), n_f)
    with the last round set to n_f. 'super-exp' is exp-decay with
    eta = 1/ln K.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if kind == "constant":
        return [int(n_i)] * K
    if kind == "super-exp":
        eta = 1.0 / math.log(max(K, 3))
        kind = "exp-decay"
    if kind != "exp-decay":
        raise ValueError(f"unknown schedule {kind!r}")
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    if not n_i >= n_f >= 1:
        raise ValueError("need n_i >= n_f >= 1")
    if K == 1:
        return [int(n_i)]
    sizes = [max(math.ceil(eta ** (alpha * k) * n_i - 1e-9), n_f) for k in range(K - 1)]
    return [int(s) for s in sizes] + [int(n_f)]


def _pair_diffs(inst: Instance, data: PreferenceDataset):
    x, ap, am, cnt = data.compressed()
    return inst.features[x, ap] - inst.features[x, am], cnt


def dpo_loss_grad(theta, dataset: PreferenceDataset, instance: Instance, gamma: Optional[float] = None):
    """Sum of -ln sigmoid(gamma theta.(phi+ - phi-)) and its gradient."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    g = instance.gamma if gamma is None else gamma
    diffs, cnt = _pair_diffs(instance, dataset)
    return _dpo_from_diffs(np.asarray(theta, dtype=float), diffs, cnt, g)


def _dpo_from_diffs(theta, diffs, cnt, g):
    z = g * (diffs @ theta)
    loss = float(-(cnt * log_sigmoid(z)).sum())
    grad = -g * ((cnt * sigmoid(-z)) @ diffs)
    return loss, grad


@dataclass
class FitResult:
    theta: np.ndarray
    loss: float
    steps: int
    converged: bool
    losses: List[float] = field(default_factory=list)


def _stationarity(x, g, project) -> float:
    """Norm of the gradient mapping for a vanishing step, i.e. the part of
    the gradient that is not blocked by the constraint."""
    gn = float(np.linalg.norm(g))
    if gn == 0:
        return 0.0
    eps = 1e-6 * max(1.0, float(np.linalg.norm(x))) / gn
    return float(np.linalg.norm(x - project(x - eps * g))) / eps


def fit_projected(objective: Callable, x0, project: Callable, tol: float,
                  max_steps: int = 50_000, step_rule: str = "bb-backtracking",
                  record: bool = False) -> FitResult:
    """Projected gradient descent with a backtracking line search.

    A step t is accepted when f(x+) <= f(x) + g.(x+ - x) + |x+ - x|^2/(2t),
    which makes the loss non-increasing. Trial steps come from the
    Barzilai-Borwein rule. Stops once the constrained gradient norm is
    at most tol.
    """
    x = project(np.asarray(x0, dtype=float))
    f, g = objective(x)
    if not math.isfinite(f):
        raise NumericalError(f"non-finite loss {f} at the starting point")
    losses = [f] if record else []
    if _stationarity(x, g, project) <= tol:
        return FitResult(x, f, 0, True, losses)
    t = 1.0 / max(np.linalg.norm(g), 1e-12)
    prev = None
    for step in range(max_steps):
        if step_rule == "bb-backtracking" and prev is not None:
            s, y = x - prev[0], g - prev[1]
            sy = float(s @ y)
            if sy > 0:
                t = float(s @ s) / sy
        while True:
            xn = project(x - t * g)
            dx = xn - x
            fn, gn = objective(xn)
            if math.isfinite(fn) and fn <= f + g @ dx + (dx @ dx) / (2 * t) + 1e-13 * abs(f):
                break
            t *= 0.5
            if t < 1e-300:
                if not math.isfinite(fn):
                    raise NumericalError(f"non-finite loss at step {step}")
                return FitResult(x, f, step, False, losses)
        prev = (x, g)
        if fn > f:  # rounding-level increase; keep the better point
            return FitResult(x, f, step + 1, _stationarity(x, g, project) <= 10 * tol, losses)
        x, f, g = xn, fn, gn
        if record:
            losses.append(f)
        if _stationarity(x, g, project) <= tol:
            return FitResult(x, f, step + 1, True, losses)
        if step_rule == "backtracking":
            t *= 2.0
    return FitResult(x, f, max_steps, False, losses)


def fit_dpo(dataset: PreferenceDataset, constraint, config: DpoConfig, warm_start=None,
            instance: Optional[Instance] = None, record: bool = False) -> np.ndarray:
    """argmin of the DPO loss over the ball given as (center, radius, p)."""
    if instance is None:
        raise ValueError("instance is required")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    g, _, _ = config.resolve(instance)
    center, radius, p = constraint
    diffs, cnt = _pair_diffs(instance, dataset)
    center = np.broadcast_to(np.asarray(center, dtype=float), (instance.dim,))
    x0 = center.copy() if warm_start is None else warm_start
    res = fit_projected(lambda th: _dpo_from_diffs(th, diffs, cnt, g), x0,
                        lambda th: project_lp_ball(th, center, radius, p),
                        config.grad_tol * len(dataset), config.max_steps,
                        config.step_rule, record)
    return (res.theta, res) if record else res.theta


# trajectories


@dataclass
class RoundRecord:
    round: int
    n: int
    theta: np.ndarray
    err_p: float
    err_2: float
    kl_fwd: float
    kl_rev: float
    coverage: float
    seconds: float
    mad_err: Optional[float] = None


def evaluate_round(inst: Instance, theta, k: int, n: int, seconds: float,
                   with_mad: bool = False) -> RoundRecord:
    pi, star = inst.policy(theta), inst.target()
    div = divergences(pi, star)
    rec = RoundRecord(k, n, np.array(theta, dtype=float), inst.param_error(theta),
                      inst.param_error(theta, 2), div["kl"], div["reverse_kl"],
                      pair_coverage(pi, star), seconds)
    if with_mad:
        rec.mad_err = mad(star, inst.features @ (np.asarray(theta) - inst.true_param))
    return rec


@dataclass
class Trajectory:
    records: List[RoundRecord]
    seed: int = -1

    @property
    def thetas(self) -> List[np.ndarray]:
        return [r.theta for r in self.records]

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def __len__(self):
        return len(self.records)

    def to_csv(self, path=None) -> str:
        with_mad = any(r.mad_err is not None for r in self.records)
        cols = ["round", "n_k", "err_p", "err_2", "kl_fwd", "kl_rev", "coverage", "seconds", "seed"]
        if with_mad:
            cols.append("mad_err")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.records:
            row = [r.round, r.n, repr(r.err_p), repr(r.err_2), repr(r.kl_fwd), repr(r.kl_rev),
                   repr(r.coverage), repr(r.seconds), self.seed]
            if with_mad:
                row.append(repr(r.mad_err) if r.mad_err is not None else "")
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def run_online_dpo(instance: Instance, config: DpoConfig, rng: np.random.Generator,
                   seed: int = -1, labeler=None) -> Trajectory:
    """On-policy DPO: each round samples from the current policy, labels
    with the oracle and refits against pi0 inside the radius-R ball."""
    g, R, p = config.resolve(instance)
    labeler = RewardFunction.from_instance(instance) if labeler is None else labeler
    theta = np.zeros(instance.dim)
    records = [evaluate_round(instance, theta, 0, 0, 0.0)]
    pool = []
    for k, n_k in enumerate(config.batches()):
        t0 = time.perf_counter()
        data = collect_dataset(instance.policy(theta), n_k, labeler, rng, round_index=k,
                               seed=seed, sampler_id=f"online-{k}")
        if config.cumulative:
            pool.append(data)
            data = PreferenceDataset.concat(pool)
        theta = fit_dpo(data, (0.0, R, p), config, warm_start=theta, instance=instance)
        records.append(evaluate_round(instance, theta, k + 1, n_k, time.perf_counter() - t0))
    return Trajectory(records, seed)


def run_offline_dpo(instance: Instance, dataset: PreferenceDataset, epochs: int,
                    config: DpoConfig, seed: int = -1) -> Trajectory:
    """Refit on one fixed dataset `epochs` times, each warm-started."""
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    _, R, p = config.resolve(instance)
    theta = np.zeros(instance.dim)
    records = [evaluate_round(instance, theta, 0, 0, 0.0)]
    for e in range(epochs):
        t0 = time.perf_counter()
        theta = fit_dpo(dataset, (0.0, R, p), config, warm_start=theta, instance=instance)
        records.append(evaluate_round(instance, theta, e + 1, len(dataset), time.perf_counter() - t0))
    return Trajectory(records, seed)


def offline_dataset(instance: Instance, n: int, rng: np.random.Generator, seed: int = -1,
                    labeler=None) -> PreferenceDataset:
    labeler = RewardFunction.from_instance(instance) if labeler is None else labeler
    return collect_dataset(instance.base(), n, labeler, rng, seed=seed, sampler_id="base")
