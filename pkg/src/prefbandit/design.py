"""G-optimal designs, centered per-prompt designs and the preferential
design over prompt-response pairs, plus the two-round learner that mixes
the design into on-policy sampling."""
from __future__ import annotations

import csv
import io
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg

from .bandit import Instance, SoftmaxPolicy
from .coverage import RANK_TOL, centered_covariance, covariance_matrix, pair_coverage
from .dpo import DpoConfig, Trajectory, evaluate_round, fit_dpo
from .preference import RewardFunction, collect_dataset
from .bandit import _draw, _draw_rows


def _pinv_psd(m: np.ndarray) -> np.ndarray:
    ev, u = np.linalg.eigh(0.5 * (m + m.T))
    top = ev.max(initial=0.0)
    keep = ev > RANK_TOL * top if top > 0 else np.zeros_like(ev, dtype=bool)
    inv = np.where(keep, 1.0 / np.where(keep, ev, 1.0), 0.0)
    return (u * inv) @ u.T


def leverages(vectors: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """psi_i^T M(w)^+ psi_i with M(w) = sum_i w_i psi_i psi_i^T."""
    m = (vectors * weights[:, None]).T @ vectors
    return np.einsum("ij,jk,ik->i", vectors, _pinv_psd(m), vectors)


@dataclass
class Design:
    """Weights over a finite vector set with its replayed leverage certificate."""

    weights: np.ndarray
    certificate: float
    argmax: int
    dim: int
    certified: bool
    iterations: int = 0

    def support(self, cutoff: float = 1e-9) -> np.ndarray:
        return np.nonzero(self.weights >= cutoff)[0]


def span_dimension(vectors: np.ndarray) -> int:
    if vectors.size == 0:
        return 0
    s = np.linalg.svd(vectors, compute_uv=False)
    return int((s > 1e-10 * max(s.max(initial=0.0), 1e-300)).sum()) if s.max(initial=0.0) > 0 else 0


def g_optimal_frank_wolfe(vectors, tol: float = 0.01, max_iters: int = 10_000) -> Design:
    """Design whose max leverage is at most (1 + tol) times the span dimension.

    Works in the span of the vectors. Starts uniform on a spanning subset
    picked by pivoted QR and repeatedly moves mass toward the vector of
    largest leverage with the exact line-search step.
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    n = len(vectors)
    if n == 0:
        raise ValueError("need at least one vector")
    _, s, vt = np.linalg.svd(vectors, full_matrices=False)
    top = s.max(initial=0.0)
    r = int((s > 1e-10 * top).sum()) if top > 0 else 0
    if r == 0:
        w = np.full(n, 1.0 / n)
        return Design(w, 0.0, 0, 0, True, 0)
    psi = vectors @ vt[:r].T  # coordinates in the span

    _, _, piv = scipy.linalg.qr(psi.T, pivoting=True, mode="economic")
    w = np.zeros(n)
    w[piv[:r]] = 1.0 / r
    minv = np.linalg.inv((psi * w[:, None]).T @ psi)
    lev = np.einsum("ij,jk,ik->i", psi, minv, psi)
    it = 0
    while it < max_iters:
        j = int(np.argmax(lev))
        gj = lev[j]
        if gj <= r * (1 + tol):
            break
        step = (gj / r - 1.0) / (gj - 1.0)
        # rank-one update of the inverse for M' = (1 - step) M + step psi_j psi_j^T
        u = minv @ psi[j]
        c = step / (1 - step)
        minv = (minv - np.outer(u, u) * (c / (1 + c * gj))) / (1 - step)
        w *= 1 - step
        w[j] += step
        pu = psi @ u
        lev = (lev - (c / (1 + c * gj)) * pu * pu) / (1 - step)
        it += 1
        if it % 200 == 0:  # refresh against rounding drift
            minv = np.linalg.inv((psi * w[:, None]).T @ psi)
            lev = np.einsum("ij,jk,ik->i", psi, minv, psi)
    w = np.maximum(w, 0.0)
    w /= w.sum()
    levs = leverages(vectors, w)
    j = int(np.argmax(levs))
    cert = float(levs[j])
    return Design(w, cert, j, r, cert <= r * (1 + tol) + 1e-9, it)


def d_optimality_gap(vectors, weights) -> float:
    """Upper bound r ln(max leverage / r) on log det M* - log det M(w)."""
    levs = leverages(np.asarray(vectors, dtype=float), np.asarray(weights, dtype=float))
    r = span_dimension(np.asarray(vectors, dtype=float))
    if r == 0:
        return 0.0
    return r * math.log(max(levs.max() / r, 1.0))


@dataclass
class ConditionalDesign:
    x: int
    weights: np.ndarray
    centered_leverage: float
    argmax: int
    dim: int
    certified: bool


def conditional_centered_design(instance: Instance, x: int, tol: float = 0.01,
                                max_iters: int = 10_000) -> ConditionalDesign:
    """Design over responses for prompt x from the augmented vectors (1, phi).

    Its centered leverage max_a |phi(x,a) - mean|^2 in the pseudo-inverse
    of V(x, design) is about the augmented span dimension minus one.
    """
    feats = instance.features[x]
    aug = np.hstack([np.ones((len(feats), 1)), feats])
    des = g_optimal_frank_wolfe(aug, tol, max_iters)
    w = des.weights
    lev = centered_leverages(feats, w)
    j = int(np.argmax(lev))
    return ConditionalDesign(x, w, float(lev[j]), j, des.dim - 1, des.certified)


def centered_leverages(feats: np.ndarray, w: np.ndarray) -> np.ndarray:
    mean = w @ feats
    c = feats - mean
    v = (c * w[:, None]).T @ c
    return np.einsum("ij,jk,ik->i", c, _pinv_psd(v), c)


@dataclass
class DesignDistribution:
    """Joint design over prompt-response pairs: prompt marginal times a
    per-prompt conditional."""

    marginal: np.ndarray  # (X,)
    conditional: np.ndarray  # (X, A)
    certificate: float
    argmax: Tuple[int, int]
    dim: int
    certified: bool
    conditionals: List[ConditionalDesign] = field(default_factory=list)
    marginal_objective: Optional[float] = None
    sampler_id: str = "design"

    @property
    def joint(self) -> np.ndarray:
        return self.marginal[:, None] * self.conditional

    def sample_pairs(self, n: int, rng: np.random.Generator):
        x = _draw(self.marginal, n, rng)
        return x, _draw_rows(self.conditional, x, rng), _draw_rows(self.conditional, x, rng)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "a", "weight"])
        joint = self.joint
        for x in range(joint.shape[0]):
            for a in range(joint.shape[1]):
                w.writerow([x, a, repr(float(joint[x, a]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
            with open(str(path) + ".summary", "w") as fh:
                fh.write(self.summary() + "\n")
        return text

    def summary(self) -> str:
        return (f"certificate={self.certificate!r} x={self.argmax[0]} a={self.argmax[1]} "
                f"dim={self.dim} certified={self.certified} "
                f"marginal_objective={self.marginal_objective!r}")


def design_leverage(features, marginal, conditional) -> Tuple[float, Tuple[int, int]]:
    """sup over (x, a) of |phi(x,a) - phi(x, cond)|^2 in V(marginal x cond)^+."""
    mean = np.einsum("xa,xad->xd", conditional, features)
    c = features - mean[:, None, :]
    v = centered_covariance(features, marginal, conditional)
    lev = np.einsum("xai,ij,xaj->xa", c, _pinv_psd(v), c)
    idx = np.unravel_index(int(np.argmax(lev)), lev.shape)
    return float(lev[idx]), (int(idx[0]), int(idx[1]))


def optimize_marginal(features, conditional, start, iters: int = 500) -> Tuple[np.ndarray, float]:
    """Minimize the design leverage over the prompt marginal by
    exponentiated subgradient steps, returning the best iterate seen."""
    mu = np.asarray(start, dtype=float).copy()
    best_val, _ = design_leverage(features, mu, conditional)
    best = mu.copy()
    mean = np.einsum("xa,xad->xd", conditional, features)
    c = features - mean[:, None, :]
    blocks = [(c[x] * conditional[x][:, None]).T @ c[x] for x in range(len(mu))]
    lr = 0.5
    for t in range(iters):
        v = sum(m * b for m, b in zip(mu, blocks))
        vinv = _pinv_psd(v)
        lev, (x0, a0) = design_leverage(features, mu, conditional)
        u = vinv @ c[x0, a0]
        grad = -np.array([u @ b @ u for b in blocks])
        scale = max(np.abs(grad).max(), 1e-300)
        mu = mu * np.exp(-lr / math.sqrt(t + 1) * grad / scale)
        mu /= mu.sum()
        val, _ = design_leverage(features, mu, conditional)
        if val < best_val:
            best_val, best = val, mu.copy()
    return best, best_val


def preferential_design(instance: Instance, tol: float = 0.01, max_iters: int = 10_000,
                        workers: int = 1, marginal_iters: int = 0) -> DesignDistribution:
    """Per-prompt centered designs, then a joint G-optimal design on the
    centered features; the result is marginal(x) * conditional(a|x).

    The replayed certificate must be at most (1 + tol) d'^2 for the
    centered span dimension d'. With marginal_iters > 0 the prompt marginal
    is also optimized directly and that objective value is reported.
    """
    nx = instance.n_prompts

    def cond(x):
        try:
            return conditional_centered_design(instance, x, tol, max_iters)
        except Exception as exc:  # keep the prompt id in the message
            raise RuntimeError(f"conditional design failed at prompt {x}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            conds = list(ex.map(cond, range(nx)))
    else:
        conds = [cond(x) for x in range(nx)]
    cg = np.array([c.weights for c in conds])
    feats = instance.features
    centered = feats - np.einsum("xa,xad->xd", cg, feats)[:, None, :]
    flat = centered.reshape(-1, instance.dim)
    joint = g_optimal_frank_wolfe(flat, tol, max_iters)
    marginal = joint.weights.reshape(nx, -1).sum(axis=1)
    marginal = marginal / marginal.sum()
    cert, arg = design_leverage(feats, marginal, cg)
    dim = span_dimension(flat)
    certified = cert <= dim ** 2 * (1 + tol) + 1e-9
    if not certified:
        warnings.warn(f"design certificate {cert:.6g} exceeds {dim}^2 (1 + tol)")
    mobj = None
    if marginal_iters > 0 and nx > 1:
        _, mobj = optimize_marginal(feats, cg, marginal, marginal_iters)
    elif marginal_iters > 0:
        mobj = cert
    return DesignDistribution(marginal, cg, cert, arg, dim, certified, conds, mobj)


class MixtureSampler:
    """Per pair: choose a component, then draw the prompt and both responses
    from it."""

    def __init__(self, components, weights, sampler_id: str = "mixture"):
        self.components = list(components)
        self.weights = np.asarray(weights, dtype=float)
        if len(self.components) != len(self.weights) or abs(self.weights.sum() - 1) > 1e-12:
            raise ValueError("mixture weights must sum to 1, one per component")
        self.sampler_id = sampler_id

    def sample_pairs(self, n: int, rng: np.random.Generator):
        comp = _draw(self.weights, n, rng)
        x = np.zeros(n, dtype=np.int64)
        a1 = np.zeros(n, dtype=np.int64)
        a2 = np.zeros(n, dtype=np.int64)
        for c, sampler in enumerate(self.components):
            idx = np.nonzero(comp == c)[0]
            if len(idx):
                xs, b1, b2 = sampler.sample_pairs(len(idx), rng)
                x[idx], a1[idx], a2[idx] = xs, b1, b2
        return x, a1, a2


def v_norm(instance: Instance, diff, policy: SoftmaxPolicy) -> float:
    v = covariance_matrix(policy)
    diff = np.asarray(diff, dtype=float)
    return float(math.sqrt(max(diff @ v @ diff, 0.0)))


@dataclass
class TwoStepResult:
    theta: np.ndarray
    trajectory: Trajectory
    design: DesignDistribution
    v_errors: List[float]  # |theta_k - theta*| in the V(pi*) norm, k = 0, 1, 2
    design_errors: List[float]  # same in the V(design) norm
    coverage_1: float


def run_two_step_dpo(instance: Instance, n: int, config: DpoConfig, rng: np.random.Generator,
                     design: Optional[DesignDistribution] = None, design_weight: float = 0.5,
                     seed: int = -1, labeler=None) -> TwoStepResult:
    """Two rounds of DPO whose samples come half from the current policy and
    half from the preferential design."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0 <= design_weight <= 1:
        raise ValueError("design_weight must lie in [0, 1]")
    _, R, p = config.resolve(instance)
    design = preferential_design(instance) if design is None else design
    labeler = RewardFunction.from_instance(instance) if labeler is None else labeler
    star = instance.target()
    v_design = centered_covariance(instance.features, design.marginal, design.conditional)
    theta = np.zeros(instance.dim)

    def errs(th):
        diff = th - instance.true_param
        return v_norm(instance, diff, star), float(math.sqrt(max(diff @ v_design @ diff, 0.0)))

    e0 = errs(theta)
    v_errors, d_errors = [e0[0]], [e0[1]]
    records = [evaluate_round(instance, theta, 0, 0, 0.0)]
    for k in range(2):
        t0 = time.perf_counter()
        mix = MixtureSampler([instance.policy(theta), design], [1 - design_weight, design_weight],
                             sampler_id=f"two-step-{k}")
        data = collect_dataset(mix, n, labeler, rng, round_index=k, seed=seed)
        theta = fit_dpo(data, (0.0, R, p), config, warm_start=theta, instance=instance)
        records.append(evaluate_round(instance, theta, k + 1, n, time.perf_counter() - t0))
        e = errs(theta)
        v_errors.append(e[0])
        d_errors.append(e[1])
    cov1 = records[1].coverage
    return TwoStepResult(theta, Trajectory(records, seed), design, v_errors, d_errors, cov1)
