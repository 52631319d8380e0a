"""Feature covariances, coverage ratios and the radius recursion."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .bandit import UNBOUNDED, Instance, SoftmaxPolicy, check_compatible, lp_norm
from .projection import project_lp_ball, sample_lp_ball

# eigenvalues below this fraction of the top one are treated as zero
RANK_TOL = 1e-10
# features have norm <= 1, so covariance entries are O(1); below this is rounding
ZERO_TOL = 1e-13


@dataclass
class CovarianceMatrix:
    matrix: np.ndarray
    basis: np.ndarray  # orthonormal basis of the identifiable subspace

    def restricted(self) -> np.ndarray:
        return self.basis.T @ self.matrix @ self.basis


def centered_covariance(features, marginal, conditional) -> np.ndarray:
    """sum_x mu(x) sum_a pi(a|x) (phi - phibar_x)(phi - phibar_x)^T."""
    features = np.asarray(features, dtype=float)
    mean = np.einsum("xa,xad->xd", conditional, features)
    second = np.einsum("x,xa,xai,xaj->ij", marginal, conditional, features, features)
    v = second - np.einsum("x,xi,xj->ij", marginal, mean, mean)
    return 0.5 * (v + v.T)


def covariance_matrix(pi: SoftmaxPolicy) -> np.ndarray:
    inst = pi.instance
    return centered_covariance(inst.features, inst.context_dist, pi.probs())


def feature_covariance(pi: SoftmaxPolicy) -> CovarianceMatrix:
    return CovarianceMatrix(covariance_matrix(pi), pi.instance.identifiable_basis())


def _batch_covariance(inst: Instance, thetas: np.ndarray) -> np.ndarray:
    z = inst.log_base[None] + np.einsum("xad,bd->bxa", inst.features, thetas)
    z -= z.max(axis=2, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=2, keepdims=True)
    f = inst.features
    mean = np.einsum("bxa,xad->bxd", p, f)
    second = np.einsum("x,bxa,xai,xaj->bij", inst.context_dist, p, f, f)
    v = second - np.einsum("x,bxi,bxj->bij", inst.context_dist, mean, mean)
    return 0.5 * (v + np.swapaxes(v, 1, 2))


def coverage_ratio(v_den: np.ndarray, v_num: np.ndarray) -> np.ndarray:
    """Smallest C with v_num <= C v_den in Loewner order, batched over v_den.

    v_den has shape (B, d, d) or (d, d). Mass of v_num outside the range of
    v_den gives UNBOUNDED; a zero v_num gives 0.
    """
    single = v_den.ndim == 2
    vb = v_den[None] if single else v_den
    ev, u = np.linalg.eigh(vb)
    top = ev.max(axis=1, keepdims=True)
    keep = ev > np.maximum(RANK_TOL * top, ZERO_TOL)
    proj = np.einsum("bia,ij,bjc->bac", u, v_num, u)
    diag = np.einsum("bii->bi", proj)
    tr = float(np.trace(v_num))
    off = np.where(keep, 0.0, diag).sum(axis=1)
    inv = np.where(keep, 1.0 / np.sqrt(np.where(keep, ev, 1.0)), 0.0)
    m = inv[:, :, None] * proj * inv[:, None, :]
    c = np.linalg.eigvalsh(m).max(axis=1)
    c = np.maximum(c, 0.0)
    if tr <= ZERO_TOL:
        c[:] = 0.0
    else:
        c[off > max(1e-9 * tr, ZERO_TOL)] = UNBOUNDED
    return c[0] if single else c


def pair_coverage(pi: SoftmaxPolicy, pi2: SoftmaxPolicy) -> float:
    """Coverage of pi2 by pi: smallest C with V(pi2) <= C V(pi)."""
    check_compatible(pi, pi2)
    return float(coverage_ratio(covariance_matrix(pi), covariance_matrix(pi2)))


def lambda_min_on_S(pi: SoftmaxPolicy) -> float:
    """Smallest eigenvalue of V(pi) on the identifiable subspace."""
    cov = feature_covariance(pi)
    if cov.basis.shape[1] == 0:
        return 0.0
    return float(np.linalg.eigvalsh(cov.restricted()).min())


def mad(pi: SoftmaxPolicy, f) -> float:
    """Mean absolute deviation E_{x, a~pi} |f(x,a) - E_{b~pi(x)} f(x,b)|."""
    p = pi.probs()
    f = np.asarray(f, dtype=float)
    centered = f - (p * f).sum(axis=1, keepdims=True)
    return float(pi.instance.context_dist @ (p * np.abs(centered)).sum(axis=1))


def mad_pair_coverage(pi: SoftmaxPolicy, pi2: SoftmaxPolicy, probes) -> float:
    """max over probe vectors u of MAD_pi2(u.phi) / MAD_pi(u.phi)."""
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    if probes.size == 0:
        raise ValueError("need at least one probe")
    feats = pi.instance.features
    best = 0.0
    for u in probes:
        f = feats @ u
        scale = max(np.abs(f).max(), 1.0)
        num, den = mad(pi2, f), mad(pi, f)
        tiny = 1e-14 * scale
        if den <= tiny:
            ratio = 1.0 if num <= tiny else UNBOUNDED
        else:
            ratio = num / den
        best = max(best, ratio)
    return best


# local coverage


@dataclass
class CoveragePoint:
    r: float
    value: float
    theta: np.ndarray


@dataclass
class CoverageCurve:
    radii: np.ndarray
    values: np.ndarray
    thetas: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.radii.shape != self.values.shape or self.radii.ndim != 1:
            raise ValueError("radii and values must be matching 1-d arrays")

    def __call__(self, r):
        return np.interp(r, self.radii, self.values)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["r", "C_hat", "argmax_theta_serialized"])
        for i, (r, c) in enumerate(zip(self.radii, self.values)):
            th = " ".join(repr(float(t)) for t in self.thetas[i]) if self.thetas else ""
            w.writerow([repr(float(r)), repr(float(c)), th])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "CoverageCurve":
        if isinstance(source, str) and "\n" in source:
            text = source
        else:
            with open(source, newline="") as fh:
                text = fh.read()
        rows = list(csv.reader(io.StringIO(text)))[1:]
        thetas = [np.array([float(t) for t in r[2].split()]) for r in rows]
        return cls([float(r[0]) for r in rows], [float(r[1]) for r in rows], thetas)


def _coverage_of_thetas(inst: Instance, thetas: np.ndarray, v_star: np.ndarray) -> np.ndarray:
    out = np.empty(len(thetas))
    for s in range(0, len(thetas), 512):
        out[s:s + 512] = coverage_ratio(_batch_covariance(inst, thetas[s:s + 512]), v_star)
    return out


def local_coverage_estimate(instance: Instance, r: float, p: Optional[float] = None,
                            budget: int = 512, rng: Optional[np.random.Generator] = None,
                            starts: Sequence = (), refine_steps: int = 200) -> CoveragePoint:
    """Certified lower bound on the worst coverage of pi* over the ball
    of radius r around theta*.

    Candidates are theta*, the 2d axis endpoints of the ball, `budget`
    uniform ball samples and any extra `starts`; the best one is refined by
    projected coordinate ascent. The returned theta attains the value.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    p = instance.norm_order if p is None else p
    if r < 0 or r > instance.radius * (1 + 1e-12):
        raise ValueError("need 0 <= r <= R")
    rng = np.random.default_rng() if rng is None else rng
    center = instance.true_param
    d = instance.dim
    v_star = covariance_matrix(instance.target())
    base_value = 1.0 if np.trace(v_star) > 0 else 0.0
    if r == 0:
        return CoveragePoint(0.0, base_value, center.copy())

    cands = [center[None], center + r * np.eye(d), center - r * np.eye(d),
             center + sample_lp_ball(d, r, p, budget, rng)]
    starts = [np.asarray(s, dtype=float) for s in starts]
    if starts:
        cands.append(np.array([project_lp_ball(s, center, r, p) for s in starts]))
    cands = np.concatenate(cands)
    vals = _coverage_of_thetas(instance, cands, v_star)
    vals[0] = base_value
    i = int(np.argmax(vals))  # lowest index among ties
    best, best_val = cands[i].copy(), float(vals[i])

    step = 0.5 * r
    for _ in range(refine_steps):
        if not math.isfinite(best_val) or step < 1e-4 * r:
            break
        moves = np.concatenate([np.eye(d), -np.eye(d)]) * step
        trial = np.array([project_lp_ball(best + m, center, r, p) for m in moves])
        tv = _coverage_of_thetas(instance, trial, v_star)
        j = int(np.argmax(tv))
        if tv[j] > best_val * (1 + 1e-12):
            best, best_val = trial[j], float(tv[j])
        else:
            step *= 0.5
    # replay so the reported value is exactly the coverage at best
    best_val = pair_coverage(instance.policy(best), instance.target()) if r > 0 else best_val
    return CoveragePoint(float(r), best_val, best)


def coverage_curve(instance: Instance, radii, p: Optional[float] = None, budget: int = 512,
                   rng: Optional[np.random.Generator] = None, refine_steps: int = 200) -> CoverageCurve:
    """Local coverage on an increasing grid. Each radius is warm-started
    from the previous maximizer, which stays feasible, so the curve is
    nondecreasing."""
    radii = np.asarray(radii, dtype=float)
    if np.any(np.diff(radii) <= 0):
        raise ValueError("radii must be strictly increasing")
    rng = np.random.default_rng() if rng is None else rng
    vals, thetas, prev = [], [], []
    for r in radii:
        pt = local_coverage_estimate(instance, float(r), p, budget, rng, starts=prev,
                                     refine_steps=refine_steps)
        if vals and pt.value < vals[-1]:
            pt = CoveragePoint(float(r), vals[-1], thetas[-1])
        vals.append(pt.value)
        thetas.append(pt.theta)
        prev = [pt.theta]
    return CoverageCurve(radii, vals, thetas)


# minimum softmax probability over an L_p ball


def _softmax_min_value(delta, alpha, beta, m, k):
    # theta = (-delta, alpha repeated m times, beta repeated k times)
    return 1.0 / (1.0 + m * np.exp(alpha + delta) + k * np.exp(beta + delta))


def _reduced_point(d, delta, alpha, beta, m, k):
    return np.concatenate([[-delta], np.full(m, alpha), np.full(k, beta)])


def _best_alpha(R, p, delta, m, k, grid=65):
    budget = max(R ** p - delta ** p, 0.0)
    if m == 0 and k == 0:
        return 0.0, 0.0, _softmax_min_value(delta, 0.0, 0.0, 0, 0)
    if k == 0:
        a = (budget / m) ** (1 / p)
        return a, 0.0, _softmax_min_value(delta, a, 0.0, m, 0)
    if m == 0:
        b = (budget / k) ** (1 / p)
        return 0.0, b, _softmax_min_value(delta, 0.0, b, 0, k)
    amax = (budget / m) ** (1 / p)

    def val(a):
        b = (np.maximum(budget - m * np.asarray(a) ** p, 0.0) / k) ** (1 / p)
        return _softmax_min_value(delta, a, b, m, k)

    ag = np.linspace(0.0, amax, grid)
    j = int(np.argmin(val(ag)))
    lo, hi = ag[max(j - 1, 0)], ag[min(j + 1, grid - 1)]
    res = minimize_scalar(lambda a: float(val(a)), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12 * max(amax, 1.0)})
    a = float(res.x) if res.fun < val(ag[j]) else float(ag[j])
    b = float((max(budget - m * a ** p, 0.0) / k) ** (1 / p))
    return a, b, float(val(a))


def min_softmax_over_ball(d: int, R: float, p: float):
    """min over ||theta||_p <= R of min_i softmax(theta)_i, with the argmin.

    For p = 1 the value is 1/((d-1)e^R + 1) at theta = (-R, 0, ..., 0).
    For p > 1 the search runs over points with one negative coordinate and
    the rest at two nonnegative levels.
    """
    if R <= 0 or d < 2 or not 1 <= p <= 2:
        raise ValueError("need R > 0, d >= 2 and p in [1, 2]")
    if p == 1:
        theta = np.zeros(d)
        theta[0] = -R
        return 1.0 / ((d - 1) * math.exp(R) + 1.0), theta
    best = (math.inf, None)
    for k in range(d):
        m = d - 1 - k

        def outer(delta):
            return _best_alpha(R, p, delta, m, k)[2]

        dg = np.linspace(0.0, R, 65)
        vals = np.array([outer(t) for t in dg])
        j = int(np.argmin(vals))
        lo, hi = dg[max(j - 1, 0)], dg[min(j + 1, 64)]
        res = minimize_scalar(outer, bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12 * R})
        delta = float(res.x) if res.fun < vals[j] else float(dg[j])
        a, b, v = _best_alpha(R, p, delta, m, k)
        if v < best[0]:
            best = (v, _reduced_point(d, delta, a, b, m, k))
    return best


# theory predictor


def xi_coefficient(n, gamma, R, d, p, lam, delta) -> float:
    if n <= 0 or lam <= 0 or gamma <= 0:
        raise ValueError("n, lambda and gamma must be positive")
    log_term = math.log(9 * gamma * R * n / delta)
    return 52 * math.exp(4 * gamma * R) * d ** (2.0 / p) / (lam * gamma ** 2 * n) * log_term


@dataclass
class RadiusPrediction:
    radii: np.ndarray
    xi: float
    halted: bool
    halted_at: Optional[int] = None


def radius_recursion_predict(curve: CoverageCurve, n, gamma, R, d, p, lam, delta, K) -> RadiusPrediction:
    """Iterate r_{k+1}^2 = xi * C(r_k) from r_0 = R.

    Stops early, flagging the halt, once r_{k+1} exceeds min(1/(2 gamma), R).
    """
    if curve.radii[0] > 0 or curve.radii[-1] < R * (1 - 1e-12):
        raise ValueError("curve must cover [0, R]")
    xi = xi_coefficient(n, gamma, R, d, p, lam, delta)
    cap = min(1.0 / (2 * gamma), R)
    radii = [float(R)]
    for k in range(int(K)):
        nxt = math.sqrt(max(xi * float(curve(radii[-1])), 0.0))
        if nxt > cap * (1 + 1e-12):
            return RadiusPrediction(np.array(radii), xi, True, k + 1)
        radii.append(nxt)
    return RadiusPrediction(np.array(radii), xi, False)


@dataclass
class ConvexityReport:
    convex: bool
    worst_violation: float
    kappa: float  # smallest kappa making the sublevel set an interval

    def __bool__(self):
        return self.convex


def sqrt_convexity_check(curve: CoverageCurve) -> ConvexityReport:
    """Discrete convexity of sqrt(C) on the (possibly uneven) grid."""
    r, c = curve.radii, curve.values
    if len(r) < 3:
        raise ValueError("need at least three grid points")
    g = np.sqrt(c)
    t = (r[1:-1] - r[:-2]) / (r[2:] - r[:-2])
    chord = g[:-2] + t * (g[2:] - g[:-2])
    with np.errstate(invalid="ignore"):
        viol = np.where(np.isfinite(chord), g[1:-1] - chord, 0.0)
    worst = float(max(viol.max(), 0.0))
    tol = 1e-12 * max(1.0, float(np.abs(g[np.isfinite(g)]).max()))
    return ConvexityReport(worst <= tol, worst, _kappa(r, c))


def _kappa(r, c) -> float:
    pos = r > 0
    if not np.any(pos) or not math.isfinite(c[-1]) or c[-1] <= 0:
        return math.nan
    h = (c[pos] / r[pos] ** 2) / (c[-1] / r[-1] ** 2)
    for kappa in np.unique(np.maximum(h, 1.0)):
        idx = np.nonzero(h <= kappa)[0]
        if len(idx) and idx[-1] - idx[0] + 1 == len(idx):
            return float(kappa)
    return float(h.max())
