"""Finite contextual bandits with linear softmax policies.

An instance holds a prompt distribution, a feature table phi[x, a] of
d-vectors, a base policy pi0[x, a], the temperature gamma, the parameter
radius R under an L_p norm and the true parameter theta*.
Policies are pi_theta(a|x) proportional to pi0(a|x) exp(theta . phi(x, a)).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

UNBOUNDED = math.inf

_SUM_TOL = 1e-12
_NORM_TOL = 1e-9


class InstanceError(ValueError):
    pass


def lp_norm(v, p: float) -> float:
    v = np.asarray(v, dtype=float)
    if p == 2:
        return float(np.linalg.norm(v))
    if p == 1:
        return float(np.abs(v).sum())
    if math.isinf(p):
        return float(np.abs(v).max(initial=0.0))
    return float((np.abs(v) ** p).sum() ** (1.0 / p))


@dataclass(frozen=True, eq=False)
class Instance:
    """Immutable bandit instance.

    Arrays have shapes context_dist (X,), features (X, A, d),
    base_policy (X, A) and true_param (d,).
    """

    context_dist: np.ndarray
    features: np.ndarray
    base_policy: np.ndarray
    gamma: float
    radius: float
    norm_order: float
    true_param: np.ndarray
    recipe: dict = field(default_factory=dict)

    def __post_init__(self):
        cd = np.array(self.context_dist, dtype=float)
        ft = np.array(self.features, dtype=float)
        bp = np.array(self.base_policy, dtype=float)
        th = np.array(self.true_param, dtype=float)
        if ft.ndim != 3:
            raise InstanceError("features must have shape (X, A, d)")
        nx, na, d = ft.shape
        if nx < 1 or na < 2 or d < 1:
            raise InstanceError(f"need |X| >= 1, |A| >= 2, d >= 1, got {ft.shape}")
        if cd.shape != (nx,) or bp.shape != (nx, na) or th.shape != (d,):
            raise InstanceError("inconsistent array shapes")
        if not (np.all(np.isfinite(ft)) and np.all(np.isfinite(th))):
            raise InstanceError("features and true_param must be finite")
        if np.linalg.norm(ft, axis=2).max() > 1 + _NORM_TOL:
            raise InstanceError("every feature vector needs Euclidean norm <= 1")
        if cd.min() < 0 or abs(cd.sum() - 1) > _SUM_TOL:
            raise InstanceError("context_dist must be a probability vector")
        if bp.min() < 0 or np.abs(bp.sum(axis=1) - 1).max() > _SUM_TOL:
            raise InstanceError("base_policy rows must be probability vectors")
        if not self.gamma > 0 or not self.radius > 0:
            raise InstanceError("gamma and radius must be positive")
        if not 1 <= self.norm_order <= 2:
            raise InstanceError("norm_order must lie in [1, 2]")
        if lp_norm(th, self.norm_order) > self.radius * (1 + 1e-12) + 1e-12:
            raise InstanceError("true_param lies outside the radius-R ball")
        for name, arr in (("context_dist", cd), ("features", ft),
                          ("base_policy", bp), ("true_param", th)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "norm_order", float(self.norm_order))
        object.__setattr__(self, "recipe", dict(self.recipe))
        with np.errstate(divide="ignore"):
            lb = np.log(bp)
        lb.setflags(write=False)
        object.__setattr__(self, "_log_base", lb)
        object.__setattr__(self, "_basis", None)

    @property
    def n_prompts(self) -> int:
        return self.features.shape[0]

    @property
    def n_responses(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @property
    def log_base(self) -> np.ndarray:
        return self._log_base

    def is_tabular(self) -> bool:
        """True when phi(x, a) = e_a for every prompt."""
        nx, na, d = self.features.shape
        if na != d:
            return False
        eye = np.eye(d)
        return all(np.array_equal(self.features[x], eye) for x in range(nx))

    def identifiable_basis(self) -> np.ndarray:
        """Orthonormal basis (d, k) for the span of within-prompt feature
        differences. Only this component of theta changes any policy.

        For phi(x, a) = e_a it is the complement of the all-ones vector,
        and for generic features it is the whole space.
        """
        if self._basis is None:
            diffs = (self.features - self.features[:, :1, :]).reshape(-1, self.dim)
            _, s, vt = np.linalg.svd(diffs, full_matrices=False)
            tol = 1e-10 * max(s.max(initial=0.0), 1.0)
            q = vt[s > tol].T.copy()
            q.setflags(write=False)
            object.__setattr__(self, "_basis", q)
        return self._basis

    def canonical(self, theta) -> np.ndarray:
        """Project theta onto the identifiable subspace."""
        q = self.identifiable_basis()
        theta = np.asarray(theta, dtype=float)
        if q.shape[1] == self.dim:
            return theta.copy()
        return q @ (q.T @ theta)

    def policy(self, theta=None) -> "SoftmaxPolicy":
        return SoftmaxPolicy(self.true_param if theta is None else theta, self)

    def base(self) -> "SoftmaxPolicy":
        return SoftmaxPolicy(np.zeros(self.dim), self)

    def target(self) -> "SoftmaxPolicy":
        return SoftmaxPolicy(self.true_param, self)

    def param_error(self, theta, p: Optional[float] = None) -> float:
        """Distance to theta* after canonicalization, in the L_p norm."""
        diff = self.canonical(np.asarray(theta, dtype=float) - self.true_param)
        return lp_norm(diff, self.norm_order if p is None else p)

    def replace(self, **kw) -> "Instance":
        fields_ = dict(context_dist=self.context_dist, features=self.features,
                       base_policy=self.base_policy, gamma=self.gamma,
                       radius=self.radius, norm_order=self.norm_order,
                       true_param=self.true_param, recipe=self.recipe)
        fields_.update(kw)
        return Instance(**fields_)


class SoftmaxPolicy:
    """pi_theta(a|x) proportional to pi0(a|x) exp(theta . phi(x, a))."""

    def __init__(self, theta, instance: Instance):
        theta = np.array(theta, dtype=float).reshape(-1)
        if theta.shape != (instance.dim,):
            raise ValueError(f"theta must have length {instance.dim}")
        self.theta = theta
        self.instance = instance
        self._logp = None

    def log_partition(self) -> np.ndarray:
        """A_x(theta) = ln sum_a pi0(a|x) exp(theta . phi(x, a)), per prompt."""
        inst = self.instance
        return logsumexp(inst.log_base + inst.features @ self.theta, axis=1)

    def log_probs(self) -> np.ndarray:
        if self._logp is None:
            inst = self.instance
            z = inst.log_base + inst.features @ self.theta
            lp = z - logsumexp(z, axis=1, keepdims=True)
            lp.setflags(write=False)
            self._logp = lp
        return self._logp

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def sample(self, rng: np.random.Generator, size: Optional[int] = None):
        return sample(self, rng, size)

    def sample_pairs(self, n: int, rng: np.random.Generator):
        """n prompts from the context distribution, two responses each."""
        inst = self.instance
        x = _draw(inst.context_dist, n, rng)
        probs = self.probs()
        a1 = _draw_rows(probs, x, rng)
        a2 = _draw_rows(probs, x, rng)
        return x, a1, a2

    def __repr__(self):
        return f"SoftmaxPolicy(theta={self.theta!r})"


def _draw(p, n, rng):
    cdf = np.cumsum(p)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    return np.minimum(idx, len(p) - 1)


def _draw_rows(table, rows, rng):
    """One draw from table[row] for each entry of rows."""
    cdf = np.cumsum(table, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random(len(rows))
    idx = (cdf[rows] <= u[:, None]).sum(axis=1)
    return np.minimum(idx, table.shape[1] - 1)


def policy_prob(policy: SoftmaxPolicy, x: int, a: int) -> float:
    inst = policy.instance
    if not (0 <= x < inst.n_prompts and 0 <= a < inst.n_responses):
        raise IndexError(f"(x={x}, a={a}) out of range")
    return float(math.exp(policy.log_probs()[x, a]))


def sample(policy: SoftmaxPolicy, rng: np.random.Generator, size: Optional[int] = None):
    """Draw x from the context distribution and a from pi_theta(.|x)."""
    n = 1 if size is None else int(size)
    x = _draw(policy.instance.context_dist, n, rng)
    a = _draw_rows(policy.probs(), x, rng)
    if size is None:
        return int(x[0]), int(a[0])
    return x, a


def check_compatible(pi: SoftmaxPolicy, pi2: SoftmaxPolicy):
    # distributions must live on the same X x A with the same prompt weights
    a, b = pi.instance, pi2.instance
    if a is not b and (a.features.shape != b.features.shape
                       or not np.array_equal(a.context_dist, b.context_dist)):
        raise ValueError("policies must be defined on the same prompts and responses")


def divergences(pi: SoftmaxPolicy, pi2: SoftmaxPolicy) -> dict:
    """Exact KL(pi||pi2), KL(pi2||pi), chi2(pi||pi2) and max pi/pi2.

    Divergences average over the context distribution. Support mismatch
    yields UNBOUNDED instead of an exception.
    """
    check_compatible(pi, pi2)
    w = pi.instance.context_dist
    lp, lq = pi.log_probs(), pi2.log_probs()
    p, q = np.exp(lp), np.exp(lq)
    live = w > 0

    def kl(lpa, lpb, pa):
        pos = pa > 0
        if np.any(pos & np.isneginf(lpb) & live[:, None]):
            return UNBOUNDED
        with np.errstate(invalid="ignore"):
            terms = np.where(pos, pa * (lpa - np.where(pos, lpb, 0.0)), 0.0)
        return max(float(w @ terms.sum(axis=1)), 0.0)

    pos = (p > 0) & live[:, None]
    if np.any(pos & (q == 0)):
        chi2 = UNBOUNDED
        ratio = UNBOUNDED
    else:
        lr = np.where(pos, lp - np.where(pos, lq, 0.0), -np.inf)
        # sum_a p^2/q = sum_a p * exp(lp - lq)
        second = np.where(pos, np.exp(lp + lr), 0.0).sum(axis=1)
        chi2 = max(float(w @ second) - 1.0, 0.0)
        ratio = float(np.exp(lr.max()))
    return {"kl": kl(lp, lq, p), "reverse_kl": kl(lq, lp, q),
            "chi2": chi2, "sup_density_ratio": ratio}


def entropy(pi: SoftmaxPolicy) -> float:
    lp = pi.log_probs()
    p = np.exp(lp)
    h = -np.where(p > 0, p * np.where(p > 0, lp, 0.0), 0.0).sum(axis=1)
    return float(pi.instance.context_dist @ h)


# structured-text serialization

_HEADER = "# prefbandit instance v1"


def _fmt(v: float) -> str:
    return repr(float(v))


def dumps_instance(inst: Instance) -> str:
    nx, na, d = inst.features.shape
    out = [_HEADER]
    for k, v in (("gamma", _fmt(inst.gamma)), ("radius", _fmt(inst.radius)),
                 ("norm_order", _fmt(inst.norm_order)), ("dim", d),
                 ("n_prompts", nx), ("n_responses", na)):
        out.append(f"{k} = {v}")
    for k in sorted(inst.recipe):
        out.append(f"recipe.{k} = {inst.recipe[k]}")
    out.append("[context_dist]")
    out.append(" ".join(_fmt(v) for v in inst.context_dist))
    out.append("[base_policy]")
    out.extend(" ".join(_fmt(v) for v in row) for row in inst.base_policy)
    out.append("[features]")
    out.extend(" ".join(_fmt(v) for v in inst.features[x, a])
               for x in range(nx) for a in range(na))
    out.append("[true_param]")
    out.append(" ".join(_fmt(v) for v in inst.true_param))
    return "\n".join(out) + "\n"


def loads_instance(text: str) -> Instance:
    header, blocks, current = {}, {}, None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            blocks[current] = []
        elif current is None:
            key, sep, val = line.partition("=")
            if not sep:
                raise InstanceError(f"bad header line: {raw!r}")
            header[key.strip()] = val.strip()
        else:
            blocks[current].append([float(t) for t in line.split()])
    try:
        d, nx, na = int(header["dim"]), int(header["n_prompts"]), int(header["n_responses"])
        feats = np.array(blocks["features"], dtype=float).reshape(nx, na, d)
        recipe = {k[len("recipe."):]: v for k, v in header.items() if k.startswith("recipe.")}
        return Instance(
            context_dist=np.array(blocks["context_dist"], dtype=float).reshape(nx),
            features=feats,
            base_policy=np.array(blocks["base_policy"], dtype=float).reshape(nx, na),
            gamma=float(header["gamma"]), radius=float(header["radius"]),
            norm_order=float(header["norm_order"]),
            true_param=np.array(blocks["true_param"], dtype=float).reshape(d),
            recipe=recipe)
    except (KeyError, ValueError) as exc:
        raise InstanceError(f"malformed instance text: {exc}") from exc


def save_instance(inst: Instance, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_instance(inst))


def load_instance(path) -> Instance:
    with open(path) as fh:
        return loads_instance(fh.read())
