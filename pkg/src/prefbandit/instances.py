"""Instance generators: hard skewed-base constructions and an easy baseline."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .bandit import Instance


class CapacityError(RuntimeError):
    pass


@dataclass
class TargetFamily:
    """Candidate true parameters plus the index of the drawn one."""

    thetas: np.ndarray
    chosen: int
    tau: float


def balanced_codewords(d: int, count: int, rng: np.random.Generator,
                       max_proposals: int = 10 ** 6) -> List[np.ndarray]:
    """Greedy packing of +-1 words with zero sum and pairwise Hamming
    distance at least ceil(d/8)."""
    if d < 2 or d % 2:
        raise ValueError("d must be a positive even number")
    if count < 1:
        raise ValueError("count must be at least 1")
    if count > math.comb(d, d // 2):
        raise CapacityError(f"only {math.comb(d, d // 2)} balanced words of length {d} exist")
    min_dist = max(math.ceil(d / 8), 1)
    base = np.array([1] * (d // 2) + [-1] * (d // 2), dtype=np.int8)
    kept = np.empty((0, d), dtype=np.int8)
    tried = 0
    while len(kept) < count and tried < max_proposals:
        batch = min(4096, max_proposals - tried)
        props = rng.permuted(np.tile(base, (batch, 1)), axis=1)
        tried += batch
        for w in props:
            if len(kept) == 0 or np.min((kept != w).sum(axis=1)) >= min_dist:
                kept = np.vstack([kept, w])
                if len(kept) == count:
                    break
    if len(kept) < count:
        raise CapacityError(f"found {len(kept)} of {count} codewords in {tried} proposals")
    return [w.astype(float) for w in kept]


def _tabular(n_resp: int) -> np.ndarray:
    return np.eye(n_resp)[None]


def _warn_dim(d, R):
    if d > R ** 3:
        warnings.warn(f"d={d} exceeds R^3={R ** 3:.3g}; the construction assumes d = O(poly(R))")


def skewed_base_instance_p1(d: int, R: float, rng: np.random.Generator, n: Optional[int] = None,
                            count: Optional[int] = None, gamma: Optional[float] = None):
    """Single prompt, d+1 tabular responses, base policy (1 - eps, eps/d, ...)
    with eps = d e^(1-R); targets are an anchor on response 0 plus tau times
    balanced codewords on the rest.

    tau^2 = ln(M)/(4 n eps), capped at 1/d^2, where M is the number of
    codewords; n=None uses the cap.
    """
    if d < 2 or d % 2:
        raise ValueError("d must be a positive even number")
    if not R > math.log(d) + 1:
        raise ValueError(f"need R > ln d + 1 = {math.log(d) + 1:.6g}, got R={R}")
    _warn_dim(d, R)
    eps = d * math.exp(1 - R)
    base = np.concatenate([[1 - eps], np.full(d, eps / d)])
    anchor = math.log(eps / (d * (1 - eps)))
    if count is None:
        count = min(math.comb(d, d // 2), 64)
    words = balanced_codewords(d, count, rng)
    tau = 1.0 / d
    if n is not None:
        tau = min(math.sqrt(math.log(max(count, 2)) / (4 * n * eps)), tau)
    thetas = np.array([np.concatenate([[anchor], tau * w]) for w in words])
    j = int(rng.integers(len(thetas)))
    inst = Instance(np.ones(1), _tabular(d + 1), base[None], 1.0 / R if gamma is None else gamma,
                    R, 1.0, thetas[j],
                    recipe={"kind": "skewed-p1", "d": d, "R": R, "n": n, "count": count})
    return inst, TargetFamily(thetas, j, tau)


def two_coord_instance(d: int, R: float, p: float, rng: np.random.Generator, n: Optional[int] = None,
                       M: int = 4, gamma: Optional[float] = None):
    """Single prompt, d tabular responses, base softmax(-phi) with
    phi = 2^(-1/p)(R-1)(-1, 1, 0, ...); targets phi + j tau e_2 for |j| <= M."""
    if not p > 1:
        raise ValueError("this construction needs p > 1")
    if d < 2:
        raise ValueError("d must be at least 2")
    if not R > 1:
        raise ValueError("R must exceed 1")
    _warn_dim(d, R)
    c = 2 ** (-1 / p) * (R - 1)
    phi = np.zeros(d)
    phi[0], phi[1] = -c, c
    z = -phi - (-phi).max()
    base = np.exp(z) / np.exp(z).sum()
    tau = 1.0 / M
    if n is not None:
        t2 = math.exp(2 ** (1 - 1 / p) * R) * math.log(2 * M + 1) / (M ** 2 * n)
        tau = min(math.sqrt(t2), 1.0 / M)
    js = np.arange(-M, M + 1)
    thetas = np.array([phi + j * tau * np.eye(d)[1] for j in js])
    j = int(rng.integers(len(thetas)))
    inst = Instance(np.ones(1), _tabular(d), base[None], 1.0 / R if gamma is None else gamma,
                    R, p, thetas[j],
                    recipe={"kind": "two-coord-p", "d": d, "R": R, "p": p, "n": n, "M": M})
    return inst, TargetFamily(thetas, j, tau)


def easy_instance(d: int, rng: np.random.Generator, R: float = 2.0, spread: float = 0.5,
                  p: float = 2.0, gamma: Optional[float] = None) -> Instance:
    """Single prompt, uniform base, d tabular responses and theta* uniform
    in [-spread, spread]^d."""
    if d < 2:
        raise ValueError("d must be at least 2")
    theta = rng.uniform(-spread, spread, size=d)
    nrm = float((np.abs(theta) ** p).sum() ** (1 / p))
    if nrm > R:
        theta *= R / nrm * (1 - 1e-12)
    return Instance(np.ones(1), _tabular(d), np.full((1, d), 1.0 / d),
                    1.0 / R if gamma is None else gamma, R, p, theta,
                    recipe={"kind": "easy", "d": d, "R": R, "spread": spread, "p": p})
