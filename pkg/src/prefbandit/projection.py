"""Euclidean projections onto L_p balls and uniform sampling inside them."""
from __future__ import annotations

import numpy as np


def _project_l1(v: np.ndarray, radius: float) -> np.ndarray:
    # soft-threshold at the level found by the sorted-threshold rule
    u = np.abs(v)
    if u.sum() <= radius:
        return v.copy()
    if radius <= 0:
        return np.zeros_like(v)
    mu = np.sort(u)[::-1]
    css = np.cumsum(mu)
    k = np.arange(1, len(u) + 1)
    rho = np.nonzero(mu * k > css - radius)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(u - theta, 0.0)


def _shrink_lp(u: np.ndarray, lam: float, p: float, iters: int = 60) -> np.ndarray:
    """Solve t + lam * t^(p-1) = u for t in [0, u], coordinatewise."""
    lo = np.zeros_like(u)
    hi = u.copy()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        big = mid + lam * mid ** (p - 1) > u
        hi = np.where(big, mid, hi)
        lo = np.where(big, lo, mid)
    return 0.5 * (lo + hi)


def _project_lp(v: np.ndarray, radius: float, p: float) -> np.ndarray:
    u = np.abs(v)
    if (u ** p).sum() <= radius ** p:
        return v.copy()
    if radius <= 0:
        return np.zeros_like(v)
    # the multiplier is found by bisection on the norm of the shrunk point
    lo, hi = 0.0, 1.0
    while (_shrink_lp(u, hi, p) ** p).sum() > radius ** p:
        hi *= 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if (_shrink_lp(u, mid, p) ** p).sum() > radius ** p:
            lo = mid
        else:
            hi = mid
    t = _shrink_lp(u, hi, p)
    return np.sign(v) * t


def project_lp_ball(theta, center, radius: float, p: float) -> np.ndarray:
    """Euclidean projection of theta onto {||t - center||_p <= radius}."""
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    theta = np.asarray(theta, dtype=float)
    center = np.broadcast_to(np.asarray(center, dtype=float), theta.shape)
    v = theta - center
    if p == 2:
        nrm = np.linalg.norm(v)
        out = v if nrm <= radius else v * (radius / nrm)
    elif p == 1:
        out = _project_l1(v, radius)
    elif 1 < p < 2:
        out = _project_lp(v, radius, p)
    else:
        raise ValueError(f"unsupported norm order {p}")
    return center + out


def sample_lp_ball(d: int, radius: float, p: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """size points drawn uniformly from the radius-r L_p ball in R^d."""
    if p == 1:
        e = rng.exponential(size=(size, d + 1))
        pts = e[:, :d] / e.sum(axis=1, keepdims=True)
        pts *= rng.choice([-1.0, 1.0], size=(size, d))
    elif p == 2:
        g = rng.standard_normal((size, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        pts = g * rng.random((size, 1)) ** (1.0 / d)
    else:
        # generalized-Gaussian coordinates with an exponential slack
        mag = rng.gamma(1.0 / p, size=(size, d)) ** (1.0 / p)
        x = mag * rng.choice([-1.0, 1.0], size=(size, d))
        w = rng.exponential(size=(size, 1))
        pts = x / (((np.abs(x) ** p).sum(axis=1, keepdims=True) + w) ** (1.0 / p))
    return radius * pts
