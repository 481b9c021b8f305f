"""Truncated Gaussian exploration around the planned action.

Each action coordinate is Gaussian with mean ``u*_j`` and standard
deviation ``sigma``, truncated to ``u*_j +- w`` where the half-width ``w``
is ``beta * sigma**2`` by default (``beta * sigma`` in the alternative
mode). In standardized units the box is ``+-kappa`` with
``kappa = w / sigma``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri

from .exceptions import ConfigError, DimensionMismatch, OutOfSupport

HALF_WIDTH_MODES = ("beta_sigma2", "beta_sigma")
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class StochasticCfg:
    """``beta`` defaults to ``3 / sigma`` so the half-width is ``3 sigma``."""

    sigma: float
    beta: Optional[float] = None
    seed: int = 0
    half_width_mode: str = "beta_sigma2"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.beta is None:
            object.__setattr__(self, "beta", 3.0 / self.sigma)
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.half_width_mode not in HALF_WIDTH_MODES:
            raise ConfigError(f"half_width_mode must be one of {HALF_WIDTH_MODES}")
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def half_width(self):
        if self.half_width_mode == "beta_sigma2":
            return self.beta * self.sigma**2
        return self.beta * self.sigma

    @property
    def kappa(self):
        return self.half_width / self.sigma


def rollout_rng(seed, k, n, t):
    """Counter-style stream keyed by (seed, iteration, trajectory, step)."""
    ss = np.random.SeedSequence([int(seed), int(k), int(n), int(t)])
    return np.random.Generator(np.random.Philox(ss))


def sample_action(u_star, cfg, rng):
    """Inverse-CDF draw from the truncated Gaussian around ``u_star``."""
    u_star = np.asarray(u_star, dtype=float).reshape(-1)
    kappa = cfg.kappa
    lo = ndtr(-kappa)
    p = lo + rng.random(u_star.size) * (ndtr(kappa) - lo)
    z = np.clip(ndtri(p), -kappa, kappa)
    w = cfg.half_width
    return np.clip(u_star + cfg.sigma * z, u_star - w, u_star + w)


def log_normalizer(cfg, m):
    """``log Z`` with ``Z = (2 Phi(kappa) - 1)^m``."""
    return m * float(np.log(2.0 * ndtr(cfg.kappa) - 1.0))


def log_prob(u, u_star, cfg):
    u = np.asarray(u, dtype=float).reshape(-1)
    u_star = np.asarray(u_star, dtype=float).reshape(-1)
    if u.shape != u_star.shape:
        raise DimensionMismatch("u and u_star differ in length")
    r = u - u_star
    w = cfg.half_width
    if np.any(np.abs(r) > w * (1.0 + 1e-12)):
        raise OutOfSupport(f"action deviates by {np.max(np.abs(r))} > half-width {w}")
    m, s = u.size, cfg.sigma
    return float(-(r @ r) / (2.0 * s * s) - log_normalizer(cfg, m) - 0.5 * m * LOG_2PI - m * np.log(s))


def score(grad_u_star, u, u_star, sigma):
    """``grad_theta log pi = G' (u - u*) / sigma^2``; the normalizer does not depend on theta."""
    G = np.atleast_2d(np.asarray(grad_u_star, dtype=float))
    r = np.asarray(u, dtype=float).reshape(-1) - np.asarray(u_star, dtype=float).reshape(-1)
    if G.shape[0] != r.size:
        raise DimensionMismatch(f"policy Jacobian has {G.shape[0]} rows, action has {r.size}")
    return G.T @ r / (sigma * sigma)


def truncated_variance(sigma, kappa):
    """Variance of a centered normal truncated to ``+-kappa`` standard deviations."""
    phi = np.exp(-0.5 * kappa * kappa) / np.sqrt(2.0 * np.pi)
    return sigma * sigma * (1.0 - 2.0 * kappa * phi / (2.0 * ndtr(kappa) - 1.0))
