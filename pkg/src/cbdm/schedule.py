"""Linear-beta forward noising process.

Timesteps are 1-indexed: ``t = 0`` is clean data, ``t = T`` is (almost) pure
noise.  All per-step arrays are stored padded with a leading entry for
``t = 0`` so they can be indexed directly by integer timesteps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfigurationError(ValueError):
    """Raised for invalid hyperparameters or inconsistent settings."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    betas: np.ndarray  # beta_1..beta_T
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray
    # padded views, index 0 is the clean-data convention
    _alpha_bar_full: np.ndarray
    _one_minus_alpha_bar_full: np.ndarray

    def alpha_bar(self, t):
        """``alpha_bar_t`` with ``alpha_bar_0 = 1``; ``t`` may be an array."""
        return self._alpha_bar_full[t]

    def one_minus_alpha_bar(self, t):
        # computed with expm1 so the beta -> 0 limit keeps full precision
        return self._one_minus_alpha_bar_full[t]

    def beta(self, t):
        return self.betas[np.asarray(t) - 1]

    def check_t(self, t, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        tt = np.asarray(t)
        if tt.size and (tt.min() < lo or tt.max() > self.T):
            raise ValueError(f"timestep out of range [{lo}, {self.T}]: {t}")


def build_schedule(T: int = 200, beta1: float = 1e-4, betaT: float = 0.02) -> DiffusionSchedule:
    if int(T) != T or T < 2:
        raise ConfigurationError(f"T must be an integer >= 2, got {T!r}")
    if not (0.0 < beta1 < 1.0 and 0.0 < betaT < 1.0):
        raise ConfigurationError(f"betas must lie in (0, 1), got beta1={beta1}, betaT={betaT}")
    if beta1 > betaT:
        raise ConfigurationError(f"beta1 must not exceed betaT (got {beta1} > {betaT})")
    T = int(T)
    betas = np.linspace(beta1, betaT, T, dtype=np.float64)
    log_ab = np.cumsum(np.log1p(-betas))
    ab = np.concatenate([[1.0], np.exp(log_ab)])
    omab = np.concatenate([[0.0], -np.expm1(log_ab)])
    # q(x_{t-1} | x_t, x_0) variance; zero at t = 1 since alpha_bar_0 = 1
    post = betas * omab[:-1] / omab[1:]
    return DiffusionSchedule(
        T=T,
        betas=_frozen(betas),
        alphas=_frozen(1.0 - betas),
        alpha_bars=_frozen(ab[1:]),
        posterior_vars=_frozen(post),
        _alpha_bar_full=_frozen(ab),
        _one_minus_alpha_bar_full=_frozen(omab),
    )


def forward_noise(x0, t, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """Sample ``x_t ~ q(x_t | x_0)`` given externally drawn noise.

    ``t`` may be a scalar or a per-row array for batched ``x0`` of shape (B, d).
    """
    schedule.check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    a = np.sqrt(schedule.alpha_bar(t))
    s = np.sqrt(schedule.one_minus_alpha_bar(t))
    if np.ndim(t) > 0:
        a = np.asarray(a)[:, None]
        s = np.asarray(s)[:, None]
    return a * x0 + s * eps


def posterior_coefficients(t, schedule: DiffusionSchedule):
    """Return (coef_x0, coef_xt, var) of the Gaussian q(x_{t-1} | x_t, x_0)."""
    schedule.check_t(t)
    beta = schedule.beta(t)
    ab_prev = schedule.alpha_bar(np.asarray(t) - 1)
    omab = schedule.one_minus_alpha_bar(t)
    omab_prev = schedule.one_minus_alpha_bar(np.asarray(t) - 1)
    coef_x0 = beta * np.sqrt(ab_prev) / omab
    coef_xt = omab_prev * np.sqrt(1.0 - beta) / omab
    var = beta * omab_prev / omab
    return coef_x0, coef_xt, var


def posterior_params(x_t, x0, t, schedule: DiffusionSchedule):
    c0, ct, var = posterior_coefficients(t, schedule)
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if np.ndim(t) > 0:
        c0 = np.asarray(c0)[:, None]
        ct = np.asarray(ct)[:, None]
    return c0 * x0 + ct * x_t, var
