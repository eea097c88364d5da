"""Reverse-process samplers.

A *model* is anything exposing ``predict_eps(x, y, t, omega=None)`` plus
``num_classes``, ``data_dim`` and ``tcfg_enabled``: trained
:class:`~cbdm.denoiser.DenoiserParams` or the closed-form
:func:`~cbdm.oracle.analytic_denoiser`.

Chains are simulated as one batch, but chain ``i`` draws its initial state
and per-step noise from its own generator seeded with ``(seed, i)``, so a
chain's trajectory does not depend on how many other chains run with it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import NULL_LABEL
from .schedule import DiffusionSchedule, posterior_coefficients

METHODS = ("ddpm", "ddim")


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleRequest:
    y: int | None
    omega: float = 0.0
    num_samples: int = 1000
    method: str = "ddpm"
    ddim_steps: int = 20
    seed: int = 0
    use_tcfg: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.omega < 0:
            raise ValueError(f"guidance strength must be >= 0, got {self.omega}")

    def check(self, schedule: DiffusionSchedule) -> None:
        if self.method == "ddim":
            if not (1 <= self.ddim_steps <= schedule.T) or schedule.T % self.ddim_steps:
                raise ValueError(f"ddim_steps={self.ddim_steps} must divide T={schedule.T}")


def cfg_eps(model, x_t, y, t, omega: float) -> np.ndarray:
    """(1 + omega) * eps(x, y, t) - omega * eps(x, null, t); two model calls."""
    if y is None or np.any(np.asarray(y) == NULL_LABEL):
        raise ValueError("classifier-free guidance needs a class label")
    cond = model.predict_eps(x_t, y, t)
    uncond = model.predict_eps(x_t, None, t)
    return (1.0 + omega) * cond - omega * uncond


def _guided_eps(model, request: SampleRequest):
    if request.use_tcfg:
        if not model.tcfg_enabled:
            raise ValueError("model has no guidance embedding; cannot sample with TCFG")
        if request.y is None:
            raise ValueError("TCFG sampling needs a class label")
        return lambda x, t: model.predict_eps(x, request.y, t, request.omega)
    if request.y is None or request.omega == 0.0:
        return lambda x, t: model.predict_eps(x, request.y, t)
    return lambda x, t: cfg_eps(model, x, request.y, t, request.omega)


def _chain_rngs(seed: int, n: int):
    return [np.random.default_rng([seed, i]) for i in range(n)]


def _check_finite(x: np.ndarray, t: int) -> None:
    if not np.isfinite(x).all():
        raise SamplingError(f"non-finite sampler state at t={t}")


def ddpm_sample(model, schedule: DiffusionSchedule, request: SampleRequest) -> np.ndarray:
    """Ancestral sampling with the posterior variance; returns (n, d)."""
    if request.method != "ddpm":
        raise ValueError("ddpm_sample needs method='ddpm'")
    eps_fn = _guided_eps(model, request)
    n, d, T = request.num_samples, model.data_dim, schedule.T
    # chain i: x_T first, then one noise vector per step t = T..2
    noise = np.stack([r.standard_normal((T, d)) for r in _chain_rngs(request.seed, n)])
    x = noise[:, 0]
    for t in range(T, 0, -1):
        e = eps_fn(x, t)
        x0_hat = (x - np.sqrt(schedule.one_minus_alpha_bar(t)) * e) / np.sqrt(schedule.alpha_bar(t))
        c0, ct, var = posterior_coefficients(t, schedule)
        x = c0 * x0_hat + ct * x
        if t > 1:
            x = x + np.sqrt(var) * noise[:, T - t + 1]
        _check_finite(x, t)
    return x


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    stride = T // steps
    return np.arange(T, 0, -stride)


def ddim_sample(model, schedule: DiffusionSchedule, request: SampleRequest) -> np.ndarray:
    """Deterministic (eta = 0) DDIM on a uniform-stride sub-grid."""
    if request.method != "ddim":
        raise ValueError("ddim_sample needs method='ddim'")
    request.check(schedule)
    eps_fn = _guided_eps(model, request)
    n, d = request.num_samples, model.data_dim
    x = np.stack([r.standard_normal(d) for r in _chain_rngs(request.seed, n)])
    ts = ddim_timesteps(schedule.T, request.ddim_steps)
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        e = eps_fn(x, int(t))
        x0_hat = (x - np.sqrt(schedule.one_minus_alpha_bar(t)) * e) / np.sqrt(schedule.alpha_bar(t))
        x = np.sqrt(schedule.alpha_bar(t_prev)) * x0_hat + np.sqrt(schedule.one_minus_alpha_bar(t_prev)) * e
        _check_finite(x, int(t))
    return x


def tcfg_sample(model, schedule: DiffusionSchedule, request: SampleRequest) -> np.ndarray:
    """Single-pass guided sampling through the guidance embedding."""
    if not request.use_tcfg:
        raise ValueError("tcfg_sample needs use_tcfg=True")
    if request.method == "ddim":
        return ddim_sample(model, schedule, request)
    return ddpm_sample(model, schedule, request)


def sample(model, schedule: DiffusionSchedule, request: SampleRequest) -> np.ndarray:
    if request.use_tcfg:
        return tcfg_sample(model, schedule, request)
    if request.method == "ddim":
        return ddim_sample(model, schedule, request)
    return ddpm_sample(model, schedule, request)
