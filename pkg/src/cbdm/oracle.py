"""Closed-form checks on 1-D Gaussian class laws.

For ``q(x0 | y) = N(mu_y, s^2)`` every quantity in the prior-adjustment
argument is available in closed form: noisy marginals, the forward kernel,
the exact class-conditional reverse kernel and its unconditional mixture.
This module evaluates the adjustment identity on a grid and Monte-Carlo
estimates both sides of the regularizer upper bound.

All densities are handled as log-densities; exponentiation happens only in
the residual and quadrature steps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .data import MixtureSpec
from .denoiser import NULL_LABEL
from .schedule import DiffusionSchedule, posterior_coefficients

PRIORS = ("imbalanced", "balanced")
_LOG2PI = np.log(2 * np.pi)


def _log_normal(x, mean, var):
    return -0.5 * (_LOG2PI + np.log(var) + (x - mean) ** 2 / var)


@dataclass(frozen=True, eq=False)
class GaussianCase:
    mus: np.ndarray
    s: float
    prior: np.ndarray
    balanced_prior: np.ndarray
    schedule: DiffusionSchedule
    grid_range: tuple[float, float] = (-8.0, 8.0)
    grid_points: int = 4001

    def __post_init__(self):
        for name in ("mus", "prior", "balanced_prior"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        K = len(self.mus)
        if self.prior.shape != (K,) or self.balanced_prior.shape != (K,):
            raise ValueError("priors must have one entry per class")
        for p in (self.prior, self.balanced_prior):
            if (p <= 0).any() or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError("priors must be positive and sum to 1")
        if self.s < 0:
            raise ValueError("s must be nonnegative")
        lo, hi = self.grid_range
        sd = np.sqrt(max(self.s ** 2, 1.0))
        if lo > self.mus.min() - 6 * sd or hi < self.mus.max() + 6 * sd:
            raise ValueError("grid must cover 6 standard deviations of every marginal")

    @property
    def K(self) -> int:
        return len(self.mus)

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(*self.grid_range, self.grid_points)

    def weights(self, prior_choice: str) -> np.ndarray:
        if prior_choice not in PRIORS:
            raise ValueError(f"prior_choice must be one of {PRIORS}")
        return self.prior if prior_choice == "imbalanced" else self.balanced_prior

    def marginal_var(self, t) -> np.ndarray:
        ab = self.schedule.alpha_bar(t)
        return (1.0 - ab) + ab * self.s ** 2

    def class_mean(self, t, y):
        return np.sqrt(self.schedule.alpha_bar(t)) * self.mus[y]


def symmetric_case(schedule: DiffusionSchedule, prior=(0.5, 0.5), mu: float = 2.0, s: float = 0.5,
                   **kw) -> GaussianCase:
    K = len(prior)
    mus = np.linspace(-mu, mu, K)
    return GaussianCase(mus, s, np.asarray(prior), np.full(K, 1.0 / K), schedule, **kw)


# ---------------------------------------------------------------- densities

def class_marginal_logpdf(case: GaussianCase, t, x, y):
    """log q(x_t | y)."""
    return _log_normal(np.asarray(x, dtype=np.float64), case.class_mean(t, y), case.marginal_var(t))


def marginal_logpdf(case: GaussianCase, t, x, prior_choice: str = "imbalanced"):
    x = np.asarray(x, dtype=np.float64)
    w = case.weights(prior_choice)
    parts = [np.log(w[y]) + class_marginal_logpdf(case, t, x, y) for y in range(case.K)]
    return logsumexp(np.stack(parts), axis=0)


def marginal_density(case: GaussianCase, t, x, prior_choice: str = "imbalanced"):
    case.schedule.check_t(t, allow_zero=True)
    return np.exp(marginal_logpdf(case, t, x, prior_choice))


def forward_step_logpdf(case: GaussianCase, t, x_t, x_prev):
    """log q(x_t | x_{t-1})."""
    b = case.schedule.beta(t)
    return _log_normal(x_t, np.sqrt(1.0 - b) * x_prev, b)


def reverse_kernel_logpdf(case: GaussianCase, t, x_prev, x_t):
    """log q(x_{t-1} | x_t) of the imbalanced data law (the shared factor)."""
    return (forward_step_logpdf(case, t, x_t, x_prev)
            + marginal_logpdf(case, t - 1, x_prev, "imbalanced")
            - marginal_logpdf(case, t, x_t, "imbalanced"))


def reverse_conditional_logpdf(case: GaussianCase, t, x_prev, x_t, y, prior_choice: str):
    """log of q(x_{t-1}|x_t) q(x_{t-1}|y) q(x_t) / (q(x_t|y) p(x_{t-1})) under ``prior_choice``.

    ``q(x_t)`` and ``p(x_{t-1})`` are the noisy marginals under the chosen
    class prior; the other three factors do not depend on it.
    """
    case.schedule.check_t(t)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    num = (reverse_kernel_logpdf(case, t, x_prev, x_t)
           + class_marginal_logpdf(case, t - 1, x_prev, y)
           + marginal_logpdf(case, t, x_t, prior_choice))
    den = class_marginal_logpdf(case, t, x_t, y) + marginal_logpdf(case, t - 1, x_prev, prior_choice)
    if not np.isfinite(den).all():
        raise ZeroDivisionError("zero-density denominator in reverse conditional")
    return num - den


def reverse_conditional_density(case: GaussianCase, t, x_prev, x_t, y, prior_choice: str):
    return np.exp(reverse_conditional_logpdf(case, t, x_prev, x_t, y, prior_choice))


def verify_prop1(case: GaussianCase, t: int, grid=None, xt_stride: int = 100) -> float:
    """Worst relative residual of the adjustment identity over a grid.

    ``x_{t-1}`` runs over the full grid and ``x_t`` over every
    ``xt_stride``-th grid point, for every class.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    grid = case.grid if grid is None else np.asarray(grid, dtype=np.float64)
    xp = grid[:, None]
    xt = grid[::xt_stride][None, :]
    adj = (marginal_logpdf(case, t - 1, xp, "imbalanced") - marginal_logpdf(case, t - 1, xp, "balanced")
           + marginal_logpdf(case, t, xt, "balanced") - marginal_logpdf(case, t, xt, "imbalanced"))
    worst = 0.0
    for y in range(case.K):
        lhs = reverse_conditional_logpdf(case, t, xp, xt, y, "balanced")
        rhs = reverse_conditional_logpdf(case, t, xp, xt, y, "imbalanced") + adj
        worst = max(worst, float(np.max(np.abs(np.expm1(lhs - rhs)))))
    return worst


# ---------------------------------------------------------------- upper bound

class BoundEstimate(NamedTuple):
    lhs: float
    rhs: float
    stderr: float


def _model_reverse(case: GaussianCase, t, x_t):
    """Exact class-conditional reverse kernels N(means[:, y], var) at each x_t."""
    v_prev = case.marginal_var(t - 1)
    b = case.schedule.beta(t)
    prec = 1.0 / v_prev + (1.0 - b) / b
    var = 1.0 / prec
    m_prev = np.sqrt(case.schedule.alpha_bar(t - 1)) * case.mus
    means = var * (m_prev[None, :] / v_prev + np.sqrt(1.0 - b) * x_t[:, None] / b)
    return means, var


def verify_prop2_bound(case: GaussianCase, t: int, mc_samples: int, seed: int = 0,
                       tau: float = 1.0, quad_nodes: int = 64) -> BoundEstimate:
    """Monte-Carlo estimate of both sides of the regularizer upper bound.

    lhs: E KL[q(x_{t-1}|x_t,x0) || p*(x_{t-1}|x_t,y)] where p* is the
    (normalized) prior-adjusted reverse kernel p(.|x_t,y) (q*/q)^tau at t-1.
    rhs: E KL[q(x_{t-1}|x_t,x0) || p(.|x_t,y)]
         + tau * t * E_{y'~q*} KL[p(.|x_t) || p(.|x_t,y')].
    Expectations over (y, x0, x_t) use ``mc_samples`` draws from the
    imbalanced data law; the y' expectation is summed exactly.  One-dimensional
    integrals use Gauss-Hermite quadrature on each Gaussian component.
    ``stderr`` is the standard error of the per-draw difference rhs - lhs.
    """
    if mc_samples < 1000:
        raise ValueError("mc_samples must be >= 1000")
    if t < 2:
        raise ValueError("t must be >= 2: q(x_0 | x_1, x_0) is a point mass")
    sched = case.schedule
    rng = np.random.default_rng(seed)
    y = rng.choice(case.K, size=mc_samples, p=case.prior)
    x0 = case.mus[y] + case.s * rng.standard_normal(mc_samples)
    x_t = np.sqrt(sched.alpha_bar(t)) * x0 + np.sqrt(sched.one_minus_alpha_bar(t)) * rng.standard_normal(mc_samples)

    c0, ct, v_q = posterior_coefficients(t, sched)
    m_q = c0 * x0 + ct * x_t
    means, v_p = _model_reverse(case, t, x_t)
    m_p = means[np.arange(mc_samples), y]

    def kl_gauss(m1, v1, m2, v2):
        return 0.5 * (np.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / v2 - 1.0)

    z, wq = np.polynomial.hermite.hermgauss(quad_nodes)
    wq = wq / np.sqrt(np.pi)

    def log_ratio(x):  # log q*(x_{t-1}) - log q(x_{t-1})
        return marginal_logpdf(case, t - 1, x, "balanced") - marginal_logpdf(case, t - 1, x, "imbalanced")

    l_dm = kl_gauss(m_q, v_q, m_p, v_p)
    xq = m_q[:, None] + np.sqrt(2 * v_q) * z[None]
    xp = m_p[:, None] + np.sqrt(2 * v_p) * z[None]
    log_z = logsumexp(tau * log_ratio(xp) + np.log(wq)[None], axis=1)
    lhs_i = l_dm - tau * (log_ratio(xq) @ wq) + log_z

    # unconditional model kernel: mixture over classes with posterior weights
    log_w = np.log(case.prior)[None] + np.stack(
        [class_marginal_logpdf(case, t, x_t, k) for k in range(case.K)], axis=1)
    log_w -= logsumexp(log_w, axis=1, keepdims=True)
    w = np.exp(log_w)
    e_log_mix = np.zeros(mc_samples)
    for j in range(case.K):
        nodes = means[:, j:j + 1] + np.sqrt(2 * v_p) * z[None]
        comp = np.stack([_log_normal(nodes, means[:, k:k + 1], v_p) for k in range(case.K)], axis=0)
        log_mix = logsumexp(comp + log_w.T[:, :, None], axis=0)
        e_log_mix += w[:, j] * (log_mix @ wq)
    reg = np.zeros(mc_samples)
    for k in range(case.K):
        # E_mix[-log N(x; m_k, v)] is closed form given the shared variance
        cross = 0.5 * (_LOG2PI + np.log(v_p)) + (w * ((means - means[:, k:k + 1]) ** 2 + v_p)).sum(1) / (2 * v_p)
        reg += case.balanced_prior[k] * (e_log_mix + cross)
    rhs_i = l_dm + tau * t * reg
    diff = rhs_i - lhs_i
    return BoundEstimate(float(lhs_i.mean()), float(rhs_i.mean()),
                         float(diff.std(ddof=1) / np.sqrt(mc_samples)))


# ---------------------------------------------------------------- optimal denoiser

class AnalyticDenoiser:
    """Bayes-optimal noise predictor for isotropic Gaussian-mixture class laws.

    Satisfies the sampler's model contract; ``sigma = 0`` (point masses) is
    allowed.
    """

    tcfg_enabled = False

    def __init__(self, centers, weights, sigma: float, schedule: DiffusionSchedule, class_prior=None):
        self.centers = [np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in centers]
        self.mode_weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.sigma = float(sigma)
        self.schedule = schedule
        K = len(self.centers)
        self.class_prior = np.full(K, 1.0 / K) if class_prior is None else np.asarray(class_prior, dtype=np.float64)
        self.calls = 0

    @property
    def num_classes(self) -> int:
        return len(self.centers)

    @property
    def data_dim(self) -> int:
        return self.centers[0].shape[1]

    def _components(self, y):
        if y is None or y == NULL_LABEL:
            c = np.concatenate(self.centers)
            w = np.concatenate([p * mw for p, mw in zip(self.class_prior, self.mode_weights)])
            return c, w
        if not (0 <= y < self.num_classes):
            raise ValueError(f"label {y} out of range")
        return self.centers[y], self.mode_weights[y]

    def posterior_mean(self, x_t, y, t) -> np.ndarray:
        ab = float(self.schedule.alpha_bar(t))
        s2 = self.sigma ** 2
        v = ab * s2 + (1.0 - ab)
        gain = np.sqrt(ab) * s2 / v
        c, w = self._components(y)
        sq = ((x_t[:, None, :] - np.sqrt(ab) * c[None]) ** 2).sum(-1)
        with np.errstate(divide="ignore"):
            logr = np.log(w)[None] - 0.5 * sq / v
        r = np.exp(logr - logsumexp(logr, axis=1, keepdims=True))
        comp = c[None] + gain * (x_t[:, None, :] - np.sqrt(ab) * c[None])
        return np.einsum("nm,nmd->nd", r, comp)

    def predict_eps(self, x_t, y, t, omega=None) -> np.ndarray:
        if omega is not None:
            raise ValueError("analytic denoiser has no guidance embedding")
        self.calls += 1
        x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        t = int(t)
        ab = self.schedule.alpha_bar(t)
        if y is None or np.ndim(y) == 0:
            x0 = self.posterior_mean(x, None if y is None else int(y), t)
        else:
            labels = np.broadcast_to(np.asarray(y), (x.shape[0],))
            x0 = np.empty_like(x)
            for lab in np.unique(labels):
                rows = labels == lab
                x0[rows] = self.posterior_mean(x[rows], int(lab), t)
        out = (x - np.sqrt(ab) * x0) / np.sqrt(self.schedule.one_minus_alpha_bar(t))
        return out[0] if np.ndim(x_t) == 1 else out


def analytic_denoiser(case, schedule: DiffusionSchedule | None = None, class_prior=None) -> AnalyticDenoiser:
    """Build the optimal denoiser for a :class:`GaussianCase` or a :class:`MixtureSpec`."""
    if isinstance(case, GaussianCase):
        centers = [[[m]] for m in case.mus]
        return AnalyticDenoiser(centers, [[1.0]] * case.K, case.s, schedule or case.schedule,
                                case.prior if class_prior is None else class_prior)
    if isinstance(case, MixtureSpec):
        if schedule is None:
            raise ValueError("a schedule is required for mixture specs")
        return AnalyticDenoiser(case.centers, case.weights, case.sigma, schedule, class_prior)
    raise TypeError(f"unsupported case type {type(case).__name__}")
