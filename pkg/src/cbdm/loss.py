"""Training objectives: DDPM, class-balancing regularizer, trainable guidance.

Every objective is returned as a closure ``f(tape) -> scalar Var`` so that
:func:`cbdm.denoiser.backward` can differentiate it.  Inputs may be a single
sample (vectors, scalar t) or a batch; batched losses are averaged over rows.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .denoiser import NULL_LABEL, Tape, Var, sg

LABEL_SET_MODES = ("train", "sqrt", "balanced")


@dataclass(frozen=True)
class LabelSetMode:
    mode: str
    class_counts: tuple[int, ...]

    def __post_init__(self):
        if self.mode not in LABEL_SET_MODES:
            raise ValueError(f"unknown label-set mode {self.mode!r}; expected one of {LABEL_SET_MODES}")
        counts = np.asarray(self.class_counts, dtype=np.float64)
        if counts.ndim != 1 or counts.size == 0 or (counts < 0).any():
            raise ValueError("class counts must be a nonempty list of nonnegative numbers")
        if not counts.any():
            raise ValueError("class counts are all zero")
        object.__setattr__(self, "class_counts", tuple(int(c) for c in self.class_counts))

    @property
    def probabilities(self) -> np.ndarray:
        n = np.asarray(self.class_counts, dtype=np.float64)
        if self.mode == "train":
            w = n
        elif self.mode == "sqrt":
            w = np.sqrt(n)
        else:
            w = np.ones_like(n)
        return w / w.sum()


def sample_label_set(mode: LabelSetMode, size, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. labels from the target label distribution; ``size`` may be a shape."""
    if np.prod(size) < 1:
        raise ValueError("label set size must be >= 1")
    p = mode.probabilities
    return rng.choice(len(p), size=size, p=p)


@dataclass(frozen=True)
class CbdmWeights:
    tau: float
    gamma: float = 0.25
    set_size: int = 1

    def __post_init__(self):
        if self.tau < 0 or self.gamma < 0:
            raise ValueError(f"tau and gamma must be nonnegative (tau={self.tau}, gamma={self.gamma})")
        if int(self.set_size) != self.set_size or self.set_size < 1:
            raise ValueError(f"set_size must be a positive integer, got {self.set_size}")

    def check_horizon(self, T: int) -> None:
        if self.tau * T > 1.0:
            warnings.warn(f"tau*T = {self.tau * T:.3g} > 1: the regularizer weight exceeds 1 at late steps",
                          stacklevel=2)


def ddpm_loss(eps_hat, eps) -> float:
    a = np.asarray(eps_hat, dtype=np.float64)
    b = np.asarray(eps, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sum(d * d))


def _batch(x_t, y, t, eps):
    x = np.asarray(x_t, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
        eps = np.asarray(eps, dtype=np.float64)[None]
        y = np.array([NULL_LABEL if y is None else y])
        t = np.array([t])
    else:
        B = x.shape[0]
        eps = np.asarray(eps, dtype=np.float64)
        y = np.broadcast_to(np.array(NULL_LABEL if y is None else y), (B,))
        t = np.broadcast_to(np.asarray(t), (B,))
    if eps.shape != x.shape:
        raise ValueError(f"eps shape {eps.shape} does not match x_t shape {x.shape}")
    return x, y, t, eps


def ddpm_term(tape: Tape, e: Var, eps) -> Var:
    return (e - eps).sq_norm()


def cbdm_terms(tape: Tape, e: Var, x, t, label_set: np.ndarray, weights: CbdmWeights):
    """Per-row (regularizer, commitment) terms, already scaled by tau*t/|Y|."""
    size = label_set.shape[1]
    e_frozen = sg(e)
    r = rc = None
    for j in range(size):
        e2 = tape.eps(x, label_set[:, j], t)
        rj = (e - sg(e2)).sq_norm()
        rcj = (e_frozen - e2).sq_norm()
        r = rj if r is None else r + rj
        rc = rcj if rc is None else rc + rcj
    w = weights.tau * np.asarray(t, dtype=np.float64) / size
    return r * w, rc * w


def cbdm_loss(x_t, y, t, eps, label_set, weights: CbdmWeights):
    """Closure for DDPM loss + (tau t/|Y|) sum_y' [ ||e_y - sg(e_y')||^2 + gamma ||sg(e_y) - e_y'||^2 ].

    A null ``y`` (dropped condition) anchors the regularizer at the
    unconditional output.
    """
    x, y, t, eps = _batch(x_t, y, t, eps)
    ls = np.asarray(label_set)
    if ls.size == 0:
        raise ValueError("empty label set")
    if ls.ndim == 1:
        # single sample: the whole list is its label set; batch: one y' per row
        ls = ls[None] if x.shape[0] == 1 else ls[:, None]
    if ls.shape[0] != x.shape[0]:
        raise ValueError(f"label set shape {ls.shape} does not match batch size {x.shape[0]}")

    def closure(tape: Tape) -> Var:
        e = tape.eps(x, y, t)
        dm = ddpm_term(tape, e, eps)
        r, rc = cbdm_terms(tape, e, x, t, ls, weights)
        tape.terms.update(loss_dm=float(dm.value.mean()), loss_r=float(r.value.mean()),
                          loss_rc=float(rc.value.mean()))
        return (dm + r + weights.gamma * rc).mean()

    return closure


def ddpm_closure(x_t, y, t, eps):
    x, y, t, eps = _batch(x_t, y, t, eps)

    def closure(tape: Tape) -> Var:
        dm = ddpm_term(tape, tape.eps(x, y, t), eps)
        tape.terms.update(loss_dm=float(dm.value.mean()), loss_r=0.0, loss_rc=0.0)
        return dm.mean()

    return closure


def tcfg_terms(tape: Tape, e_cond: Var, x, y, t, eps, omega):
    """Per-row guidance-distillation and guidance-commitment terms."""
    e_w = tape.eps(x, y, t, omega)
    e_u = tape.eps(x, None, t)
    guidance = (e_cond - e_u) * omega
    l_g = (e_w - sg(guidance) - eps).sq_norm()
    l_gc = (sg(e_w) - guidance - eps).sq_norm() * 0.25
    return l_g, l_gc


def tcfg_losses(x_t, y, t, eps, omega, omega_range=(0.0, 2.0)):
    """Closure for the trainable-guidance objective (distillation + commitment).

    ``omega`` is a scalar or per-row array and must lie inside ``omega_range``.
    """
    x, y, t, eps = _batch(x_t, y, t, eps)
    om = np.broadcast_to(np.asarray(omega, dtype=np.float64), (x.shape[0],))
    lo, hi = omega_range
    if (om < lo).any() or (om > hi).any():
        raise ValueError(f"omega outside configured range [{lo}, {hi}]: {omega}")

    def closure(tape: Tape) -> Var:
        e_c = tape.eps(x, y, t)
        l_g, l_gc = tcfg_terms(tape, e_c, x, y, t, eps, om)
        tape.terms.update(loss_g=float(l_g.value.mean()), loss_gc=float(l_gc.value.mean()))
        return (l_g + l_gc).mean()

    return closure


def expected_regularizer(e_anchor: np.ndarray, e_by_class: np.ndarray, probs: np.ndarray, t) -> float:
    """Exact label-set expectation sum_y' q(y') t ||e_anchor - e_y'||^2."""
    d = e_by_class - e_anchor[None]
    return float(t * np.sum(probs * np.sum(d * d, axis=1)))
