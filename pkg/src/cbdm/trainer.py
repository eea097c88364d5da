"""Mini-batch training loop for conditional denoisers (DDPM / CBDM / TCFG).

Every stochastic choice is drawn from one ``numpy.random.Generator`` seeded
with ``TrainConfig.seed``, in this order per step:

1. batch indices (uniform with replacement), shape (B,)
2. noise eps ~ N(0, I), shape (B, d)
3. timesteps t ~ U{1..T}, shape (B,)
4. condition-dropout coins ~ U[0, 1), shape (B,)
5. regularizer label set y' ~ q*_Y, shape (B, set_size)
6. guidance strengths omega ~ U[omega_min, omega_max], shape (B,)  (TCFG only)

Draws 5 are consumed even for the plain DDPM objective, so a tau = 0 CBDM
run and a DDPM run with the same seed see identical streams.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import LongTailDataset
from .denoiser import NULL_LABEL, DenoiserConfig, DenoiserParams, Tape, init_denoiser, save_params
from .loss import CbdmWeights, LabelSetMode, cbdm_terms, ddpm_term, sample_label_set, tcfg_terms
from .schedule import DiffusionSchedule, forward_noise

log = logging.getLogger(__name__)

OBJECTIVES = ("cbdm", "ddpm")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 256
    lr: float = 2e-4
    warmup_steps: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    objective: str = "cbdm"
    tau: float = 0.005
    gamma: float = 0.25
    set_size: int = 1
    label_set_mode: str = "train"
    cond_dropout_phi: float = 0.1
    ema_decay: float | None = None
    seed: int = 0
    tcfg: bool = False
    omega_min: float = 0.0
    omega_max: float = 2.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if not (0.0 <= self.cond_dropout_phi <= 1.0):
            raise ValueError(f"cond_dropout_phi must be in [0, 1], got {self.cond_dropout_phi}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.lr <= 0 or self.warmup_steps < 0:
            raise ValueError("lr must be positive and warmup_steps nonnegative")
        if self.ema_decay is not None and not (0.0 <= self.ema_decay < 1.0):
            raise ValueError("ema_decay must be in [0, 1)")
        if self.omega_min > self.omega_max or self.omega_min < 0:
            raise ValueError("need 0 <= omega_min <= omega_max")
        CbdmWeights(self.tau, self.gamma, self.set_size)  # validates

    @property
    def weights(self) -> CbdmWeights:
        return CbdmWeights(self.tau, self.gamma, self.set_size)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    ema: DenoiserParams | None = None

    COLUMNS = ("step", "loss_total", "loss_dm", "loss_r", "loss_rc", "loss_g", "loss_gc",
               "grad_norm", "lr", "wall_time")

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def write_csv(self, path) -> None:
        cols = [c for c in self.COLUMNS if not self.records or c in self.records[0]]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:
                w.writerow([r[c] if c == "step" else repr(float(r[c])) for c in cols])


class Adam:
    """Bias-corrected Adam with linear learning-rate warmup."""

    def __init__(self, params: DenoiserParams, lr, beta1=0.9, beta2=0.999, eps=1e-8, warmup=0):
        self.lr, self.beta1, self.beta2, self.eps, self.warmup = lr, beta1, beta2, eps, warmup
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.k = 0

    def current_lr(self) -> float:
        if self.warmup and self.k < self.warmup:
            return self.lr * self.k / self.warmup
        return self.lr

    def step(self, params: DenoiserParams, grads) -> None:
        self.k += 1
        lr = self.current_lr()
        c1 = 1.0 - self.beta1 ** self.k
        c2 = 1.0 - self.beta2 ** self.k
        for name, p in params.arrays.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _draw_step(rng: np.random.Generator, config: TrainConfig, dataset: LongTailDataset,
               schedule: DiffusionSchedule, label_mode: LabelSetMode):
    B = config.batch_size
    idx = rng.integers(0, len(dataset), size=B)
    eps = rng.standard_normal((B, dataset.x.shape[1]))
    t = rng.integers(1, schedule.T + 1, size=B)
    drop = rng.random(B) < config.cond_dropout_phi
    y_prime = sample_label_set(label_mode, (B, config.set_size), rng)
    omega = rng.uniform(config.omega_min, config.omega_max, size=B) if config.tcfg else None
    y = np.where(drop, NULL_LABEL, dataset.y[idx])
    x_t = forward_noise(dataset.x[idx], t, eps, schedule)
    return x_t, y, t, eps, y_prime, omega


def _closure(config: TrainConfig, x_t, y, t, eps, y_prime, omega):
    weights = config.weights

    def closure(tape: Tape):
        e = tape.eps(x_t, y, t)
        dm = ddpm_term(tape, e, eps)
        terms = {"loss_dm": float(dm.value.mean()), "loss_r": 0.0, "loss_rc": 0.0}
        per_row = dm
        if config.objective == "cbdm":
            r, rc = cbdm_terms(tape, e, x_t, t, y_prime, weights)
            per_row = per_row + r + weights.gamma * rc
            terms.update(loss_r=float(r.value.mean()), loss_rc=float(rc.value.mean()))
        if config.tcfg:
            l_g, l_gc = tcfg_terms(tape, e, x_t, y, t, eps, omega)
            per_row = per_row + l_g + l_gc
            terms.update(loss_g=float(l_g.value.mean()), loss_gc=float(l_gc.value.mean()))
        tape.terms.update(terms)
        return per_row.mean()

    return closure


def train(config: TrainConfig, dataset: LongTailDataset, schedule: DiffusionSchedule,
          denoiser_config: DenoiserConfig, init_params: DenoiserParams | None = None,
          run_dir=None) -> tuple[DenoiserParams, TrainLog]:
    """Optimize the configured objective; returns final parameters and the step log.

    ``init_params`` continues from an existing checkpoint (fine-tuning).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if config.tcfg and not denoiser_config.tcfg_enabled:
        raise ValueError("TCFG training needs a denoiser with a guidance embedding")
    if denoiser_config.max_timestep != schedule.T:
        raise ValueError("denoiser max_timestep must equal the schedule length T")
    if config.objective == "cbdm":
        config.weights.check_horizon(schedule.T)
    label_mode = LabelSetMode(config.label_set_mode, tuple(int(c) for c in dataset.class_counts))
    params = init_params.copy() if init_params is not None else init_denoiser(denoiser_config, config.seed)
    if params.config != denoiser_config:
        raise ValueError("init_params were built for a different denoiser config")
    rng = np.random.default_rng(config.seed)
    opt = Adam(params, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps, config.warmup_steps)
    ema = params.copy() if config.ema_decay is not None else None
    out = TrainLog()
    run_dir = Path(run_dir) if run_dir is not None else None

    for step in range(1, config.steps + 1):
        t0 = time.perf_counter()
        batch = _draw_step(rng, config, dataset, schedule, label_mode)
        tape = Tape(params)
        total = _closure(config, *batch)(tape)
        loss = float(total.value)
        if not np.isfinite(loss):
            if run_dir is not None:
                save_params(params, run_dir / "checkpoint_abort.bin")
            raise TrainingError(f"non-finite loss at step {step}: {tape.terms}")
        grads = tape.backward(total)
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        opt.step(params, grads)
        if ema is not None:
            d = config.ema_decay
            for k, p in params.arrays.items():
                ema.arrays[k] *= d
                ema.arrays[k] += (1.0 - d) * p
        rec = {"step": step, "loss_total": loss, **tape.terms, "grad_norm": gnorm,
               "lr": opt.current_lr(),
               "wall_time": time.perf_counter() - t0}
        out.records.append(rec)
        if run_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_params(params, run_dir / f"checkpoint_{step:07d}.bin")
        if step % 500 == 0:
            log.info("step %d loss %.4f dm %.4f", step, loss, rec["loss_dm"])
    out.ema = ema
    return params, out


def train_tcfg(config: TrainConfig, dataset: LongTailDataset, schedule: DiffusionSchedule,
               denoiser_config: DenoiserConfig, **kwargs):
    """Same contract as :func:`train`, with the guidance-embedding losses enabled."""
    if not config.tcfg:
        config = TrainConfig(**{**asdict(config), "tcfg": True})
    return train(config, dataset, schedule, denoiser_config, **kwargs)
