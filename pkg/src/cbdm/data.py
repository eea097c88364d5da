"""Synthetic long-tailed Gaussian-mixture datasets with exact densities."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    """Per-class isotropic Gaussian mixtures sharing one mode std ``sigma``."""

    centers: tuple  # per class: (M_k, d) array of mode centers
    sigma: float
    weights: tuple = None  # per class: (M_k,) mode weights; uniform if omitted

    def __post_init__(self):
        centers = tuple(np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in self.centers)
        if not centers:
            raise ValueError("mixture needs at least one class")
        d = centers[0].shape[1]
        if any(c.shape[1] != d for c in centers):
            raise ValueError("all mode centers must share one dimension")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.weights is None:
            weights = tuple(np.full(len(c), 1.0 / len(c)) for c in centers)
        else:
            weights = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        for c, w in zip(centers, weights):
            if w.shape != (len(c),) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("mode weights must be nonnegative and sum to 1 per class")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "weights", weights)

    @property
    def K(self) -> int:
        return len(self.centers)

    @property
    def data_dim(self) -> int:
        return self.centers[0].shape[1]

    def to_dict(self) -> dict:
        return {"centers": [c.tolist() for c in self.centers], "sigma": self.sigma,
                "weights": [w.tolist() for w in self.weights]}

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        return cls(centers=tuple(d["centers"]), sigma=d["sigma"], weights=tuple(d["weights"]))


def benchmark_spec(K: int = 8, radius: float = 2.0, sigma: float = 0.15,
                   modes_per_class: int = 1, mode_spread: float = 0.35) -> MixtureSpec:
    """Classes placed at angles 2*pi*k/K on a circle.

    With ``modes_per_class = 2`` each class gets two modes offset tangentially
    by ``mode_spread`` on either side of its center.
    """
    centers = []
    for k in range(K):
        ang = 2 * np.pi * k / K
        c = radius * np.array([np.cos(ang), np.sin(ang)])
        if modes_per_class == 1:
            centers.append(c[None])
        else:
            tangent = np.array([-np.sin(ang), np.cos(ang)])
            offs = np.linspace(-mode_spread, mode_spread, modes_per_class)
            centers.append(c[None] + offs[:, None] * tangent[None])
    return MixtureSpec(centers=tuple(centers), sigma=sigma)


@dataclass(eq=False)
class LongTailDataset:
    x: np.ndarray  # (N, d)
    y: np.ndarray  # (N,)
    class_counts: np.ndarray
    imbalance_factor: float = 1.0
    spec: MixtureSpec | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    def class_samples(self, k: int) -> np.ndarray:
        return self.x[self.y == k]


def make_longtail_counts(n0: int, K: int, imb: float) -> np.ndarray:
    """n_k = round(n0 * imb^(k/(K-1))), clamped to at least 1."""
    if not (0.0 < imb <= 1.0):
        raise ValueError(f"imbalance factor must be in (0, 1], got {imb}")
    if n0 < 1 or K < 1:
        raise ValueError(f"need n0 >= 1 and K >= 1 (got n0={n0}, K={K})")
    if K == 1:
        return np.array([int(n0)])
    k = np.arange(K)
    counts = np.rint(n0 * imb ** (k / (K - 1))).astype(np.int64)
    return np.maximum(counts, 1)


def sample_class(spec: MixtureSpec, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    c, w = spec.centers[k], spec.weights[k]
    modes = rng.choice(len(c), size=n, p=w)
    return c[modes] + spec.sigma * rng.standard_normal((n, spec.data_dim))


def generate_dataset(spec: MixtureSpec, counts, seed: int, imb: float | None = None) -> LongTailDataset:
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) != spec.K:
        raise ValueError(f"expected {spec.K} counts, got {len(counts)}")
    rng = np.random.default_rng(seed)
    xs = [sample_class(spec, k, int(n), rng) for k, n in enumerate(counts)]
    ys = [np.full(int(n), k, dtype=np.int64) for k, n in enumerate(counts)]
    if imb is None:
        imb = float(counts.min() / counts.max())
    return LongTailDataset(np.concatenate(xs), np.concatenate(ys), counts, imb, spec)


def log_density(spec: MixtureSpec, x, y=None, class_prior=None) -> np.ndarray:
    """Log of q(x | y), or of the prior-weighted marginal when ``y`` is None."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = spec.data_dim
    s2 = spec.sigma ** 2
    norm = -0.5 * d * np.log(2 * np.pi * s2)

    def class_logpdf(k):
        c, w = spec.centers[k], spec.weights[k]
        sq = ((x[:, None, :] - c[None]) ** 2).sum(-1)
        with np.errstate(divide="ignore"):
            return logsumexp(np.log(w)[None] - 0.5 * sq / s2, axis=1) + norm

    if y is not None:
        return class_logpdf(int(y))
    prior = np.asarray(class_prior, dtype=np.float64)
    if abs(prior.sum() - 1.0) > 1e-9:
        raise ValueError("class prior must sum to 1")
    with np.errstate(divide="ignore"):
        parts = np.stack([np.log(prior[k]) + class_logpdf(k) for k in range(spec.K)], axis=1)
    return logsumexp(parts, axis=1)


def true_density(spec: MixtureSpec, x, y=None, class_prior=None):
    x = np.asarray(x, dtype=np.float64)
    out = np.exp(log_density(spec, x, y, class_prior))
    return float(out[0]) if x.ndim == 1 else out


def write_csv(path, x: np.ndarray, y: np.ndarray) -> None:
    x = np.atleast_2d(x)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["y"])
        for row, label in zip(x, y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def read_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-1] != "y" or any(h != f"x{i}" for i, h in enumerate(header[:-1])):
        raise ValueError(f"{path}: unexpected header {header}")
    if not body:
        return np.zeros((0, len(header) - 1)), np.zeros(0, dtype=np.int64)
    arr = np.array([[float(v) for v in r[:-1]] for r in body])
    labels = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return arr, labels
