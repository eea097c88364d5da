"""Sample-quality metrics in raw data coordinates.

Fréchet distance between Gaussian fits, PRD F_beta from cluster histograms,
k-NN manifold recall, ground-truth mode coverage and a downstream
classifier check.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree
from sklearn.cluster import KMeans

from .data import MixtureSpec

COV_EPS = 1e-6
HIST_EPS = 1e-10


def _as_samples(a, name: str, min_n: int = 1) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] < min_n:
        raise ValueError(f"{name} needs at least {min_n} samples, got {a.shape[0]}")
    return a


def _fit(a: np.ndarray):
    mu = a.mean(axis=0)
    cov = np.atleast_2d(np.cov(a, rowvar=False)) + COV_EPS * np.eye(a.shape[1])
    return mu, cov


def frechet_raw(gen, ref) -> float:
    """2-Wasserstein distance between Gaussian fits of the two sample sets.

    Both covariances get ``1e-6 * I`` added, so degenerate sets are fine.
    Returns the distance itself (the square root of the usual FID-style
    quantity).
    """
    gen = _as_samples(gen, "gen", 2)
    ref = _as_samples(ref, "ref", 2)
    if gen.shape[1] != ref.shape[1]:
        raise ValueError("gen and ref must have the same dimension")
    m1, c1 = _fit(gen)
    m2, c2 = _fit(ref)
    covmean = linalg.sqrtm(c1 @ c2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    d2 = float(np.sum((m1 - m2) ** 2) + np.trace(c1) + np.trace(c2) - 2.0 * np.trace(covmean))
    return float(np.sqrt(max(d2, 0.0)))


def prd_curve(gen, ref, num_clusters: int, seed: int = 0, num_angles: int = 1001):
    """(precision, recall) arrays of the cluster-histogram PRD curve."""
    if num_clusters < 2:
        raise ValueError("num_clusters must be >= 2")
    gen = _as_samples(gen, "gen")
    ref = _as_samples(ref, "ref")
    pooled = np.concatenate([gen, ref])
    # a canonical ordering makes the clustering independent of which set came first
    order = np.lexsort(pooled.T[::-1])
    km = KMeans(n_clusters=min(num_clusters, len(pooled)), init="k-means++", n_init=3,
                max_iter=100, random_state=seed)
    labels = np.empty(len(pooled), dtype=np.int64)
    labels[order] = km.fit_predict(pooled[order])
    k = km.n_clusters
    p_gen = np.bincount(labels[:len(gen)], minlength=k) / len(gen)
    p_ref = np.bincount(labels[len(gen):], minlength=k) / len(ref)
    p_gen = p_gen + HIST_EPS
    p_ref = p_ref + HIST_EPS
    p_gen /= p_gen.sum()
    p_ref /= p_ref.sum()
    edge = 1e-10
    angles = np.linspace(edge, np.pi / 2 - edge, num_angles)
    slopes = np.tan(angles)
    precision = np.minimum(p_ref[None] * slopes[:, None], p_gen[None]).sum(axis=1)
    recall = precision / slopes
    return np.clip(precision, 0, 1), np.clip(recall, 0, 1)


def prd_fbeta(gen, ref, beta: float, num_clusters: int, seed: int = 0) -> float:
    """Max F_beta along the PRD curve; beta = 8 weights recall, 1/8 precision."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    p, r = prd_curve(gen, ref, num_clusters, seed)
    b2 = beta * beta
    denom = b2 * p + r
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(denom > 0, (1 + b2) * p * r / denom, 0.0)
    return float(f.max())


def knn_recall(gen, ref, K: int = 5, chunk: int = 2048) -> float:
    """Fraction of ref points inside the union of gen's K-NN balls."""
    gen = _as_samples(gen, "gen", K + 1)
    ref = _as_samples(ref, "ref", K + 1)
    tree = cKDTree(gen)
    # k+1 because each gen point is its own nearest neighbour
    radii = tree.query(gen, k=K + 1)[0][:, -1]
    hit = np.zeros(len(ref), dtype=bool)
    for s in range(0, len(ref), chunk):
        block = ref[s:s + chunk]
        d2 = ((block[:, None, :] - gen[None]) ** 2).sum(-1)
        hit[s:s + chunk] = (d2 <= radii[None] ** 2).any(axis=1)
    return float(hit.mean())


def mode_coverage(gen, spec: MixtureSpec, y: int, radius_mult: float = 2.0) -> float:
    """Fraction of class-y modes with at least one sample within radius_mult * sigma."""
    if radius_mult <= 0:
        raise ValueError("radius_mult must be positive")
    centers = spec.centers[y]
    gen = np.asarray(gen, dtype=np.float64).reshape(-1, spec.data_dim)
    if len(gen) == 0:
        return 0.0
    d = np.sqrt(((gen[:, None, :] - centers[None]) ** 2).sum(-1)).min(axis=0)
    return float(np.mean(d <= radius_mult * spec.sigma))


def distance_to_mode(gen, spec: MixtureSpec, y: int) -> float:
    """Mean distance from each sample to the nearest class-y mode (fidelity proxy)."""
    gen = np.asarray(gen, dtype=np.float64).reshape(-1, spec.data_dim)
    d = np.sqrt(((gen[:, None, :] - spec.centers[y][None]) ** 2).sum(-1)).min(axis=1)
    return float(d.mean())


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_logistic(x, y, num_classes: int, steps: int = 500, lr: float = 0.5, l2: float = 1e-4,
                 seed: int = 0):
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardized with the training statistics; returns a
    ``predict`` function.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    mu, sd = x.mean(0), x.std(0) + 1e-12
    z = (x - mu) / sd
    rng = np.random.default_rng(seed)
    W = 0.01 * rng.standard_normal((z.shape[1], num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(steps):
        p = _softmax(z @ W + b)
        g = (p - onehot) / len(z)
        W -= lr * (z.T @ g + l2 * W)
        b -= lr * g.sum(0)

    def predict(xq):
        return np.argmax(((np.asarray(xq) - mu) / sd) @ W + b, axis=1)

    return predict


def macro_precision_recall(y_true, y_pred, num_classes: int):
    prec, rec = [], []
    for k in range(num_classes):
        tp = np.sum((y_pred == k) & (y_true == k))
        npred = np.sum(y_pred == k)
        ntrue = np.sum(y_true == k)
        prec.append(tp / npred if npred else 0.0)
        rec.append(tp / ntrue if ntrue else 0.0)
    return float(np.mean(prec)), float(np.mean(rec))


def downstream_eval(real_lt, gen, test, num_classes: int | None = None, steps: int = 500,
                    seed: int = 0):
    """Train a softmax classifier on real ∪ generated data; macro (precision, recall) on ``test``.

    Each of ``real_lt``, ``gen`` and ``test`` is an ``(x, y)`` pair or an object
    with ``x``/``y`` attributes; ``gen`` may be None or empty.
    """
    def xy(d):
        if d is None:
            return None
        x, y = (d.x, d.y) if hasattr(d, "x") else d
        return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)

    xr, yr = xy(real_lt)
    xt, yt = xy(test)
    counts = np.bincount(yt)
    if counts.min() != counts.max():
        raise ValueError("test set must be class-balanced")
    g = xy(gen)
    if g is not None and len(g[1]):
        xr = np.concatenate([xr, g[0]])
        yr = np.concatenate([yr, g[1]])
    K = num_classes or int(max(yr.max(), yt.max()) + 1)
    predict = fit_logistic(xr, yr, K, steps=steps, seed=seed)
    return macro_precision_recall(yt, predict(xt), K)


@dataclass
class MetricsReport:
    per_class: list = field(default_factory=list)  # dicts: class, count, frechet_raw, recall_knn, mode_coverage
    aggregate: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    PER_CLASS = ("class", "count", "frechet_raw", "recall_knn", "mode_coverage", "distance_to_mode")

    def check(self) -> None:
        for row in self.per_class:
            for k in ("recall_knn", "mode_coverage"):
                if not (0.0 <= row[k] <= 1.0):
                    raise ValueError(f"{k} out of [0, 1] for class {row['class']}")
        for k, v in self.aggregate.items():
            if not np.isfinite(v):
                raise ValueError(f"non-finite aggregate {k}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.PER_CLASS)
            for row in self.per_class:
                w.writerow([row[c] if c in ("class", "count") else repr(float(row[c])) for c in self.PER_CLASS])
            w.writerow(["macro", sum(r["count"] for r in self.per_class)]
                       + [repr(float(np.mean([r[c] for r in self.per_class]))) for c in self.PER_CLASS[2:]])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)


def evaluate_samples(samples: dict, spec: MixtureSpec, ref: dict, class_counts=None, knn_k: int = 5,
                     num_clusters: int | None = None, radius_mult: float = 2.0, seed: int = 0,
                     metadata: dict | None = None) -> MetricsReport:
    """Per-class and aggregate metrics for class-conditional samples.

    ``samples`` and ``ref`` map class index to an (n, d) array.
    """
    K = spec.K
    rows = []
    for k in range(K):
        g, r = samples[k], ref[k]
        rows.append({
            "class": k,
            "count": int(class_counts[k]) if class_counts is not None else len(r),
            "frechet_raw": frechet_raw(g, r),
            "recall_knn": knn_recall(g, r, knn_k),
            "mode_coverage": mode_coverage(g, spec, k, radius_mult),
            "distance_to_mode": distance_to_mode(g, spec, k),
        })
    gen_all = np.concatenate([samples[k] for k in range(K)])
    ref_all = np.concatenate([ref[k] for k in range(K)])
    nc = num_clusters or 20 * K
    agg = {
        "F_8": prd_fbeta(gen_all, ref_all, 8.0, nc, seed),
        "F_1/8": prd_fbeta(gen_all, ref_all, 1.0 / 8.0, nc, seed),
    }
    for c in MetricsReport.PER_CLASS[2:]:
        agg[f"macro_{c}"] = float(np.mean([r[c] for r in rows]))
    rep = MetricsReport(rows, agg, dict(metadata or {}, num_generated=int(len(gen_all)),
                                         num_reference=int(len(ref_all)), seed=seed))
    rep.check()
    return rep
