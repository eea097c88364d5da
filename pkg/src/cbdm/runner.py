"""Run orchestration: data → train → sample → evaluate, sweeps, manifests and reports."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, serialize_config
from .data import MixtureSpec, benchmark_spec, generate_dataset, make_longtail_counts, read_csv, sample_class, write_csv
from .denoiser import DenoiserConfig, load_params, save_params
from .metrics import MetricsReport, evaluate_samples
from .sampler import SampleRequest, sample
from .schedule import build_schedule
from .trainer import train

log = logging.getLogger(__name__)

SWEEP_AXES = ("omega", "tau", "phi", "labelset")
MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.bin"
SAMPLES = "samples.csv"


# ---------------------------------------------------------------- manifest

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class RunManifest:
    """JSON record of a run: config digest, seeds, timestamps, artifact digests."""

    def __init__(self, run_dir, cfg: ExperimentConfig, kind: str):
        self.run_dir = Path(run_dir)
        self.data = {
            "kind": kind,
            "run_id": cfg.run.run_id,
            "config_digest": cfg.digest(),
            "code_version": __version__,
            "seeds": {"run": cfg.run.seed},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "status": "running",
            "files": {},
        }

    def add(self, *paths) -> None:
        for p in paths:
            p = Path(p)
            self.data["files"][str(p.relative_to(self.run_dir))] = file_digest(p)

    def write(self) -> None:
        with open(self.run_dir / MANIFEST, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)

    def finish(self, status: str, error: str | None = None) -> None:
        self.data["status"] = status
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        if error:
            self.data["error"] = error
        self.write()


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{run_dir}: no {MANIFEST}")
    with open(path) as fh:
        return json.load(fh)


def verify_manifest(run_dir) -> list[str]:
    """Names of listed files that are missing or whose digest differs."""
    run_dir = Path(run_dir)
    bad = []
    for name, digest in read_manifest(run_dir)["files"].items():
        p = run_dir / name
        if not p.exists() or file_digest(p) != digest:
            bad.append(name)
    return bad


def _managed(run_dir, cfg, kind, body):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(serialize_config(cfg))
    man = RunManifest(run_dir, cfg, kind)
    if (run_dir / MANIFEST).exists():
        # chained verbs (train, then sample, then eval) accumulate artifacts
        prev = read_manifest(run_dir)
        man.data["files"].update({n: d for n, d in prev["files"].items() if (run_dir / n).exists()})
    man.add(run_dir / "config.ini")
    man.write()
    try:
        body(man)
    except BaseException as exc:
        man.finish("failed", f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=5)}")
        raise
    man.finish("complete")
    return run_dir


# ---------------------------------------------------------------- building blocks

def build_components(cfg: ExperimentConfig):
    schedule = build_schedule(cfg.schedule.T, cfg.schedule.beta1, cfg.schedule.betaT)
    d = cfg.data
    spec = benchmark_spec(d.num_classes, d.radius, d.sigma, d.modes_per_class, d.mode_spread)
    counts = make_longtail_counts(d.head_count, d.num_classes, d.imbalance)
    m = cfg.model
    dconf = DenoiserConfig(num_classes=d.num_classes, data_dim=spec.data_dim, hidden_dims=tuple(m.hidden_dims),
                           time_embed_dim=m.time_embed_dim, class_embed_dim=m.class_embed_dim,
                           tcfg_enabled=m.tcfg_enabled, omega_embed_dim=m.omega_embed_dim,
                           max_timestep=cfg.schedule.T, omega_max=cfg.train.omega_max)
    return schedule, spec, counts, dconf


def reference_samples(cfg: ExperimentConfig, spec: MixtureSpec) -> dict:
    """Fresh draws from the true class laws, independent of the training data."""
    n = cfg.metrics.reference_samples
    return {k: sample_class(spec, k, n, np.random.default_rng([cfg.run.seed, 1, k])) for k in range(spec.K)}


def generate_class_samples(model, schedule, cfg: ExperimentConfig, omega: float | None = None) -> dict:
    s = cfg.sample
    om = s.omega if omega is None else omega
    out = {}
    for k in range(model.num_classes):
        req = SampleRequest(y=k, omega=om, num_samples=s.num_samples, method=s.method,
                            ddim_steps=s.ddim_steps, seed=cfg.run.seed * 1000 + k, use_tcfg=s.use_tcfg)
        out[k] = sample(model, schedule, req)
    return out


def _write_samples(path, samples: dict) -> None:
    ks = sorted(samples)
    write_csv(path, np.concatenate([samples[k] for k in ks]),
              np.concatenate([np.full(len(samples[k]), k) for k in ks]))


def _read_samples(path) -> dict:
    x, y = read_csv(path)
    return {int(k): x[y == k] for k in np.unique(y)}


def evaluate(samples: dict, cfg: ExperimentConfig, spec: MixtureSpec, counts) -> MetricsReport:
    m = cfg.metrics
    return evaluate_samples(samples, spec, reference_samples(cfg, spec), counts, knn_k=m.knn_k,
                            num_clusters=m.num_clusters or None, radius_mult=m.radius_mult, seed=m.prd_seed,
                            metadata={"run_id": cfg.run.run_id, "run_seed": cfg.run.seed,
                                      "omega": cfg.sample.omega})


# ---------------------------------------------------------------- verbs

def train_stage(cfg: ExperimentConfig, run_dir, man: RunManifest | None = None, init_params=None):
    run_dir = Path(run_dir)
    schedule, spec, counts, dconf = build_components(cfg)
    ds = generate_dataset(spec, counts, cfg.run.seed, cfg.data.imbalance)
    write_csv(run_dir / "train_data.csv", ds.x, ds.y)
    (run_dir / "spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True))
    params, tlog = train(cfg.train_config(), ds, schedule, dconf, init_params=init_params, run_dir=run_dir)
    save_params(params, run_dir / CHECKPOINT)
    tlog.write_csv(run_dir / "train_log.csv")
    if tlog.ema is not None:
        save_params(tlog.ema, run_dir / "checkpoint_ema.bin")
    if man is not None:
        man.add(*sorted(run_dir.glob("checkpoint*.bin")), run_dir / "train_data.csv",
                run_dir / "spec.json", run_dir / "train_log.csv")
    # with averaging enabled, the averaged weights are the ones evaluated
    return tlog.ema if tlog.ema is not None else params


def sample_stage(cfg: ExperimentConfig, run_dir, params=None, man: RunManifest | None = None):
    run_dir = Path(run_dir)
    schedule, _, _, _ = build_components(cfg)
    if params is None:
        ema = run_dir / "checkpoint_ema.bin"
        params = load_params(ema if ema.exists() else run_dir / CHECKPOINT)
    samples = generate_class_samples(params, schedule, cfg)
    _write_samples(run_dir / SAMPLES, samples)
    if man is not None:
        man.add(run_dir / SAMPLES)
    return samples


def eval_stage(cfg: ExperimentConfig, run_dir, samples=None, man: RunManifest | None = None) -> MetricsReport:
    run_dir = Path(run_dir)
    _, spec, counts, _ = build_components(cfg)
    if samples is None:
        samples = _read_samples(run_dir / SAMPLES)
    rep = evaluate(samples, cfg, spec, counts)
    rep.write_csv(run_dir / "metrics.csv")
    rep.write_json(run_dir / "metrics.json")
    if man is not None:
        man.add(run_dir / "metrics.csv", run_dir / "metrics.json")
    return rep


def run_train(cfg, run_dir):
    return _managed(run_dir, cfg, "train", lambda man: train_stage(cfg, run_dir, man))


def run_sample(cfg, run_dir):
    return _managed(run_dir, cfg, "sample", lambda man: sample_stage(cfg, run_dir, man=man))


def run_eval(cfg, run_dir):
    return _managed(run_dir, cfg, "eval", lambda man: eval_stage(cfg, run_dir, man=man))


def run_experiment(cfg: ExperimentConfig, run_dir) -> Path:
    """Full pipeline into ``run_dir``; returns the directory."""
    def body(man):
        params = train_stage(cfg, run_dir, man)
        samples = sample_stage(cfg, run_dir, params, man)
        eval_stage(cfg, run_dir, samples, man)
    return _managed(run_dir, cfg, "experiment", body)


def _tail_means(rep: MetricsReport) -> dict:
    K = len(rep.per_class)
    tail = rep.per_class[K // 2:]
    return {f"tail_{c}": float(np.mean([r[c] for r in tail])) for c in ("recall_knn", "mode_coverage", "frechet_raw")}


def _sweep_values(cfg: ExperimentConfig, axis: str):
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    vals = getattr(cfg.sweep, axis)
    if not vals:
        raise ValueError(f"empty sweep grid for {axis}")
    return vals


def _with_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    key = {"tau": "tau", "phi": "cond_dropout_phi", "labelset": "label_set_mode"}[axis]
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **{key: value}))


def run_sweep(cfg: ExperimentConfig, axis: str, sweep_dir) -> Path:
    """One sub-run per grid value; consolidated ``sweep.csv`` written at the end.

    The omega axis reuses a single trained model since guidance strength only
    affects sampling.
    """
    values = _sweep_values(cfg, axis)
    sweep_dir = Path(sweep_dir)

    def body(man):
        rows = []
        if axis == "omega":
            base = sweep_dir / "model"
            base.mkdir(parents=True, exist_ok=True)
            params = train_stage(cfg, base, man)
            schedule, spec, counts, _ = build_components(cfg)
            for om in values:
                sub = dataclasses.replace(cfg, sample=dataclasses.replace(cfg.sample, omega=float(om)))
                d = sweep_dir / f"omega_{om:g}"
                d.mkdir(exist_ok=True)
                samples = sample_stage(sub, d, params, man)
                rep = eval_stage(sub, d, samples, man)
                rows.append((om, rep))
        else:
            for v in values:
                sub = _with_axis(cfg, axis, v)
                d = sweep_dir / f"{axis}_{v:g}" if not isinstance(v, str) else sweep_dir / f"{axis}_{v}"
                run_experiment(sub, d)
                man.add(*[d / n for n in read_manifest(d)["files"]])
                rows.append((v, MetricsReport(**json.loads((d / "metrics.json").read_text()))))
        path = sweep_dir / "sweep.csv"
        keys = sorted(rows[0][1].aggregate)
        tails = sorted(_tail_means(rows[0][1]))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([axis] + keys + tails)
            for v, rep in rows:
                tm = _tail_means(rep)
                w.writerow([v] + [repr(float(rep.aggregate[k])) for k in keys] + [repr(tm[k]) for k in tails])
        man.add(path)

    return _managed(sweep_dir, cfg, f"sweep:{axis}", body)


def run_oracle(cfg: ExperimentConfig, out_dir) -> Path:
    """Identity residuals and bound estimates for two-class 1-D Gaussian cases."""
    from .oracle import symmetric_case, verify_prop1, verify_prop2_bound

    out_dir = Path(out_dir)

    def body(man):
        schedule = build_schedule(cfg.schedule.T, cfg.schedule.beta1, cfg.schedule.betaT)
        T = schedule.T
        path = out_dir / "oracle.csv"
        o = cfg.oracle
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "t", "residual", "lhs", "rhs", "stderr", "slack"])
            for i, head in enumerate(o.priors):
                case = symmetric_case(schedule, (head, 1 - head), mu=o.mu, s=o.s)
                for t in sorted({1, 2, T // 2, T}):
                    res = verify_prop1(case, t)
                    if t >= 2:
                        b = verify_prop2_bound(case, t, o.mc_samples, seed=cfg.run.seed, tau=o.tau)
                        vals = [b.lhs, b.rhs, b.stderr, b.rhs - b.lhs]
                    else:
                        vals = [float("nan")] * 4
                    w.writerow([f"prior_{head:g}", t, repr(res)] + [repr(float(v)) for v in vals])
        man.add(path)

    return _managed(out_dir, cfg, "oracle", body)


# ---------------------------------------------------------------- reports

def _svg(fig, path) -> None:
    import matplotlib
    matplotlib.rcParams["svg.hashsalt"] = "cbdm"
    fig.savefig(path, format="svg", metadata={"Date": None})


def per_class_table(run_dir) -> list[dict]:
    """Per-class metric rows of a run, sorted by class frequency (most frequent first)."""
    rep = json.loads((Path(run_dir) / "metrics.json").read_text())
    return sorted(rep["per_class"], key=lambda r: (-r["count"], r["class"]))


def _write_rows(path, rows, cols) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if c in ("class", "count") else repr(float(r[c])) for c in cols])


def emit_report(run_dir, baseline_dir=None) -> list[Path]:
    """Per-class CSV and SVG plots for a run or sweep directory.

    With ``baseline_dir``, also writes ``delta_per_class.csv`` holding
    (this run - baseline) for every per-class metric.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    man = read_manifest(run_dir)
    missing = [n for n in man["files"] if not (run_dir / n).exists()]
    if missing:
        raise FileNotFoundError(f"{run_dir}: missing artifacts {missing}")
    out = []
    if (run_dir / "sweep.csv").exists():
        with open(run_dir / "sweep.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], rows[1:]
        numeric = all(_is_float(r[0]) for r in body)
        xs = [float(r[0]) for r in body] if numeric else list(range(len(body)))
        fig, axes = plt.subplots(1, len(head) - 1, figsize=(3 * (len(head) - 1), 3))
        for i, ax in enumerate(np.atleast_1d(axes), 1):
            ax.plot(xs, [float(r[i]) for r in body], marker="o")
            ax.set_title(head[i], fontsize=8)
            ax.set_xlabel(head[0])
            if not numeric:
                ax.set_xticks(xs, [r[0] for r in body])
        fig.tight_layout()
        _svg(fig, run_dir / "sweep.svg")
        plt.close(fig)
        out.append(run_dir / "sweep.svg")
        return out

    if not (run_dir / "metrics.json").exists():
        raise FileNotFoundError(f"{run_dir}: missing artifacts ['metrics.json']")
    rows = per_class_table(run_dir)
    cols = list(MetricsReport.PER_CLASS)
    _write_rows(run_dir / "per_class.csv", rows, cols)
    out.append(run_dir / "per_class.csv")

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.semilogx([r["count"] for r in rows], [r["frechet_raw"] for r in rows], "o-")
    ax.set_xlabel("class count")
    ax.set_ylabel("frechet_raw")
    fig.tight_layout()
    _svg(fig, run_dir / "per_class.svg")
    plt.close(fig)
    out.append(run_dir / "per_class.svg")

    if (run_dir / SAMPLES).exists():
        x, y = read_csv(run_dir / SAMPLES)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(x[:, 0], x[:, 1], c=y, s=2, cmap="tab10")
        ax.set_aspect("equal")
        fig.tight_layout()
        _svg(fig, run_dir / "samples.svg")
        plt.close(fig)
        out.append(run_dir / "samples.svg")

    if baseline_dir is not None:
        base = {r["class"]: r for r in per_class_table(baseline_dir)}
        delta = [{"class": r["class"], "count": r["count"],
                  **{c: r[c] - base[r["class"]][c] for c in cols[2:]}} for r in rows]
        _write_rows(run_dir / "delta_per_class.csv", delta, cols)
        out.append(run_dir / "delta_per_class.csv")
    return out


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False
