"""Acceptance checks, one test per criterion; each prints a single PASS/FAIL line.

The trend criteria (5 to 9) share models trained on the benchmark config and
cached in ``bench``; the first of them pays for the training.
"""
import dataclasses
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

import bench
from cbdm.data import MixtureSpec, generate_dataset, sample_class
from cbdm.denoiser import DenoiserConfig, backward, grad_check, init_denoiser, save_params, sg
from cbdm.loss import CbdmWeights, cbdm_loss, ddpm_closure, tcfg_losses
from cbdm.metrics import downstream_eval, frechet_raw, knn_recall, prd_fbeta
from cbdm.oracle import GaussianCase, symmetric_case, verify_prop1, verify_prop2_bound
from cbdm.runner import generate_class_samples
from cbdm.schedule import build_schedule
from cbdm.trainer import train

SEEDS5 = (0, 1, 2, 3, 4)
SEEDS3 = (0, 1, 2)


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def tau0():
    return 1.0 / bench.base_config().schedule.T


def test_criterion_01_prop1_identity(verdict):
    start = time.perf_counter()
    schedule = build_schedule(200, 1e-4, 0.02)
    priors = [(0.9, 0.1), (0.99, 0.01), (0.7, 0.3), (0.8, 0.15, 0.05)]
    worst = 0.0
    for p in priors:
        case = symmetric_case(schedule, prior=p)
        for t in (1, schedule.T // 2, schedule.T):
            worst = max(worst, verify_prop1(case, t))
    elapsed = time.perf_counter() - start
    verdict(1, worst < 1e-8 and elapsed < 10,
            f"max residual {worst:.2e} over {len(priors)} priors x t in {{1, T/2, T}}, {elapsed:.1f}s")


def test_criterion_02_prop2_bound(verdict):
    start = time.perf_counter()
    schedule = build_schedule(200, 1e-4, 0.02)
    worst_z, n_cases = -np.inf, 0
    for p in ((0.9, 0.1), (0.99, 0.01)):
        case = symmetric_case(schedule, prior=p)
        for t in (2, 10, 100, 200):
            est = verify_prop2_bound(case, t, mc_samples=10_000, seed=t)
            worst_z = max(worst_z, (est.lhs - est.rhs) / est.stderr)
            n_cases += 1
    single = GaussianCase([0.5], 0.7, [1.0], [1.0], schedule)
    gap = max(abs(e.lhs - e.rhs) for e in (verify_prop2_bound(single, t, 10_000) for t in (2, 100, 200)))
    elapsed = time.perf_counter() - start
    verdict(2, worst_z <= 3 and gap < 1e-4 and elapsed < 60,
            f"max (lhs-rhs)/stderr {worst_z:.1f} over {n_cases} cases, equality gap {gap:.1e}, {elapsed:.1f}s")


def test_criterion_03_gradient_suite(verdict):
    rng = np.random.default_rng(0)
    params = init_denoiser(DenoiserConfig(num_classes=4, hidden_dims=(16, 16)), seed=0)
    tparams = init_denoiser(DenoiserConfig(num_classes=4, hidden_dims=(16,), tcfg_enabled=True), seed=0)
    B = 6
    x, y = rng.normal(size=(B, 2)), rng.integers(0, 4, B)
    t, eps = rng.integers(1, 201, B), rng.normal(size=(B, 2))
    label_set = rng.integers(0, 4, (B, 2))
    errs = {
        "ddpm": grad_check(params, 64, closure=ddpm_closure(x, y, t, eps)),
        "cbdm": grad_check(params, 64, closure=cbdm_loss(x, y, t, eps, label_set, CbdmWeights(1e-3, 0.25, 2))),
        "tcfg": grad_check(tparams, 64, closure=tcfg_losses(x, y, t, eps, rng.uniform(0, 2, B))),
    }
    # stop-gradient paths: a fully frozen loss has zero gradient, and freezing
    # equals substituting the numeric value
    _, g0 = backward(params, lambda tape: sg(tape.eps(x, y, t)).sq_norm().sum())
    zero_path = max(float(np.abs(g).max()) for g in g0.values())
    y2 = (y + 1) % 4
    const = params.predict_eps(x, y2, t)
    _, g1 = backward(params, lambda tape: (tape.eps(x, y, t) - sg(tape.eps(x, y2, t))).sq_norm().mean())
    _, g2 = backward(params, lambda tape: (tape.eps(x, y, t) - const).sq_norm().mean())
    subst = max(float(np.abs(g1[k] - g2[k]).max()) for k in g1)
    worst = max(errs.values())
    verdict(3, worst < 1e-4 and zero_path <= 1e-12 and subst <= 1e-12,
            "grad_check " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
            + f"; stop-grad zero path {zero_path:.0e}, substitution {subst:.0e}")


def test_criterion_04_ddpm_equivalence(verdict, tmp_path):
    cfg = bench.config_for(0, steps=1000)
    schedule, _, _, dconf = bench.components()
    ds = bench.dataset(0)
    a, _ = train(dataclasses.replace(cfg.train_config(), objective="cbdm", tau=0.0), ds, schedule, dconf)
    b, _ = train(dataclasses.replace(cfg.train_config(), objective="ddpm"), ds, schedule, dconf)
    save_params(a, tmp_path / "cbdm.bin")
    save_params(b, tmp_path / "ddpm.bin")
    same = (tmp_path / "cbdm.bin").read_bytes() == (tmp_path / "ddpm.bin").read_bytes()
    verdict(4, same, f"tau=0 CBDM vs DDPM checkpoints after 1000 steps: {'identical' if same else 'differ'}")


def test_criterion_05_tail_trend(verdict):
    start = time.perf_counter()
    rows = {}
    for name, tau in (("ddpm", 0.0), ("cbdm", tau0())):
        best = [bench.best_of_sweep(s, tau) for s in SEEDS5]
        rows[name] = (np.mean([b[2]["tail_coverage"] for b in best]),
                      np.mean([b[2]["tail_recall"] for b in best]),
                      [b[0] for b in best])
    elapsed = time.perf_counter() - start
    (c0, r0, w0), (c1, r1, w1) = rows["ddpm"], rows["cbdm"]
    verdict(5, c1 > c0 and r1 > r0 and elapsed < 1800,
            f"tail coverage cbdm {c1:.3f} vs ddpm {c0:.3f}; tail recall cbdm {r1:.3f} vs ddpm {r0:.3f}; "
            f"best omega cbdm {w1} ddpm {w0}; {elapsed:.0f}s")


def test_criterion_06_fidelity_tradeoff(verdict):
    parts, ok = [], True
    for name, tau in (("ddpm", 0.0), ("cbdm", tau0())):
        sweeps = [bench.omega_sweep(s, tau) for s in SEEDS5]
        omegas = [e[0] for e in sweeps[0]]
        dist = np.mean([[e[2]["distance"] for e in sw] for sw in sweeps], axis=0)
        rho = spearmanr(omegas, dist).statistic
        ok &= rho <= -0.8
        parts.append(f"{name} spearman {rho:.2f} (distance {dist[0]:.3f} -> {dist[-1]:.3f})")
    verdict(6, ok, "; ".join(parts))


def test_criterion_07_label_set_finetune(verdict):
    schedule, spec, _, _ = bench.components()
    cfg = bench.base_config()
    steps = cfg.train.steps // 4
    nc = cfg.metrics.num_clusters or 20 * spec.K
    scores = {"balanced": [], "continue": []}
    for s in SEEDS3:
        ref = bench.references(s)
        ref_all = np.concatenate([ref[k] for k in range(spec.K)])
        runs = {"balanced": bench.finetuned(s, "balanced", tau0(), steps),
                "continue": bench.finetuned(s, "train", 0.0, steps)}
        for name, params in runs.items():
            samples = generate_class_samples(params, schedule, bench.config_for(s))
            gen_all = np.concatenate([samples[k] for k in range(spec.K)])
            f8 = prd_fbeta(gen_all, ref_all, 8.0, nc, cfg.metrics.prd_seed)
            rec = np.mean([knn_recall(samples[k], ref[k], cfg.metrics.knn_k) for k in range(spec.K)])
            scores[name].append((f8, rec))
    bal, cont = np.mean(scores["balanced"], axis=0), np.mean(scores["continue"], axis=0)
    verdict(7, bal[0] > cont[0] and bal[1] > cont[1],
            f"{steps}-step fine-tune: F_8 balanced {bal[0]:.4f} vs tau=0 {cont[0]:.4f}; "
            f"knn recall balanced {bal[1]:.4f} vs tau=0 {cont[1]:.4f}")


def test_criterion_08_ddim_robustness(verdict):
    schedule = bench.components()[0]
    omega, _, summary = bench.best_of_sweep(0, tau0())
    cfg = bench.config_for(0)
    cfg = dataclasses.replace(cfg, sample=dataclasses.replace(cfg.sample, method="ddim",
                                                              ddim_steps=schedule.T // 10))
    ddim = bench.summarize(generate_class_samples(bench.model(0, tau0()), schedule, cfg, omega=omega), 0)
    rel = abs(ddim["frechet"] - summary["frechet"]) / summary["frechet"]
    verdict(8, rel < 0.25,
            f"macro frechet DDPM {schedule.T} steps {summary['frechet']:.4f} vs DDIM {schedule.T // 10} steps "
            f"{ddim['frechet']:.4f} (omega {omega}); relative change {rel:.1%}")


def test_criterion_09_downstream(verdict):
    _, spec, _, _ = bench.components()
    n_test = bench.base_config().metrics.reference_samples
    recall = {"ddpm": [], "cbdm": []}
    for s in SEEDS3:
        real = bench.dataset(s)
        test = generate_dataset(spec, np.full(spec.K, n_test), seed=10_000 + s)
        for name, tau in (("ddpm", 0.0), ("cbdm", tau0())):
            samples = bench.best_of_sweep(s, tau)[1]
            gx = np.concatenate([samples[k] for k in range(spec.K)])
            gy = np.concatenate([np.full(len(samples[k]), k) for k in range(spec.K)])
            recall[name].append(downstream_eval(real, (gx, gy), test, spec.K, seed=s)[1])
    r0, r1 = np.mean(recall["ddpm"]), np.mean(recall["cbdm"])
    verdict(9, r1 >= r0, f"downstream macro recall with cbdm samples {r1:.4f} vs tau=0 samples {r0:.4f}")


def test_criterion_10_metric_self_tests(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    a = rng.normal(size=(300, 2))
    b = rng.normal(loc=(0.8, 0.0), scale=(1.5, 0.5), size=(200, 2))
    checks = {
        "frechet identity": frechet_raw(a, a) < 1e-6,
        "frechet symmetry": abs(frechet_raw(a, b) - frechet_raw(b, a)) < 1e-10,
        "frechet point masses": abs(frechet_raw(np.zeros((5, 2)), np.tile([2.0, 0.0], (5, 1))) - 2.0) < 1e-6,
        "prd duality": max(abs(prd_fbeta(a, b, 8.0, 20) - prd_fbeta(b, a, 0.125, 20)),
                           abs(prd_fbeta(a, b, 0.125, 20) - prd_fbeta(b, a, 8.0, 20))) < 1e-6,
        "prd identity": prd_fbeta(a, a, 8.0, 20) >= 0.99,
        "prd disjoint": prd_fbeta(a, a + 100, 8.0, 20) <= 0.05,
        "knn identity": knn_recall(a, a) == 1.0,
        "knn far": knn_recall(a, a + 100) == 0.0,
    }
    spec = MixtureSpec(centers=(np.zeros((1, 2)),), sigma=0.15)
    gen, ref = sample_class(spec, 0, 300, rng), sample_class(spec, 0, 500, rng)
    checks["knn half-ref stability"] = abs(knn_recall(gen, ref) - knn_recall(gen, ref[:250])) < 0.05
    elapsed = time.perf_counter() - start
    failed = [k for k, v in checks.items() if not v]
    verdict(10, not failed and elapsed < 30,
            f"{len(checks) - len(failed)}/{len(checks)} checks pass{' (failed: ' + ', '.join(failed) + ')' if failed else ''}, "
            f"{elapsed:.1f}s")
