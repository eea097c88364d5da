import csv
import dataclasses
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbdm import runner
from cbdm.cli import main
from cbdm.config import (
    ConfigError, ExperimentConfig, SweepSection, TrainSection, load_config, parse_config, serialize_config,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMOKE = CONFIGS / "smoke.ini"


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke") / "run"
    assert main(["run", "--config", str(SMOKE), "--out", str(out)]) == 0
    return out


# ---------------------------------------------------------------- config

def test_shipped_configs_parse():
    for path in CONFIGS.glob("*.ini"):
        load_config(path).validate()


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2 ** 31 - 1),
    tau=st.floats(0, 1, allow_nan=False),
    steps=st.integers(1, 10_000),
    ema=st.one_of(st.none(), st.floats(0.5, 0.9999)),
    omegas=st.lists(st.floats(0, 5, allow_nan=False), min_size=1, max_size=6),
    label=st.sampled_from(["train", "sqrt", "balanced"]),
    run_id=st.from_regex(r"[a-z][a-z0-9_]{0,10}", fullmatch=True),
)
def test_parse_serialize_roundtrip(seed, tau, steps, ema, omegas, label, run_id):
    cfg = ExperimentConfig()
    cfg = dataclasses.replace(
        cfg.with_seed(seed),
        run=dataclasses.replace(cfg.run, run_id=run_id, seed=seed),
        train=TrainSection(tau=tau, steps=steps, ema_decay=ema, label_set_mode=label, warmup_steps=0),
        sweep=SweepSection(omega=tuple(omegas)),
    )
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_unknown_key_reported_with_line():
    text = "[run]\nseed = 1\n\n[train]\nsteps = 10\nlearning_rate = 0.1\n"
    with pytest.raises(ConfigError, match=r":6: unknown key 'learning_rate'"):
        parse_config(text, "bad.ini")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[training]\nsteps = 3\n")


def test_negative_tau_rejected_at_parse_time():
    with pytest.raises(ConfigError, match=r"bad.ini:3: .*tau"):
        parse_config("[train]\nsteps = 10\ntau = -0.1\n", "bad.ini")


def test_malformed_value_rejected():
    with pytest.raises(ConfigError, match=r":2: bad value for train.steps"):
        parse_config("[train]\nsteps = many\n")


def test_seed_environment_override(monkeypatch):
    monkeypatch.setenv("CBDM_SEED", "42")
    assert load_config(SMOKE).run.seed == 42
    assert load_config(SMOKE, seed_override=7).run.seed == 7
    monkeypatch.setenv("CBDM_SEED", "x")
    with pytest.raises(ConfigError):
        load_config(SMOKE)


def test_config_digest_tracks_content():
    a = ExperimentConfig()
    assert a.digest() == ExperimentConfig().digest()
    assert a.digest() != a.with_seed(1).digest()


# ---------------------------------------------------------------- runs

def test_smoke_run_artifacts(smoke_run):
    for name in ("config.ini", "manifest.json", "checkpoint.bin", "checkpoint_ema.bin", "train_log.csv",
                 "train_data.csv", "spec.json", "samples.csv", "metrics.csv", "metrics.json"):
        assert (smoke_run / name).exists(), name
    man = runner.read_manifest(smoke_run)
    assert man["status"] == "complete" and man["kind"] == "experiment"
    assert runner.verify_manifest(smoke_run) == []
    assert set(man["files"]) >= {"checkpoint.bin", "samples.csv", "metrics.json"}
    assert man["config_digest"] == load_config(smoke_run / "config.ini").digest()


def test_rerun_reproduces_samples(smoke_run, tmp_path):
    again = tmp_path / "again"
    assert main(["run", "--config", str(SMOKE), "--out", str(again)]) == 0
    assert (again / "samples.csv").read_bytes() == (smoke_run / "samples.csv").read_bytes()


def test_chained_verbs_match_run(smoke_run, tmp_path):
    d = tmp_path / "chain"
    for verb in ("train", "sample", "eval"):
        assert main([verb, "--config", str(SMOKE), "--out", str(d)]) == 0
    assert (d / "samples.csv").read_bytes() == (smoke_run / "samples.csv").read_bytes()
    assert runner.verify_manifest(d) == []
    assert {"checkpoint.bin", "samples.csv", "metrics.csv"} <= set(runner.read_manifest(d)["files"])


def test_manifest_detects_tampering(smoke_run, tmp_path):
    import shutil
    d = tmp_path / "copy"
    shutil.copytree(smoke_run, d)
    with open(d / "samples.csv", "a") as fh:
        fh.write("0.0,0.0,0\n")
    assert runner.verify_manifest(d) == ["samples.csv"]


def test_failed_run_marks_manifest(tmp_path, monkeypatch):
    def boom(*a, **kw):
        raise RuntimeError("sampler exploded")

    monkeypatch.setattr(runner, "sample_stage", boom)
    d = tmp_path / "fail"
    assert main(["run", "--config", str(SMOKE), "--out", str(d)]) == 2
    man = runner.read_manifest(d)
    assert man["status"] == "failed" and "sampler exploded" in man["error"]
    assert man["finished"] is not None


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\ntau = -1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert main(["run", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "y")]) == 1
    # sampling without a checkpoint is a runtime failure
    assert main(["sample", "--config", str(SMOKE), "--out", str(tmp_path / "z")]) == 2
    assert main(["report", "--out", str(tmp_path / "nothing")]) == 2
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_omega_sweep(tmp_path):
    cfg = load_config(SMOKE)
    cfg = dataclasses.replace(
        cfg, sweep=ExperimentConfig().sweep,
        sample=dataclasses.replace(cfg.sample, num_samples=20),
        metrics=dataclasses.replace(cfg.metrics, reference_samples=40),
    )
    text = tmp_path / "sweep.ini"
    text.write_text(serialize_config(cfg))
    out = tmp_path / "sw"
    assert main(["sweep", "--axis", "omega", "--config", str(text), "--out", str(out)]) == 0
    rows = _read_rows(out / "sweep.csv")
    assert [float(r["omega"]) for r in rows] == pytest.approx(np.linspace(0, 2, 11))
    assert {"F_8", "F_1/8", "macro_frechet_raw", "tail_recall_knn"} <= set(rows[0])
    man = runner.read_manifest(out)
    assert "sweep.csv" in man["files"] and man["kind"] == "sweep:omega"
    assert runner.verify_manifest(out) == []
    assert len(list(out.glob("omega_*"))) == 11
    svg = runner.emit_report(out)
    ET.parse(svg[0])


def test_report_and_delta(smoke_run, tmp_path):
    other = tmp_path / "seed1"
    assert main(["run", "--config", str(SMOKE), "--out", str(other), "--seed-override", "1"]) == 0
    assert runner.read_manifest(other)["seeds"]["run"] == 1
    assert main(["report", "--out", str(other), "--baseline", str(smoke_run)]) == 0
    per_class = _read_rows(other / "per_class.csv")
    assert len(per_class) == 8
    counts = [int(r["count"]) for r in per_class]
    assert counts == sorted(counts, reverse=True)
    for name in ("per_class.svg", "samples.svg"):
        root = ET.parse(other / name).getroot()
        assert root.tag.endswith("svg")
    # independent recomputation of the delta from the two metric files
    mine = {r["class"]: r for r in json.loads((other / "metrics.json").read_text())["per_class"]}
    base = {r["class"]: r for r in json.loads((smoke_run / "metrics.json").read_text())["per_class"]}
    for row in _read_rows(other / "delta_per_class.csv"):
        k = int(row["class"])
        for col in ("frechet_raw", "recall_knn", "mode_coverage", "distance_to_mode"):
            assert float(row[col]) == pytest.approx(mine[k][col] - base[k][col], abs=1e-12)


def test_report_lists_missing_artifacts(smoke_run, tmp_path):
    import shutil
    d = tmp_path / "broken"
    shutil.copytree(smoke_run, d)
    (d / "metrics.json").unlink()
    with pytest.raises(FileNotFoundError, match="metrics.json"):
        runner.emit_report(d)


def test_oracle_verb(tmp_path):
    ini = tmp_path / "o.ini"
    ini.write_text("[oracle]\npriors = 0.9, 0.99\nmc_samples = 2000\n")
    out = tmp_path / "oracle"
    assert main(["oracle", "--config", str(ini), "--out", str(out)]) == 0
    rows = _read_rows(out / "oracle.csv")
    assert len(rows) == 2 * 4
    for r in rows:
        assert float(r["residual"]) < 1e-8
        if r["t"] != "1":
            assert float(r["lhs"]) <= float(r["rhs"]) + 3 * float(r["stderr"])
    assert runner.verify_manifest(out) == []


def test_tau_sweep_interior_optimum(tmp_path):
    """Benchmark tau grid of 0.1x, 1x and 10x the 1/T default; the best macro
    Frechet distance should fall strictly inside the grid."""
    cfg = load_config(CONFIGS / "benchmark.ini")
    tau0 = 1.0 / cfg.schedule.T
    cfg = dataclasses.replace(cfg, sweep=dataclasses.replace(cfg.sweep, tau=(0.1 * tau0, tau0, 10 * tau0)))
    ini = tmp_path / "tau.ini"
    ini.write_text(serialize_config(cfg))
    out = tmp_path / "tau"
    assert main(["sweep", "--axis", "tau", "--config", str(ini), "--out", str(out)]) == 0
    rows = _read_rows(out / "sweep.csv")
    assert len(rows) == 3
    best = int(np.argmin([float(r["macro_frechet_raw"]) for r in rows]))
    print("tau sweep macro_frechet_raw:", [(r["tau"], r["macro_frechet_raw"]) for r in rows])
    assert best == 1
